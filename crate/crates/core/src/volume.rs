use crate::error::{Error, Result};
use crate::volgrad::{Scalar, Tensor};

/// Dense 3D grid stored row-major as (depth, height, width).
///
/// NIfTI stores x fastest, so a file with dims (nx, ny, nz) maps to
/// `dims = [nz, ny, nx]` with the identical voxel buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

pub type LabelVolume = Volume<u32>;

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if n != data.len() {
            return Err(Error::dim("volume", format!("dims {dims:?} need {n} voxels, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(d, h, w)]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { dims: self.dims, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn same_shape<U>(&self, other: &Volume<U>) -> bool {
        self.dims == other.dims
    }
}

impl<T: Scalar> Volume<T> {
    /// View as a single-sample, single-channel tensor `[1, 1, D, H, W]`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 1, d, h, w], self.data.clone()).expect("volume buffer matches dims")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [1, 1, d, h, w] => Self::new([*d, *h, *w], t.data().to_vec()),
            [d, h, w] => Self::new([*d, *h, *w], t.data().to_vec()),
            s => Err(Error::dim("volume", format!("cannot view {s:?} as one volume"))),
        }
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        self.map(|x| U::of(x.as_f64()))
    }
}

/// Stacks volumes into an `[N, 1, D, H, W]` batch.
pub fn batch_tensor<T: Scalar>(volumes: &[&Volume<T>]) -> Result<Tensor<T>> {
    let first = volumes.first().ok_or(Error::Empty("volume batch"))?;
    let [d, h, w] = first.dims;
    let mut data = Vec::with_capacity(first.len() * volumes.len());
    for v in volumes {
        if v.dims != first.dims {
            return Err(Error::dim("batch", format!("{:?} vs {:?}", v.dims, first.dims)));
        }
        data.extend_from_slice(&v.data);
    }
    Tensor::new(vec![volumes.len(), 1, d, h, w], data)
}

//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! The 348-byte header is kept verbatim, in the byte order it was read in, so
//! orientation and affine fields pass through untouched. Voxel payloads are kept
//! in their stored datatype; [`NiftiVolume::values`] applies `scl_slope`/`scl_inter`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub const HEADER_SIZE: usize = 348;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8 = 2,
    I16 = 4,
    F32 = 16,
    F64 = 64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            c => Err(Error::NiftiDatatype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VoxelData {
    pub fn datatype(&self) -> Datatype {
        match self {
            VoxelData::U8(_) => Datatype::U8,
            VoxelData::I16(_) => Datatype::I16,
            VoxelData::F32(_) => Datatype::F32,
            VoxelData::F64(_) => Datatype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
            VoxelData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn raw_f64(&self) -> Vec<f64> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    header: Vec<u8>,
    big_endian: bool,
    /// Bytes between the header and `vox_offset` (extension flag and extensions).
    extension: Vec<u8>,
    data: VoxelData,
}

fn get_i16(h: &[u8], at: usize, be: bool) -> i16 {
    if be { BigEndian::read_i16(&h[at..]) } else { LittleEndian::read_i16(&h[at..]) }
}


fn get_f32(h: &[u8], at: usize, be: bool) -> f32 {
    if be { BigEndian::read_f32(&h[at..]) } else { LittleEndian::read_f32(&h[at..]) }
}

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    LittleEndian::write_i16(&mut h[at..], v);
}

fn put_f32(h: &mut [u8], at: usize, v: f32) {
    LittleEndian::write_f32(&mut h[at..], v);
}

/// Spatial extents (nx, ny, nz) from a raw header, rejecting non-singleton dims past 3.
fn spatial_dims(h: &[u8], be: bool) -> Result<[usize; 3]> {
    let dim: Vec<i16> = (0..8).map(|i| get_i16(h, offset::DIM + 2 * i, be)).collect();
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(Error::NiftiDims(format!("dim[0] = {rank}")));
    }
    let rank = rank as usize;
    if let Some(extra) = (4..=rank).find(|&i| dim[i] != 1) {
        return Err(Error::NiftiDims(format!("dim[{extra}] = {} on a {rank}-D image; only 3-D volumes are supported", dim[extra])));
    }
    let mut out = [1usize; 3];
    for (i, slot) in out.iter_mut().enumerate().take(rank.min(3)) {
        let v = dim[i + 1];
        if v < 1 {
            return Err(Error::NiftiDims(format!("dim[{}] = {v}", i + 1)));
        }
        *slot = v as usize;
    }
    Ok(out)
}

impl NiftiVolume {
    /// A little-endian single-file volume with identity-scaled voxels of 1 mm.
    pub fn new(dims_xyz: [usize; 3], data: VoxelData) -> Result<Self> {
        let n: usize = dims_xyz.iter().product();
        if n != data.len() {
            return Err(Error::dim("nifti", format!("dims {dims_xyz:?} need {n} voxels, got {}", data.len())));
        }
        if dims_xyz.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::NiftiDims(format!("{dims_xyz:?}")));
        }
        let mut h = vec![0u8; HEADER_SIZE];
        LittleEndian::write_i32(&mut h[offset::SIZEOF_HDR..], HEADER_SIZE as i32);
        put_i16(&mut h, offset::DIM, 3);
        for (i, &d) in dims_xyz.iter().enumerate() {
            put_i16(&mut h, offset::DIM + 2 * (i + 1), d as i16);
        }
        for i in 4..8 {
            put_i16(&mut h, offset::DIM + 2 * i, 1);
        }
        let dt = data.datatype();
        put_i16(&mut h, offset::DATATYPE, dt as i16);
        put_i16(&mut h, offset::BITPIX, (dt.size() * 8) as i16);
        put_f32(&mut h, offset::PIXDIM, 1.0);
        for i in 1..4 {
            put_f32(&mut h, offset::PIXDIM + 4 * i, 1.0);
        }
        put_f32(&mut h, offset::VOX_OFFSET, DEFAULT_VOX_OFFSET as f32);
        put_f32(&mut h, offset::SCL_SLOPE, 1.0);
        h[offset::XYZT_UNITS] = 2; // mm
        put_i16(&mut h, offset::QFORM_CODE, 0);
        put_i16(&mut h, offset::SFORM_CODE, 1);
        for row in 0..3 {
            put_f32(&mut h, offset::SROW_X + 16 * row + 4 * row, 1.0);
        }
        h[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
        Ok(Self { header: h, big_endian: false, extension: vec![0; 4], data })
    }

    pub fn from_volume_f32(volume: &Volume<f32>) -> Result<Self> {
        let [d, h, w] = volume.dims();
        Self::new([w, h, d], VoxelData::F32(volume.data().to_vec()))
    }

    pub fn from_labels(labels: &LabelVolume) -> Result<Self> {
        let [d, h, w] = labels.dims();
        let data = labels
            .data()
            .iter()
            .map(|&l| i16::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds int16"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new([w, h, d], VoxelData::I16(data))
    }

    pub fn header_bytes(&self) -> &[u8] {
        &self.header
    }

    pub fn is_big_endian(&self) -> bool {
        self.big_endian
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    /// (nx, ny, nz).
    pub fn dims_xyz(&self) -> [usize; 3] {
        spatial_dims(&self.header, self.big_endian).expect("validated on construction")
    }

    pub fn pixdim(&self) -> [f32; 3] {
        [1, 2, 3].map(|i| get_f32(&self.header, offset::PIXDIM + 4 * i, self.big_endian))
    }

    pub fn scaling(&self) -> (f32, f32) {
        (
            get_f32(&self.header, offset::SCL_SLOPE, self.big_endian),
            get_f32(&self.header, offset::SCL_INTER, self.big_endian),
        )
    }

    /// Sets `scl_slope`/`scl_inter` (written little-endian headers only).
    pub fn set_scaling(&mut self, slope: f32, inter: f32) {
        let put = |h: &mut [u8], at: usize, v: f32| {
            if self.big_endian { BigEndian::write_f32(&mut h[at..], v) } else { LittleEndian::write_f32(&mut h[at..], v) }
        };
        put(&mut self.header, offset::SCL_SLOPE, slope);
        put(&mut self.header, offset::SCL_INTER, inter);
    }

    /// Voxel values as f64 with `scl_slope`/`scl_inter` applied when the slope is non-zero.
    pub fn values(&self) -> Vec<f64> {
        let raw = self.data.raw_f64();
        let (slope, inter) = self.scaling();
        if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
            let (s, i) = (slope as f64, inter as f64);
            raw.into_iter().map(|v| v * s + i).collect()
        } else {
            raw
        }
    }

    /// Scaled values as a `(z, y, x)`-ordered volume.
    pub fn to_volume(&self) -> Volume<f64> {
        let [x, y, z] = self.dims_xyz();
        Volume::new([z, y, x], self.values()).expect("validated extent")
    }

    pub fn to_volume_f32(&self) -> Volume<f32> {
        self.to_volume().map(|v| v as f32)
    }

    /// Integer labels; errors on negative or non-integral values.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let v = self.to_volume();
        let data = v
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                    Ok(x as u32)
                } else {
                    Err(Error::InvalidArgument(format!("atlas value {x} is not a label")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Volume::new(v.dims(), data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decompressed;
        let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
            let mut out = Vec::new();
            GzDecoder::new(bytes)
                .read_to_end(&mut out)
                .map_err(|e| Error::io("<gzip stream>", e))?;
            decompressed = out;
            &decompressed[..]
        } else {
            bytes
        };
        if bytes.len() < HEADER_SIZE {
            return Err(Error::NiftiTruncated { expected: HEADER_SIZE, found: bytes.len() });
        }
        let h = &bytes[..HEADER_SIZE];
        let le = LittleEndian::read_i32(h);
        let big_endian = if le == HEADER_SIZE as i32 {
            false
        } else if BigEndian::read_i32(h) == HEADER_SIZE as i32 {
            true
        } else {
            return Err(Error::NiftiHeaderSize(le));
        };
        let magic: [u8; 4] = h[offset::MAGIC..offset::MAGIC + 4].try_into().expect("4 bytes");
        if &magic != MAGIC_SINGLE {
            return Err(Error::NiftiMagic(magic));
        }
        let dims = spatial_dims(h, big_endian)?;
        let dt = Datatype::from_code(get_i16(h, offset::DATATYPE, big_endian))?;
        let bitpix = get_i16(h, offset::BITPIX, big_endian);
        if bitpix as usize != dt.size() * 8 {
            return Err(Error::NiftiDatatype(get_i16(h, offset::DATATYPE, big_endian)));
        }
        let vox_offset = get_f32(h, offset::VOX_OFFSET, big_endian);
        if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
            return Err(Error::NiftiDims(format!("vox_offset {vox_offset}")));
        }
        let vox_offset = vox_offset as usize;
        let n: usize = dims.iter().product();
        let expected = vox_offset + n * dt.size();
        if bytes.len() < expected {
            return Err(Error::NiftiTruncated { expected, found: bytes.len() });
        }
        let raw = &bytes[vox_offset..expected];
        let data = match dt {
            Datatype::U8 => VoxelData::U8(raw.to_vec()),
            Datatype::I16 => VoxelData::I16(
                raw.chunks_exact(2)
                    .map(|c| if big_endian { BigEndian::read_i16(c) } else { LittleEndian::read_i16(c) })
                    .collect(),
            ),
            Datatype::F32 => VoxelData::F32(
                raw.chunks_exact(4)
                    .map(|c| if big_endian { BigEndian::read_f32(c) } else { LittleEndian::read_f32(c) })
                    .collect(),
            ),
            Datatype::F64 => VoxelData::F64(
                raw.chunks_exact(8)
                    .map(|c| if big_endian { BigEndian::read_f64(c) } else { LittleEndian::read_f64(c) })
                    .collect(),
            ),
        };
        Ok(Self {
            header: h.to_vec(),
            big_endian,
            extension: bytes[HEADER_SIZE..vox_offset].to_vec(),
            data,
        })
    }

    /// Uncompressed single-file bytes in the volume's own byte order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_SIZE + self.extension.len() + self.data.len() * 8);
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.extension);
        let be = self.big_endian;
        match &self.data {
            VoxelData::U8(v) => out.extend_from_slice(v),
            VoxelData::I16(v) => {
                for &x in v {
                    out.extend_from_slice(&if be { x.to_be_bytes() } else { x.to_le_bytes() });
                }
            }
            VoxelData::F32(v) => {
                for &x in v {
                    out.extend_from_slice(&if be { x.to_be_bytes() } else { x.to_le_bytes() });
                }
            }
            VoxelData::F64(v) => {
                for &x in v {
                    out.extend_from_slice(&if be { x.to_be_bytes() } else { x.to_le_bytes() });
                }
            }
        }
        out
    }
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    // GzEncoder writes mtime 0 and no file name, so output is deterministic
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    NiftiVolume::from_bytes(&bytes)
}

/// Writes `.nii`, or gzip-compressed when the path ends in `.gz`.
pub fn write_nifti(volume: &NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = volume.to_bytes();
    let bytes = if path.extension().is_some_and(|e| e == "gz") { gzip(&raw) } else { raw };
    write_atomic(path, &bytes)
}

pub fn read_volume_f32(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    Ok(read_nifti(path)?.to_volume_f32())
}

pub fn write_volume_f32(volume: &Volume<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(&NiftiVolume::from_volume_f32(volume)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_is_reported() {
        let v = NiftiVolume::new([2, 2, 2], VoxelData::U8(vec![1; 8])).unwrap();
        let mut b = v.to_bytes();
        b[344..348].copy_from_slice(b"xxx\0");
        assert!(matches!(NiftiVolume::from_bytes(&b), Err(Error::NiftiMagic(_))));
    }

    #[test]
    fn pair_files_are_rejected() {
        let v = NiftiVolume::new([2, 2, 2], VoxelData::U8(vec![1; 8])).unwrap();
        let mut b = v.to_bytes();
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(NiftiVolume::from_bytes(&b), Err(Error::NiftiMagic(_))));
    }

    #[test]
    fn unsupported_datatype_and_truncation() {
        let v = NiftiVolume::new([2, 2, 2], VoxelData::F32(vec![0.5; 8])).unwrap();
        let mut b = v.to_bytes();
        LittleEndian::write_i16(&mut b[offset::DATATYPE..], 512);
        assert!(matches!(NiftiVolume::from_bytes(&b), Err(Error::NiftiDatatype(512))));
        let b = v.to_bytes();
        assert!(matches!(NiftiVolume::from_bytes(&b[..b.len() - 1]), Err(Error::NiftiTruncated { .. })));
        assert!(matches!(NiftiVolume::from_bytes(&b[..100]), Err(Error::NiftiTruncated { .. })));
    }

    #[test]
    fn four_d_with_time_axis_is_rejected() {
        let v = NiftiVolume::new([2, 2, 2], VoxelData::U8(vec![1; 8])).unwrap();
        let mut b = v.to_bytes();
        LittleEndian::write_i16(&mut b[offset::DIM..], 4);
        LittleEndian::write_i16(&mut b[offset::DIM + 8..], 3);
        assert!(matches!(NiftiVolume::from_bytes(&b), Err(Error::NiftiDims(_))));
        // singleton fourth axis is fine
        LittleEndian::write_i16(&mut b[offset::DIM + 8..], 1);
        assert!(NiftiVolume::from_bytes(&b).is_ok());
    }

    #[test]
    fn big_endian_header_is_detected() {
        // hand-assemble a big-endian 1x1x2 int16 file
        let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
        BigEndian::write_i32(&mut h[0..], 348);
        for (i, d) in [3i16, 1, 1, 2, 1, 1, 1, 1].iter().enumerate() {
            BigEndian::write_i16(&mut h[offset::DIM + 2 * i..], *d);
        }
        BigEndian::write_i16(&mut h[offset::DATATYPE..], 4);
        BigEndian::write_i16(&mut h[offset::BITPIX..], 16);
        BigEndian::write_f32(&mut h[offset::VOX_OFFSET..], 352.0);
        h[344..348].copy_from_slice(MAGIC_SINGLE);
        h.extend_from_slice(&(-3i16).to_be_bytes());
        h.extend_from_slice(&(300i16).to_be_bytes());
        let v = NiftiVolume::from_bytes(&h).unwrap();
        assert!(v.is_big_endian());
        assert_eq!(v.values(), vec![-3.0, 300.0]);
        assert_eq!(v.to_bytes(), h);
    }
}

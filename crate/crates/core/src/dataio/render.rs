//! Slice montages: grayscale intensities with `1 - m` blended in as a warm overlay.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, RgbImage};

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const OVERLAY_COLOR: [f32; 3] = [255.0, 90.0, 0.0];

fn to_u8(x: f32) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

/// Slices perpendicular to `axis` laid out left to right. Intensities are mapped
/// from [0, 1]; values outside are clipped.
pub fn montage(volume: &Volume<f32>, mask: Option<&Volume<f32>>, axis: usize, slices: &[usize]) -> Result<RgbImage> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} not in 0..=2")));
    }
    if slices.is_empty() {
        return Err(Error::Empty("slice list"));
    }
    if let Some(m) = mask {
        if !m.same_shape(volume) {
            return Err(Error::dim("render", format!("mask {:?} vs volume {:?}", m.dims(), volume.dims())));
        }
    }
    let dims = volume.dims();
    let extent = dims[axis];
    if let Some(&bad) = slices.iter().find(|&&s| s >= extent) {
        return Err(Error::SliceOutOfRange { index: bad, extent });
    }
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rows, cols) = (dims[ra], dims[ca]);
    let mut img = RgbImage::new((cols * slices.len()) as u32, rows as u32);
    for (k, &s) in slices.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let mut p = [0usize; 3];
                p[axis] = s;
                p[ra] = r;
                p[ca] = c;
                let g = volume.get(p[0], p[1], p[2]).clamp(0.0, 1.0) * 255.0;
                let alpha = mask.map_or(0.0, |m| (1.0 - m.get(p[0], p[1], p[2])).clamp(0.0, 1.0));
                let px = OVERLAY_COLOR.map(|o| to_u8((1.0 - alpha) * g + alpha * o));
                img.put_pixel((k * cols + c) as u32, r as u32, image::Rgb(px));
            }
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    Ok(out)
}

pub fn render_slices(
    volume: &Volume<f32>,
    mask: Option<&Volume<f32>>,
    axis: usize,
    slices: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let png = encode_png(&montage(volume, mask, axis, slices)?)?;
    write_atomic(path.as_ref(), &png)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume<f32> {
        Volume::from_fn([4, 5, 6], |d, h, w| (d + h + w) as f32 / 12.0)
    }

    #[test]
    fn all_ones_mask_is_pure_grayscale() {
        let v = ramp();
        let ones = Volume::filled(v.dims(), 1.0f32);
        let img = montage(&v, Some(&ones), 0, &[1, 2]).unwrap();
        assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(img, montage(&v, None, 0, &[1, 2]).unwrap());
    }

    #[test]
    fn two_slices_double_the_width() {
        let v = ramp();
        let img = montage(&v, None, 1, &[0, 4]).unwrap();
        assert_eq!((img.width(), img.height()), (2 * 6, 4));
    }

    #[test]
    fn out_of_range_slice() {
        assert!(matches!(
            montage(&ramp(), None, 2, &[6]),
            Err(Error::SliceOutOfRange { index: 6, extent: 6 })
        ));
    }

    #[test]
    fn zero_mask_is_overlay_color() {
        let v = ramp();
        let zeros = Volume::filled(v.dims(), 0.0f32);
        let img = montage(&v, Some(&zeros), 0, &[0]).unwrap();
        assert!(img.pixels().all(|p| p.0 == [255, 90, 0]));
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let v = ramp();
        let m = v.map(|x| 1.0 - x * 0.5);
        let a = encode_png(&montage(&v, Some(&m), 0, &[0, 3]).unwrap()).unwrap();
        let b = encode_png(&montage(&v, Some(&m), 0, &[0, 3]).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

//! Independent oracles shared by the integration suites. Nothing in here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use neuromask::volgrad::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;

/// Central finite-difference gradient of a scalar function of a flat vector.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Normwise relative error `max|a - b| / max(max|b|, floor)`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Six-nested-loop direct summation. Accumulates taps in (ci, kd, kh, kw) order,
/// then adds the bias.
pub fn conv3d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, k) = (ws[0], ws[2]);
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * od * oh * ow);
    for bn in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let iz = (z * stride + kd) as isize - pad as isize;
                                        let iy = (y * stride + kh) as isize - pad as isize;
                                        let ix = (xx * stride + kw) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x.at(&[bn, ci, iz, iy, ix]) * w.at(&[co, ci, kd, kh, kw]);
                                    }
                                }
                            }
                        }
                        out.push(acc + b.at(&[co]));
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, od, oh, ow], out).unwrap()
}

/// Brute-force window maximum with floor semantics.
pub fn maxpool_direct(x: &Tensor<f64>, k: usize, s: usize) -> Tensor<f64> {
    let xs = x.shape();
    let od = (xs[2] - k) / s + 1;
    let oh = (xs[3] - k) / s + 1;
    let ow = (xs[4] - k) / s + 1;
    let mut out = Vec::new();
    for n in 0..xs[0] {
        for c in 0..xs[1] {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..k {
                            for b in 0..k {
                                for e in 0..k {
                                    m = m.max(x.at(&[n, c, z * s + a, y * s + b, xx * s + e]));
                                }
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
    }
    Tensor::new(vec![xs[0], xs[1], od, oh, ow], out).unwrap()
}

/// Bitwise CRC-32 (IEEE, reflected, poly 0xEDB88320).
pub fn crc32_bitwise(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let lsb = crc & 1;
            crc >>= 1;
            if lsb != 0 {
                crc ^= 0xEDB8_8320;
            }
        }
    }
    !crc
}

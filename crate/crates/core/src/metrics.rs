//! Image quality metrics. Images in `[-1, 1]` are mapped to `[0, 1]` first.
//!
//! SSIM uses the standard constants: 11x11 Gaussian window with σ = 1.5,
//! `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, valid window positions only,
//! averaged over channels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptual::Perceptual;
use crate::tensor::Tensor;

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            what: "metric inputs",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// PSNR in dB with peak 1. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 0.5;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// PSNR as a JSON value; infinity becomes the string `"inf"`.
pub fn psnr_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!("inf")
    }
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; 11]) -> Vec<f64> {
    let (oh, ow) = (h - 10, w - 10);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..11).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = a.chw();
    if h < 11 || w < 11 {
        return Err(Error::Config(format!("SSIM needs at least 11x11 images, got {h}x{w}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let unit = |v: f32| (v as f64 + 1.0) * 0.5;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.channel(ch).iter().map(|&v| unit(v)).collect();
        let y: Vec<f64> = b.channel(ch).iter().map(|&v| unit(v)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, h, w, &k), filter(&y, h, w, &k));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &k), filter(&yy, h, w, &k), filter(&xy, h, w, &k));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            acc += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistance {
    pub value: f64,
    /// Ridge added to the covariances when either was singular.
    pub ridge: f64,
}

pub const FD_RIDGE: f64 = 1e-6;

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let x = DVector::from_column_slice(f) - &mean;
        cov += &x * x.transpose();
    }
    (mean, cov / (n - 1.0))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = e.amax();
    e.min() <= 1e-12 * max.max(f64::MIN_POSITIVE)
}

/// Fréchet distance between Gaussian fits of pooled perceptual features.
/// This is a feature-space proxy, not FID.
pub fn feature_distance(set_a: &[Tensor<f32>], set_b: &[Tensor<f32>], extractor: &Perceptual<f32>) -> Result<FeatureDistance> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Config("feature distance needs at least 2 images per set".into()));
    }
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| extractor.pooled(i)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| extractor.pooled(i)).collect();
    Ok(frechet(&fa, &fb))
}

pub fn frechet(fa: &[Vec<f64>], fb: &[Vec<f64>]) -> FeatureDistance {
    let (ma, mut ca) = gaussian_fit(fa);
    let (mb, mut cb) = gaussian_fit(fb);
    let d = ma.len();
    let ridge = if is_singular(&ca) || is_singular(&cb) { FD_RIDGE } else { 0.0 };
    if ridge > 0.0 {
        ca += DMatrix::identity(d, d) * ridge;
        cb += DMatrix::identity(d, d) * ridge;
    }
    let sa = sqrt_psd(&ca);
    let inner = sqrt_psd(&(&sa * &cb * &sa));
    let value = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * inner.trace();
    FeatureDistance {
        value: value.max(0.0),
        ridge,
    }
}

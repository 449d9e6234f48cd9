//! Geometric transforms acting on images and on base codes.
//!
//! A transform is applied as scale, then rotation, then translation, all
//! about the centre of the grid. Coordinates are continuous with pixel `i`
//! covering `[i, i + 1)`. Rotation is counter-clockwise as displayed (the
//! y axis points down).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{FwPlusCode, GeneratorConfig, GeneratorWeights};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    #[default]
    Zero,
    Reflect,
    Circular,
}

/// Translation in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub dx: f64,
    pub dy: f64,
    pub rot_deg: f64,
    pub scale: f64,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub fill: Fill,
}

/// Same as [`GeometricTransform`] with translation in base-grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BaseTransform(pub GeometricTransform);

impl Default for GeometricTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            rot_deg: 0.0,
            scale: 1.0,
            resampling: Resampling::Bilinear,
            fill: Fill::Zero,
        }
    }

    pub fn translate(dx: f64, dy: f64) -> Self {
        Self { dx, dy, ..Self::identity() }
    }

    pub fn rotate(deg: f64) -> Self {
        Self {
            rot_deg: deg,
            ..Self::identity()
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self { scale: s, ..Self::identity() }
    }

    pub fn with_fill(mut self, fill: Fill) -> Self {
        self.fill = fill;
        self
    }

    pub fn with_resampling(mut self, r: Resampling) -> Self {
        self.resampling = r;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.rot_deg == 0.0 && self.scale == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.dx, self.dy, self.rot_deg, self.scale].iter().all(|v| v.is_finite());
        if !finite || self.scale <= 0.0 {
            return Err(Error::Config(format!("invalid transform {self:?}: scale must be > 0 and all fields finite")));
        }
        Ok(())
    }

    /// Apply to every channel of a `[C, H, W]` tensor.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        if self.is_identity() {
            return x.clone();
        }
        let (c, h, w) = x.chw();
        let (cos, sin) = cos_sin(self.rot_deg);
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let inv_s = 1.0 / self.scale;
        let mut out = Tensor::zeros(&[c, h, w]);
        for oy in 0..h {
            for ox in 0..w {
                // inverse map: undo translation, rotation, then scale
                let px = ox as f64 + 0.5 - cx - self.dx;
                let py = oy as f64 + 0.5 - cy - self.dy;
                let (rx, ry) = (cos * px - sin * py, sin * px + cos * py);
                let u = rx * inv_s + cx - 0.5;
                let v = ry * inv_s + cy - 0.5;
                let taps = self.taps(u, v, h, w);
                for ch in 0..c {
                    let src = x.channel(ch);
                    let mut acc = T::zero();
                    for &(idx, wt) in taps.iter().flatten() {
                        acc += src[idx] * lit(wt);
                    }
                    out.channel_mut(ch)[oy * w + ox] = acc;
                }
            }
        }
        out
    }

    /// Source taps `(flat index, weight)` for a sample at index coordinates
    /// `(u, v)`.
    fn taps(&self, u: f64, v: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
        let mut out = [None; 4];
        match self.resampling {
            Resampling::Nearest => {
                let (iy, ix) = (v.round() as i64, u.round() as i64);
                out[0] = self.index(iy, ix, h, w).map(|i| (i, 1.0));
            }
            Resampling::Bilinear => {
                let (y0, x0) = (v.floor(), u.floor());
                let (fy, fx) = (v - y0, u - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1, (1.0 - fy) * fx),
                    (y0 + 1, x0, fy * (1.0 - fx)),
                    (y0 + 1, x0 + 1, fy * fx),
                ];
                for (slot, (iy, ix, wt)) in out.iter_mut().zip(corners) {
                    if wt != 0.0 {
                        *slot = self.index(iy, ix, h, w).map(|i| (i, wt));
                    }
                }
            }
        }
        out
    }

    fn index(&self, iy: i64, ix: i64, h: usize, w: usize) -> Option<usize> {
        let y = resolve(iy, h, self.fill)?;
        let x = resolve(ix, w, self.fill)?;
        Some(y * w + x)
    }
}

/// Exact values for multiples of 90 degrees so quarter turns are lossless.
fn cos_sin(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

fn resolve(i: i64, n: usize, fill: Fill) -> Option<usize> {
    let n = n as i64;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match fill {
        Fill::Zero => None,
        Fill::Circular => Some(i.rem_euclid(n) as usize),
        Fill::Reflect => {
            // symmetric reflection: -1 -> 0, n -> n - 1
            let p = i.rem_euclid(2 * n);
            Some(if p < n { p } else { 2 * n - 1 - p } as usize)
        }
    }
}

impl BaseTransform {
    pub fn identity() -> Self {
        Self(GeometricTransform::identity())
    }

    pub fn apply<T: Real>(&self, f: &Tensor<T>) -> Tensor<T> {
        self.0.apply(f)
    }
}

/// Translation divided by the image-to-base stride; rotation and scale copied.
pub fn to_base_transform(t: &GeometricTransform, cfg: &GeneratorConfig) -> BaseTransform {
    let k = cfg.base_code_resolution as f64 / cfg.output_resolution as f64;
    BaseTransform(GeometricTransform {
        dx: t.dx * k,
        dy: t.dy * k,
        ..*t
    })
}

pub fn transform_base<T: Real>(f: &Tensor<T>, t: &BaseTransform) -> Tensor<T> {
    t.apply(f)
}

pub fn image_transform<T: Real>(img: &Tensor<T>, t: &GeometricTransform) -> Tensor<T> {
    t.apply(img)
}

/// `n` codes `(T'(f), w)` for sampled in-domain codes and sampled transforms.
pub fn sample_extended_domain<R: Rng>(
    n: usize,
    mut sampler: impl FnMut(&mut R) -> GeometricTransform,
    weights: &GeneratorWeights<f32>,
    rng: &mut R,
) -> Result<Vec<FwPlusCode<f32>>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = weights.sample_z(rng);
        let t = sampler(rng);
        t.validate()?;
        let (mut code, _) = weights.sample_fwplus(&z)?;
        code.f = transform_base(&code.f, &to_base_transform(&t, &weights.config));
        out.push(code);
    }
    Ok(out)
}

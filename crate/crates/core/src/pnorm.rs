//! Whitened coordinates for style vectors.
//!
//! `p = basisᵀ (inverse_leaky(w) - mean) / stddev`: the final activation of
//! the mapping network is undone, then the result is PCA-whitened. Detail
//! codes are clipped to a box in these coordinates, one layer at a time.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::generator::{inverse_leaky, leaky, GeneratorWeights};
use crate::tensor::Tensor;

pub const MIN_SAMPLES: usize = 10_000;
pub const DEFAULT_BOUND: f64 = 5.0;
pub const PNORM_KIND: &str = "pnorm_stats";

#[derive(Clone, Debug, PartialEq)]
pub struct PNormStats {
    pub mean: DVector<f64>,
    /// Columns are principal directions, sorted by decreasing variance.
    pub basis: DMatrix<f64>,
    pub stddev: DVector<f64>,
    pub n_samples: usize,
    pub slope: f64,
}

#[derive(Serialize, Deserialize)]
struct PNormMeta {
    n_samples: usize,
    slope: f64,
    bound_default: f64,
    generator_checksum: String,
}

/// Sample `n_samples` styles and fit mean and principal axes of their
/// pre-activation values.
pub fn estimate_stats(weights: &GeneratorWeights<f32>, n_samples: usize, seed: u64) -> Result<PNormStats> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::Config(format!("need at least {MIN_SAMPLES} samples, got {n_samples}")));
    }
    let d = weights.config.w_dim;
    let slope = weights.config.mapping_activation_slope;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DVector::<f64>::zeros(d);
    let mut outer = DMatrix::<f64>::zeros(d, d);
    let chunk = 1000;
    let mut done = 0;
    while done < n_samples {
        let m = chunk.min(n_samples - done);
        let z = Tensor::<f32>::randn(&[m, weights.config.z_dim], 1.0, &mut rng);
        let w = weights.map_latent_batch(&z)?;
        let p = DMatrix::from_row_iterator(m, d, w.data().iter().map(|&v| inverse_leaky(v as f64, slope)));
        sum += p.row_sum().transpose();
        outer += p.transpose() * &p;
        done += m;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let cov = (outer - &mean * mean.transpose() * n) / (n - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(d, d);
    let mut stddev = DVector::zeros(d);
    let tiny = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    for (k, &i) in order.iter().enumerate() {
        let ev = eig.eigenvalues[i];
        if !(ev > tiny) {
            return Err(Error::Degenerate(format!(
                "covariance eigenvalue {ev:e} at principal dimension {k} (of {d})"
            )));
        }
        basis.set_column(k, &eig.eigenvectors.column(i));
        stddev[k] = ev.sqrt();
    }
    Ok(PNormStats {
        mean,
        basis,
        stddev,
        n_samples,
        slope,
    })
}

impl PNormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_pnorm(&self, w: &Tensor<f32>) -> DVector<f64> {
        let x = DVector::from_iterator(self.dim(), w.data().iter().map(|&v| inverse_leaky(v as f64, self.slope)));
        let mut p = self.basis.tr_mul(&(x - &self.mean));
        p.component_div_assign(&self.stddev);
        p
    }

    pub fn from_pnorm(&self, p: &DVector<f64>) -> Tensor<f32> {
        let x = &self.basis * p.component_mul(&self.stddev) + &self.mean;
        Tensor::from_fn(&[self.dim()], |i| leaky(x[i], self.slope) as f32)
    }

    /// Clamp one style vector to the box. Vectors already inside are returned
    /// untouched; the second value counts clamped coordinates.
    pub fn clip(&self, w: &Tensor<f32>, bound: f64) -> (Tensor<f32>, usize) {
        let mut p = self.to_pnorm(w);
        let mut clipped = 0;
        for v in p.iter_mut() {
            if v.abs() > bound {
                *v = v.clamp(-bound, bound);
                clipped += 1;
            }
        }
        if clipped == 0 {
            (w.clone(), 0)
        } else {
            (self.from_pnorm(&p), clipped)
        }
    }

    fn archive_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let d = self.dim();
        let basis = Tensor::from_fn(&[d, d], |i| self.basis[(i / d, i % d)] as f32);
        vec![
            ("mean".to_string(), Tensor::from_fn(&[d], |i| self.mean[i] as f32)),
            ("basis".to_string(), basis),
            ("stddev".to_string(), Tensor::from_fn(&[d], |i| self.stddev[i] as f32)),
        ]
    }

    /// Checksum of the statistics as stored, i.e. at f32 precision.
    pub fn checksum(&self) -> String {
        checkpoint::checksum_of(&self.archive_tensors())
    }

    pub fn save(&self, dir: &Path, generator_checksum: &str) -> Result<checkpoint::Manifest> {
        let tensors = self.archive_tensors();
        let meta = PNormMeta {
            n_samples: self.n_samples,
            slope: self.slope,
            bound_default: DEFAULT_BOUND,
            generator_checksum: generator_checksum.to_string(),
        };
        checkpoint::write_archive(dir, PNORM_KIND, serde_json::to_value(meta)?, &tensors)
    }

    /// Load cached statistics; with `generator_checksum` set, statistics
    /// computed for another generator are rejected.
    pub fn load(dir: &Path, generator_checksum: Option<&str>) -> Result<Self> {
        let archive = checkpoint::read_archive(dir)?;
        let incompatible = |reason: String| Error::Incompatible {
            path: dir.to_path_buf(),
            reason,
        };
        if archive.manifest.kind != PNORM_KIND {
            return Err(incompatible(format!("archive kind is {}", archive.manifest.kind)));
        }
        let meta: PNormMeta =
            serde_json::from_value(archive.manifest.meta.clone()).map_err(|e| incompatible(e.to_string()))?;
        if let Some(sum) = generator_checksum {
            if sum != meta.generator_checksum {
                return Err(incompatible("statistics belong to a different generator".into()));
            }
        }
        let mean = archive.get("mean").ok_or_else(|| incompatible("missing mean".into()))?;
        let d = mean.len();
        let basis = archive.expect("basis", &[d, d], dir)?;
        let stddev = archive.expect("stddev", &[d], dir)?;
        Ok(Self {
            mean: DVector::from_iterator(d, mean.data().iter().map(|&v| v as f64)),
            basis: DMatrix::from_row_iterator(d, d, basis.data().iter().map(|&v| v as f64)),
            stddev: DVector::from_iterator(d, stddev.data().iter().map(|&v| v as f64)),
            n_samples: meta.n_samples,
            slope: meta.slope,
        })
    }
}

/// Clip every detail layer independently. Returns the clipped layers and the
/// total number of clamped coordinates.
pub fn clip_detail_code(w_detail: &[Tensor<f32>], stats: &PNormStats, bound: f64) -> (Vec<Tensor<f32>>, usize) {
    let mut total = 0;
    let out = w_detail
        .iter()
        .map(|w| {
            let (c, n) = stats.clip(w, bound);
            total += n;
            c
        })
        .collect();
    (out, total)
}

/// Largest whitened coordinate magnitude over all layers.
pub fn max_whitened(w_detail: &[Tensor<f32>], stats: &PNormStats) -> f64 {
    w_detail.iter().map(|w| stats.to_pnorm(w).amax()).fold(0.0, f64::max)
}

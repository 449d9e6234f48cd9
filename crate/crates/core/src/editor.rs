//! Editing of F/W+ codes. Edits only ever touch the detail code; the base
//! code is passed through untouched.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{FwPlusCode, GeneratorConfig, GeneratorWeights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DirectionSource {
    Sefa,
    #[default]
    File,
}

/// A unit vector in W applied to the 1-based style layers `lo..=hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub name: String,
    pub layer_lo: usize,
    pub layer_hi: usize,
    #[serde(rename = "vector")]
    pub v: Vec<f32>,
    #[serde(default)]
    pub source: DirectionSource,
    /// Eigenvalue for discovered directions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

/// Layer range check against `[M, N]`.
pub fn check_layer_range(lo: usize, hi: usize, cfg: &GeneratorConfig) -> Result<()> {
    let (m, n) = (cfg.detail_start(), cfg.num_styles());
    if lo < m || hi > n || lo > hi {
        return Err(Error::LayerRange { lo, hi, min: m, max: n });
    }
    Ok(())
}

impl EditDirection {
    pub fn norm(&self) -> f64 {
        self.v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn check(&self, cfg: &GeneratorConfig) -> Result<()> {
        if self.v.len() != cfg.w_dim {
            return Err(Error::Shape {
                what: "edit direction",
                expected: vec![cfg.w_dim],
                got: vec![self.v.len()],
            });
        }
        check_layer_range(self.layer_lo, self.layer_hi, cfg)
    }
}

/// `w_i += alpha * v` for every layer in the direction's range.
pub fn apply_edit(code: &FwPlusCode<f32>, d: &EditDirection, alpha: f64, cfg: &GeneratorConfig) -> Result<FwPlusCode<f32>> {
    code.check(cfg)?;
    d.check(cfg)?;
    let mut out = code.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let m = cfg.detail_start();
    let a = alpha as f32;
    for i in d.layer_lo..=d.layer_hi {
        let w = &mut out.w_detail[i - m];
        for (x, &v) in w.data_mut().iter_mut().zip(&d.v) {
            *x += a * v;
        }
    }
    Ok(out)
}

/// Replace the detail layers `range` (1-based, inclusive; empty if
/// `lo > hi`) with the reference's.
pub fn style_mix(
    code: &FwPlusCode<f32>,
    reference: &FwPlusCode<f32>,
    range: std::ops::RangeInclusive<usize>,
    cfg: &GeneratorConfig,
) -> Result<FwPlusCode<f32>> {
    code.check(cfg)?;
    reference.check(cfg)?;
    let mut out = code.clone();
    if range.is_empty() {
        return Ok(out);
    }
    let (lo, hi) = (*range.start(), *range.end());
    check_layer_range(lo, hi, cfg)?;
    let m = cfg.detail_start();
    for i in lo..=hi {
        out.w_detail[i - m] = reference.w_detail[i - m].clone();
    }
    Ok(out)
}

/// Full detail range `M..=N`.
pub fn detail_range(cfg: &GeneratorConfig) -> std::ops::RangeInclusive<usize> {
    cfg.detail_start()..=cfg.num_styles()
}

/// Top-`k` eigenvectors of `AᵀA`, where `A` stacks the style-affine matrices
/// of layers `lo..=hi`. Directions are named `sefa_<lo>_<hi>_<rank>`.
pub fn sefa_directions(gen: &GeneratorWeights<f32>, lo: usize, hi: usize, k: usize) -> Result<Vec<EditDirection>> {
    let cfg = &gen.config;
    let d = cfg.w_dim;
    if k > d {
        return Err(Error::Config(format!("requested {k} directions but w_dim is {d}")));
    }
    if lo == 0 || lo > hi || hi > cfg.num_styles() {
        return Err(Error::LayerRange {
            lo,
            hi,
            min: 1,
            max: cfg.num_styles(),
        });
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for i in lo..=hi {
        let a = gen.style_affine(i);
        let m = DMatrix::from_row_iterator(a.dim(0), d, a.data().iter().map(|&v| v as f64));
        gram += m.transpose() * m;
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, i)| {
            let col = eig.eigenvectors.column(i);
            // fix the sign so results do not depend on the solver
            let sign = if col.iter().fold(0.0, |acc: f64, &v| if v.abs() > acc.abs() { v } else { acc }) < 0.0 {
                -1.0
            } else {
                1.0
            };
            EditDirection {
                name: format!("sefa_{lo}_{hi}_{rank}"),
                layer_lo: lo,
                layer_hi: hi,
                v: col.iter().map(|&v| (v * sign) as f32).collect(),
                source: DirectionSource::Sefa,
                strength: Some(eig.eigenvalues[i]),
            }
        })
        .collect())
}

pub const NORM_DRIFT_WARN: f64 = 1e-3;

#[derive(Deserialize)]
#[serde(untagged)]
enum DirectionFile {
    Many(Vec<EditDirection>),
    One(EditDirection),
}

/// Parse a direction file (a JSON array, or a single object). Vectors are
/// renormalized; drifts above [`NORM_DRIFT_WARN`] are reported as warnings.
pub fn parse_directions(bytes: &[u8], path: &Path) -> Result<(Vec<EditDirection>, Vec<String>)> {
    let parsed: DirectionFile = serde_json::from_slice(bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut dirs = match parsed {
        DirectionFile::Many(v) => v,
        DirectionFile::One(d) => vec![d],
    };
    let mut warnings = Vec::new();
    for d in &mut dirs {
        let n = d.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("direction {} has zero or non-finite norm", d.name),
            });
        }
        if (n - 1.0).abs() > NORM_DRIFT_WARN {
            warnings.push(format!("direction {} had norm {n:.6}; renormalized", d.name));
            d.v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
    Ok((dirs, warnings))
}

pub fn load_directions(path: &Path) -> Result<Vec<EditDirection>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dirs, warnings) = parse_directions(&bytes, path)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(dirs)
}

pub fn save_directions(dirs: &[EditDirection], path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(dirs)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Vector as a tensor, for callers doing their own arithmetic.
pub fn direction_tensor(d: &EditDirection) -> Tensor<f32> {
    Tensor::new(&[d.v.len()], d.v.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorMode;

    fn small() -> GeneratorWeights<f32> {
        let mut cfg = GeneratorConfig::desk(GeneratorMode::StyleGan2);
        cfg.channels_per_scale = vec![8, 8, 8, 8, 4];
        cfg.w_dim = 16;
        cfg.z_dim = 16;
        GeneratorWeights::random(cfg, 3).unwrap()
    }

    fn code(g: &GeneratorWeights<f32>, seed: u64) -> FwPlusCode<f32> {
        use rand::SeedableRng;
        let z = g.sample_z(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        g.sample_fwplus(&z).unwrap().0
    }

    fn unit(d: usize, i: usize) -> Vec<f32> {
        (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn edits_touch_only_the_range() {
        let g = small();
        let cfg = &g.config;
        let c = code(&g, 1);
        let m = cfg.detail_start();
        let d = EditDirection {
            name: "x".into(),
            layer_lo: m + 1,
            layer_hi: m + 2,
            v: unit(cfg.w_dim, 2),
            source: DirectionSource::File,
            strength: None,
        };
        assert_eq!(apply_edit(&c, &d, 0.0, cfg).unwrap(), c);
        let e = apply_edit(&c, &d, 2.0, cfg).unwrap();
        assert_eq!(e.f, c.f);
        assert_eq!(e.w_detail[0], c.w_detail[0]);
        assert_eq!(e.w_detail[3], c.w_detail[3]);
        assert_eq!(e.w_detail[1].data()[2], c.w_detail[1].data()[2] + 2.0);
        let back = apply_edit(&e, &d, -2.0, cfg).unwrap();
        assert!(back.w_detail.iter().zip(&c.w_detail).all(|(a, b)| a.max_abs_diff(b) < 1e-6));
    }

    #[test]
    fn coarse_layers_are_rejected() {
        let g = small();
        let cfg = &g.config;
        let d = EditDirection {
            name: "pose".into(),
            layer_lo: 1,
            layer_hi: cfg.detail_start(),
            v: unit(cfg.w_dim, 0),
            source: DirectionSource::File,
            strength: None,
        };
        assert!(matches!(apply_edit(&code(&g, 2), &d, 1.0, cfg), Err(Error::LayerRange { .. })));
    }

    #[test]
    fn style_mix_cases() {
        let g = small();
        let cfg = &g.config;
        let (a, b) = (code(&g, 3), code(&g, 4));
        assert_eq!(style_mix(&a, &a, detail_range(cfg), cfg).unwrap(), a);
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert_eq!(style_mix(&a, &b, empty, cfg).unwrap(), a);
        let mixed = style_mix(&a, &b, detail_range(cfg), cfg).unwrap();
        assert_eq!(mixed.f, a.f);
        assert_eq!(mixed.w_detail, b.w_detail);
    }

    #[test]
    fn sefa_is_orthonormal_and_sorted() {
        let g = small();
        let cfg = &g.config;
        let dirs = sefa_directions(&g, cfg.detail_start(), cfg.num_styles(), 5).unwrap();
        assert_eq!(dirs.len(), 5);
        for (i, a) in dirs.iter().enumerate() {
            assert!((a.norm() - 1.0).abs() < 1e-5);
            for b in &dirs[i + 1..] {
                let dot: f64 = a.v.iter().zip(&b.v).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
                assert!(dot.abs() < 1e-4);
            }
        }
        assert!(dirs.windows(2).all(|p| p[0].strength >= p[1].strength));
        assert!(sefa_directions(&g, 1, 2, cfg.w_dim + 1).is_err());
    }

    #[test]
    fn direction_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        save_directions(&[], &p).unwrap();
        assert!(load_directions(&p).unwrap().is_empty());
        let g = small();
        let dirs = sefa_directions(&g, 5, 8, 2).unwrap();
        save_directions(&dirs, &p).unwrap();
        assert_eq!(load_directions(&p).unwrap(), dirs);

        let raw = br#"{"name": "smile", "layer_lo": 6, "layer_hi": 9, "vector": [3.0, 4.0]}"#;
        let (d, warn) = parse_directions(raw, &p).unwrap();
        assert_eq!(d[0].v, vec![0.6, 0.8]);
        assert_eq!(warn.len(), 1);
        assert!(parse_directions(b"{\"name\": 1}", &p).is_err());
    }
}

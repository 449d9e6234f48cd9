//! Regularized inversion into F/W+.
//!
//! Minimizes `L_mse + ω_per L_per + ω_f |f - f°|²` over the base code `f`
//! and detail code `w_{M+}` with Adam. After every update the detail code is
//! clipped to the whitened box; Adam moments are kept across clips. All
//! squared errors are means rather than sums.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::encoder::{downsample_for_encoder, EncoderWeights};
use crate::error::{Error, Result};
use crate::generator::{FwPlusCode, GeneratorWeights, Image, NoiseMode};
use crate::metrics;
use crate::optim::{Adam, AdamConfig};
use crate::perceptual::{self, Perceptual};
use crate::pnorm::{self, PNormStats};
use crate::tensor::{Real, Tensor};

pub const RESULT_KIND: &str = "inversion_result";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitDetail {
    /// `f°` from the encoder, detail code from `w_mean`.
    #[default]
    WMean,
    /// No encoder: `f°` is the mean base code, detail code from `w_mean`.
    EncoderFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoisePolicy {
    #[default]
    #[serde(rename = "fixed-zero")]
    FixedZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr: f64,
    pub omega_per: f64,
    pub omega_f: f64,
    pub clip_bound: f64,
    pub adam: AdamConfig,
    pub perceptual_resolution: usize,
    pub seed: u64,
    pub init_detail: InitDetail,
    /// Keep `f` at its initial value and optimize the detail code only.
    pub freeze_base: bool,
    pub noise_policy: NoisePolicy,
    /// Always `"mean"`; recorded so archived results state their convention.
    pub loss_normalization: String,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 1200,
            lr: 0.01,
            omega_per: 10.0,
            omega_f: 10.0,
            clip_bound: pnorm::DEFAULT_BOUND,
            adam: AdamConfig::default(),
            perceptual_resolution: 256,
            seed: 0,
            init_detail: InitDetail::WMean,
            freeze_base: false,
            noise_policy: NoisePolicy::FixedZero,
            loss_normalization: "mean".into(),
        }
    }
}

impl InversionConfig {
    /// 3,000 iterations, for scene-like datasets.
    pub fn long() -> Self {
        Self {
            iterations: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("omega_per", self.omega_per), ("omega_f", self.omega_f)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.clip_bound > 0.0) {
            return Err(Error::Config("clip_bound must be positive".into()));
        }
        if self.loss_normalization != "mean" {
            return Err(Error::Config("only mean loss normalization is supported".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub mse: f64,
    pub per: f64,
    pub f: f64,
    pub total: f64,
    /// Largest whitened detail coordinate after the step's clip.
    pub max_whitened: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
}

pub(crate) mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            N(f64),
            S(String),
        }
        match V::deserialize(d)? {
            V::N(v) => Ok(v),
            V::S(s) if s == "inf" => Ok(f64::INFINITY),
            V::S(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub code: FwPlusCode<f32>,
    pub f_anchor: Tensor<f32>,
    pub loss_trace: Vec<LossRecord>,
    pub final_metrics: FinalMetrics,
    pub config: InversionConfig,
}

/// Snapshot passed to progress observers after each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: usize,
    pub total: usize,
    pub current_loss: f64,
}

/// Everything the inverter reads; shared read-only between jobs.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub generator: &'a GeneratorWeights<f32>,
    pub encoder: Option<&'a EncoderWeights<f32>>,
    pub stats: &'a PNormStats,
    pub perceptual: &'a Perceptual<f32>,
    /// Base code used by [`InitDetail::EncoderFree`].
    pub mean_base: Option<&'a Tensor<f32>>,
}

/// Average base code over `n` sampled latents.
pub fn mean_base_code(gen: &GeneratorWeights<f32>, n: usize, seed: u64) -> Result<Tensor<f32>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = gen.config.base_code_shape();
    let mut acc = Tensor::<f32>::zeros(&shape);
    for _ in 0..n {
        let w = gen.map_latent(&gen.sample_z(&mut rng))?;
        let f = gen.extract_base(&vec![w; gen.config.num_styles()], NoiseMode::None)?;
        acc.axpy(1.0 / n as f32, &f);
    }
    Ok(acc)
}

/// `L_mse` between `G(code)` and `target` (mean over pixels).
pub fn mse_loss<T: Real>(gen: &GeneratorWeights<T>, code: &FwPlusCode<T>, target: &Image<T>) -> Result<f64> {
    let out = gen.synthesize_from_base(code, NoiseMode::None)?;
    check_target(&out, target)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(out), g.constant(target.clone()));
    let l = g.mse(a, b);
    Ok(g.value(l).item().to_f64c())
}

pub fn perceptual_loss<T: Real>(
    gen: &GeneratorWeights<T>,
    per: &Perceptual<T>,
    code: &FwPlusCode<T>,
    target: &Image<T>,
    resolution: usize,
) -> Result<f64> {
    let out = gen.synthesize_from_base(code, NoiseMode::None)?;
    check_target(&out, target)?;
    let a = perceptual::downsample_tensor(&out, resolution);
    let b = perceptual::downsample_tensor(target, resolution);
    Ok(per.distance(&a, &b))
}

/// `L_f`: mean squared difference between base code and anchor.
pub fn base_reg_loss<T: Real>(f: &Tensor<T>, f_anchor: &Tensor<T>) -> Result<f64> {
    if f.shape() != f_anchor.shape() {
        return Err(Error::Shape {
            what: "base code anchor",
            expected: f.shape().to_vec(),
            got: f_anchor.shape().to_vec(),
        });
    }
    let s: f64 = f
        .data()
        .iter()
        .zip(f_anchor.data())
        .map(|(a, b)| (a.to_f64c() - b.to_f64c()).powi(2))
        .sum();
    Ok(s / f.len() as f64)
}

fn check_target<T: Real>(out: &Image<T>, target: &Image<T>) -> Result<()> {
    if out.shape() != target.shape() {
        return Err(Error::Shape {
            what: "inversion target",
            expected: out.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// The three loss terms and their weighted sum on a graph. Returns
/// `(mse, per, f, total)` nodes.
pub struct Objective<'a, T: Real> {
    pub generator: &'a GeneratorWeights<T>,
    pub perceptual: &'a Perceptual<T>,
    pub target: &'a Image<T>,
    /// Perceptual features of the (downsampled) target.
    pub target_features: Vec<Tensor<T>>,
    pub f_anchor: &'a Tensor<T>,
    pub omega_per: f64,
    pub omega_f: f64,
    pub perceptual_resolution: usize,
}

pub struct ObjectiveNodes {
    pub image: Var,
    pub mse: Var,
    pub per: Var,
    pub f: Var,
    pub total: Var,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(
        generator: &'a GeneratorWeights<T>,
        perceptual: &'a Perceptual<T>,
        target: &'a Image<T>,
        f_anchor: &'a Tensor<T>,
        cfg: &InversionConfig,
    ) -> Self {
        let target_features = perceptual.features_const(&perceptual::downsample_tensor(target, cfg.perceptual_resolution));
        Self {
            generator,
            perceptual,
            target,
            target_features,
            f_anchor,
            omega_per: cfg.omega_per,
            omega_f: cfg.omega_f,
            perceptual_resolution: cfg.perceptual_resolution,
        }
    }

    pub fn build(&self, g: &mut Graph<T>, f: Var, w: &[Var]) -> ObjectiveNodes {
        let image = self.generator.synthesize_from_base_graph(g, f, w, NoiseMode::None);
        let t = g.constant(self.target.clone());
        let mse = g.mse(image, t);
        let small = perceptual::downsample_to(g, image, self.perceptual_resolution);
        let per = self.perceptual.distance_to(g, small, &self.target_features);
        let anchor = g.constant(self.f_anchor.clone());
        let lf = g.mse(f, anchor);
        let a = g.scale(per, self.omega_per);
        let b = g.scale(lf, self.omega_f);
        let total = g.add(mse, a);
        let total = g.add(total, b);
        ObjectiveNodes {
            image,
            mse,
            per,
            f: lf,
            total,
        }
    }

    pub fn evaluate(&self, code: &FwPlusCode<T>) -> LossRecord {
        let mut g = Graph::new();
        let f = g.constant(code.f.clone());
        let w: Vec<Var> = code.w_detail.iter().map(|w| g.constant(w.clone())).collect();
        let n = self.build(&mut g, f, &w);
        let v = |x: Var| g.value(x).item().to_f64c();
        LossRecord {
            mse: v(n.mse),
            per: v(n.per),
            f: v(n.f),
            total: v(n.total),
            max_whitened: f64::NAN,
        }
    }
}

/// `L_mse + ω_per L_per + ω_f L_f` for a fixed code.
pub fn total_objective(
    gen: &GeneratorWeights<f32>,
    per: &Perceptual<f32>,
    code: &FwPlusCode<f32>,
    target: &Image<f32>,
    f_anchor: &Tensor<f32>,
    cfg: &InversionConfig,
) -> Result<f64> {
    code.check(&gen.config)?;
    check_target(&gen.synthesize_from_base(code, NoiseMode::None)?, target)?;
    base_reg_loss(&code.f, f_anchor)?;
    Ok(Objective::new(gen, per, target, f_anchor, cfg).evaluate(code).total)
}

/// Starting anchor `f°` for a target.
pub fn initial_anchor(target: &Image<f32>, models: &Models<'_>, cfg: &InversionConfig) -> Result<Tensor<f32>> {
    let gcfg = &models.generator.config;
    match cfg.init_detail {
        InitDetail::WMean => {
            let enc = models
                .encoder
                .ok_or_else(|| Error::Missing("encoder checkpoint (required unless init_detail = encoder_free)".into()))?;
            enc.config.check_generator(gcfg)?;
            enc.encode(&downsample_for_encoder(target, &enc.config))
        }
        InitDetail::EncoderFree => {
            let m = models
                .mean_base
                .ok_or_else(|| Error::Missing("mean base code for encoder-free initialization".into()))?;
            if m.shape() != gcfg.base_code_shape() {
                return Err(Error::Shape {
                    what: "mean base code",
                    expected: gcfg.base_code_shape().to_vec(),
                    got: m.shape().to_vec(),
                });
            }
            Ok(m.clone())
        }
    }
}

pub fn invert(target: &Image<f32>, models: &Models<'_>, cfg: &InversionConfig) -> Result<InversionResult> {
    invert_with_progress(target, models, cfg, |_| {})
}

pub fn invert_with_progress(
    target: &Image<f32>,
    models: &Models<'_>,
    cfg: &InversionConfig,
    mut observe: impl FnMut(&Progress),
) -> Result<InversionResult> {
    cfg.validate()?;
    let gen = models.generator;
    let gcfg = &gen.config;
    let r = gcfg.output_resolution;
    if target.shape() != [3, r, r] {
        return Err(Error::Shape {
            what: "inversion target",
            expected: vec![3, r, r],
            got: target.shape().to_vec(),
        });
    }
    if !target.all_finite() {
        return Err(Error::NonFinite {
            what: "target image".into(),
            step: 0,
        });
    }
    if models.stats.dim() != gcfg.w_dim {
        return Err(Error::Config("P-norm statistics do not match the generator's w_dim".into()));
    }

    let f_anchor = initial_anchor(target, models, cfg)?;
    let mut f = f_anchor.clone();
    let (mut w, _) = pnorm::clip_detail_code(&vec![gen.w_mean.clone(); gcfg.detail_len()], models.stats, cfg.clip_bound);
    let objective = Objective::new(gen, models.perceptual, target, &f_anchor, cfg);
    let mut adam = Adam::new(cfg.adam, std::iter::once(f.len()).chain(w.iter().map(Tensor::len)));
    let mut trace = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let mut g = Graph::new();
        let fv = if cfg.freeze_base { g.constant(f.clone()) } else { g.param(f.clone()) };
        let wv: Vec<Var> = w.iter().map(|t| g.param(t.clone())).collect();
        let nodes = objective.build(&mut g, fv, &wv);
        let val = |x: Var| g.value(x).item() as f64;
        let mut rec = LossRecord {
            mse: val(nodes.mse),
            per: val(nodes.per),
            f: val(nodes.f),
            total: val(nodes.total),
            max_whitened: 0.0,
        };
        if !rec.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "inversion objective (mse {}, per {}, f {}; last finite total {:?})",
                    rec.mse,
                    rec.per,
                    rec.f,
                    trace.last().map(|r: &LossRecord| r.total)
                ),
                step,
            });
        }
        let grads = g.backward(nodes.total);
        let gf = (!cfg.freeze_base).then(|| grads.get(fv)).flatten();
        let mut grad_refs = vec![gf];
        grad_refs.extend(wv.iter().map(|&v| grads.get(v)));
        {
            let mut params: Vec<&mut Tensor<f32>> = std::iter::once(&mut f).chain(w.iter_mut()).collect();
            adam.step(cfg.lr, &mut params, &grad_refs);
        }
        w = pnorm::clip_detail_code(&w, models.stats, cfg.clip_bound).0;
        rec.max_whitened = pnorm::max_whitened(&w, models.stats);
        debug_assert!(rec.max_whitened <= cfg.clip_bound + 1e-5, "clip box violated: {}", rec.max_whitened);
        trace.push(rec);
        observe(&Progress {
            iteration: step + 1,
            total: cfg.iterations,
            current_loss: rec.total,
        });
    }

    let code = FwPlusCode { f, w_detail: w };
    let recon = gen.synthesize_from_base(&code, NoiseMode::None)?;
    if !recon.all_finite() {
        return Err(Error::NonFinite {
            what: "reconstruction".into(),
            step: cfg.iterations,
        });
    }
    let final_metrics = FinalMetrics {
        psnr: metrics::psnr(&recon, target)?,
        ssim: metrics::ssim(&recon, target)?,
    };
    Ok(InversionResult {
        code,
        f_anchor,
        loss_trace: trace,
        final_metrics,
        config: cfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub first: LossRecord,
    pub last: LossRecord,
    pub best_total: f64,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct ResultMeta {
    config: InversionConfig,
    seed: u64,
    generator_checksum: String,
    loss_summary: Option<TraceSummary>,
    metrics: FinalMetrics,
    detail_start: usize,
}

impl InversionResult {
    pub fn summary(&self) -> Option<TraceSummary> {
        let first = *self.loss_trace.first()?;
        let last = *self.loss_trace.last()?;
        Some(TraceSummary {
            first,
            last,
            best_total: self.loss_trace.iter().map(|r| r.total).fold(f64::INFINITY, f64::min),
            iterations: self.loss_trace.len(),
        })
    }

    /// Archive with tensors `f`, `f_anchor`, `w_detail.{i}`. The full loss
    /// trace goes to `trace.json` beside the manifest.
    pub fn save(&self, dir: &Path, generator: &GeneratorWeights<f32>) -> Result<checkpoint::Manifest> {
        let mut tensors = vec![("f".to_string(), self.code.f.clone()), ("f_anchor".to_string(), self.f_anchor.clone())];
        for (i, w) in self.code.w_detail.iter().enumerate() {
            tensors.push((format!("w_detail.{i}"), w.clone()));
        }
        let meta = ResultMeta {
            config: self.config.clone(),
            seed: self.config.seed,
            generator_checksum: generator.checksum(),
            loss_summary: self.summary(),
            metrics: self.final_metrics,
            detail_start: generator.config.detail_start(),
        };
        let m = checkpoint::write_archive(dir, RESULT_KIND, serde_json::to_value(meta)?, &tensors)?;
        let trace_path = dir.join("trace.json");
        std::fs::write(&trace_path, serde_json::to_vec(&self.loss_trace)?).map_err(|e| Error::io(&trace_path, e))?;
        Ok(m)
    }

    /// Load a stored result. The code is checked against `generator`.
    pub fn load(dir: &Path, generator: &GeneratorWeights<f32>) -> Result<Self> {
        let archive = checkpoint::read_archive(dir)?;
        let incompatible = |reason: String| Error::Incompatible {
            path: dir.to_path_buf(),
            reason,
        };
        if archive.manifest.kind != RESULT_KIND {
            return Err(incompatible(format!("archive kind is {}", archive.manifest.kind)));
        }
        let meta: ResultMeta =
            serde_json::from_value(archive.manifest.meta.clone()).map_err(|e| incompatible(e.to_string()))?;
        let cfg = &generator.config;
        let f = archive.expect("f", &cfg.base_code_shape(), dir)?;
        let f_anchor = archive.expect("f_anchor", &cfg.base_code_shape(), dir)?;
        let w_detail = (0..cfg.detail_len())
            .map(|i| archive.expect(&format!("w_detail.{i}"), &[cfg.w_dim], dir))
            .collect::<Result<Vec<_>>>()?;
        if archive.get(&format!("w_detail.{}", cfg.detail_len())).is_some() || meta.detail_start != cfg.detail_start() {
            return Err(incompatible("detail code length differs from the generator".into()));
        }
        let trace_path = dir.join("trace.json");
        let loss_trace = match std::fs::read(&trace_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
                path: trace_path.clone(),
                reason: e.to_string(),
            })?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            code: FwPlusCode { f, w_detail },
            f_anchor,
            loss_trace,
            final_metrics: meta.metrics,
            config: meta.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = InversionConfig::default();
        assert_eq!((c.iterations, c.lr, c.omega_per, c.omega_f, c.clip_bound), (1200, 0.01, 10.0, 10.0, 5.0));
        assert_eq!(InversionConfig::long().iterations, 3000);
        c.validate().unwrap();
        let bad = InversionConfig {
            omega_f: -1.0,
            ..c.clone()
        };
        assert!(bad.validate().is_err());
        let bad = InversionConfig { iterations: 0, ..c.clone() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["noise_policy"], "fixed-zero");
        assert_eq!(json["init_detail"], "w_mean");
        let partial: InversionConfig = serde_json::from_str(r#"{"iterations": 100}"#).unwrap();
        assert_eq!(partial.iterations, 100);
        assert_eq!(partial.lr, 0.01);
    }

    #[test]
    fn base_reg_values() {
        let a = Tensor::<f32>::zeros(&[2, 4, 4]);
        assert_eq!(base_reg_loss(&a, &a).unwrap(), 0.0);
        // mean normalization: +1 everywhere gives 1, not the element count
        assert_eq!(base_reg_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        assert!(base_reg_loss(&a, &Tensor::zeros(&[2, 4, 3])).is_err());
    }

    #[test]
    fn psnr_serializes_infinity() {
        let m = FinalMetrics {
            psnr: f64::INFINITY,
            ssim: 1.0,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"psnr":"inf","ssim":1.0}"#);
        let back: FinalMetrics = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}

//! Fully convolutional encoder predicting a base code from a downsampled
//! image. Blocks are `conv3x3 -> pixel norm -> leaky ReLU`, stages are
//! separated by 2x2 average pooling, and the last block is a linear
//! projection to the generator's base-code channels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorWeights, Image, NoiseMode};
use crate::latent::GeometricTransform;
use crate::optim::{Adam, AdamConfig};
use crate::perceptual::{self, Perceptual};
use crate::tensor::{self, Padding, Real, Tensor};

const SLOPE: f64 = 0.2;
const PN_EPS: f64 = 1e-8;
pub const ENCODER_KIND: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    pub base_code_resolution: usize,
    pub conv_blocks: usize,
    pub pool_layers: usize,
    /// Width of each stage (`pool_layers + 1` entries).
    pub channels: Vec<usize>,
    pub out_channels: usize,
}

impl EncoderConfig {
    /// Input at 8x the base-code size, capped at the generator output.
    pub fn for_generator(cfg: &GeneratorConfig) -> Self {
        let input = (8 * cfg.base_code_resolution).min(cfg.output_resolution);
        let pool_layers = (input / cfg.base_code_resolution).trailing_zeros() as usize;
        let widths = [16, 32, 48, 64];
        let channels = (0..=pool_layers).map(|i| widths[i.min(widths.len() - 1)]).collect();
        Self {
            input_resolution: input,
            base_code_resolution: cfg.base_code_resolution,
            conv_blocks: 11,
            pool_layers,
            channels,
            out_channels: cfg.base_code_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_code_resolution << self.pool_layers != self.input_resolution {
            return Err(Error::Config(format!(
                "2^{} x {} != input resolution {}",
                self.pool_layers, self.base_code_resolution, self.input_resolution
            )));
        }
        if self.channels.len() != self.pool_layers + 1 {
            return Err(Error::Config("need one channel width per stage".into()));
        }
        if self.conv_blocks < 2 * (self.pool_layers + 1) {
            return Err(Error::Config("too few blocks for the number of stages".into()));
        }
        Ok(())
    }

    /// Blocks per stage; coarser stages get the remainder.
    pub fn blocks_per_stage(&self) -> Vec<usize> {
        let stages = self.pool_layers + 1;
        let base = self.conv_blocks / stages;
        let extra = self.conv_blocks % stages;
        (0..stages).map(|s| base + usize::from(s >= stages - extra)).collect()
    }

    pub fn check_generator(&self, cfg: &GeneratorConfig) -> Result<()> {
        if self.base_code_resolution != cfg.base_code_resolution || self.out_channels != cfg.base_code_channels() {
            return Err(Error::Config(format!(
                "encoder predicts {}x{}x{} codes, generator expects {:?}",
                self.out_channels,
                self.base_code_resolution,
                self.base_code_resolution,
                cfg.base_code_shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Real = f32> {
    pub config: EncoderConfig,
    /// `(weight [Cout, Cin, 3, 3], bias [Cout])` per block.
    pub blocks: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Block `i` of the layout: `(cin, cout, pool_before, is_last)`.
fn layout(cfg: &EncoderConfig) -> Vec<(usize, usize, bool, bool)> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (s, &n) in cfg.blocks_per_stage().iter().enumerate() {
        for j in 0..n {
            let last = out.len() + 1 == cfg.conv_blocks;
            let cout = if last { cfg.out_channels } else { cfg.channels[s] };
            out.push((cin, cout, s > 0 && j == 0, last));
            cin = cout;
        }
    }
    out
}

impl EncoderWeights<f32> {
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layout(&config)
            .into_iter()
            .map(|(cin, cout, _, last)| {
                let gain = if last { 1.0 } else { 2.0 };
                let std = (gain / (cin * 9) as f64).sqrt();
                (Tensor::randn(&[cout, cin, 3, 3], std, &mut rng), Tensor::zeros(&[cout]))
            })
            .collect();
        Ok(Self { config, blocks })
    }
}

impl<T: Real> EncoderWeights<T> {
    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            config: self.config.clone(),
            blocks: self.blocks.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.input_resolution;
        if shape != [3, r, r] {
            return Err(Error::Shape {
                what: "encoder input",
                expected: vec![3, r, r],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass with caller-provided block variables.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, vars: &[(Var, Var)]) -> Var {
        let mut x = x;
        for ((_, _, pool, last), &(w, b)) in layout(&self.config).into_iter().zip(vars) {
            if pool {
                x = g.avg_pool(x, 2);
            }
            let y = g.conv2d(x, w, Padding::Zero);
            let y = g.add_channels(y, b);
            x = if last {
                y
            } else {
                let y = g.channel_normalize(y, PN_EPS, true);
                g.leaky_relu(y, SLOPE)
            };
        }
        x
    }

    fn vars(&self, g: &mut Graph<T>, trainable: bool) -> Vec<(Var, Var)> {
        self.blocks
            .iter()
            .map(|(w, b)| {
                if trainable {
                    (g.param(w.clone()), g.param(b.clone()))
                } else {
                    (g.constant(w.clone()), g.constant(b.clone()))
                }
            })
            .collect()
    }

    /// `f° = E(i_down)`; the input must already be at `input_resolution`.
    pub fn encode(&self, i_down: &Image<T>) -> Result<Tensor<T>> {
        self.check_input(i_down.shape())?;
        let mut g = Graph::new();
        let vars = self.vars(&mut g, false);
        let x = g.constant(i_down.clone());
        let f = self.forward_graph(&mut g, x, &vars);
        Ok(g.value(f).clone())
    }
}

/// Area-average an image down to the encoder input size.
pub fn downsample_for_encoder<T: Real>(img: &Image<T>, cfg: &EncoderConfig) -> Image<T> {
    let (_, h, _) = img.chw();
    if h <= cfg.input_resolution {
        return img.clone();
    }
    tensor::avg_pool(img, h / cfg.input_resolution)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub lambda_per: f64,
    pub perceptual_resolution: usize,
    /// Weight of a direct `|E(I) - f_gt|²` term. Zero in normal training.
    pub f_match_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 10_000,
            lr: 1e-3,
            lr_decay_every: 2_000,
            lr_decay: 0.1,
            lambda_per: 10.0,
            perceptual_resolution: 256,
            f_match_weight: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for CPU runs: batch 8, 2,000 iterations, with the
    /// step decays compressed in proportion.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            iterations: 2_000,
            lr_decay_every: 400,
            ..Self::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let k = if self.lr_decay_every == 0 { 0 } else { step / self.lr_decay_every };
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Training sample: image plus its ground-truth code.
pub struct Sample<T: Real> {
    pub image: Image<T>,
    pub f_gt: Tensor<T>,
    pub w_detail: Vec<Tensor<T>>,
}

pub fn make_samples<T: Real>(gen: &GeneratorWeights<T>, zs: &[Tensor<T>]) -> Result<Vec<Sample<T>>> {
    zs.iter()
        .map(|z| {
            let (code, image) = gen.sample_fwplus(z)?;
            Ok(Sample {
                image,
                f_gt: code.f,
                w_detail: code.w_detail,
            })
        })
        .collect()
}

/// Training loss of one sample on a graph whose encoder blocks are `vars`.
pub fn sample_loss<T: Real>(
    g: &mut Graph<T>,
    enc: &EncoderWeights<T>,
    vars: &[(Var, Var)],
    gen: &GeneratorWeights<T>,
    per: &Perceptual<T>,
    s: &Sample<T>,
    cfg: &TrainConfig,
) -> Var {
    let down = downsample_for_encoder(&s.image, &enc.config);
    let x = g.constant(down);
    let f = enc.forward_graph(g, x, vars);
    let w: Vec<Var> = s.w_detail.iter().map(|w| g.constant(w.clone())).collect();
    let out = gen.synthesize_from_base_graph(g, f, &w, NoiseMode::None);
    let target = g.constant(s.image.clone());
    let mut loss = g.mse(out, target);
    if cfg.lambda_per != 0.0 {
        let tf = per.features_const(&perceptual::downsample_tensor(&s.image, cfg.perceptual_resolution));
        let o = perceptual::downsample_to(g, out, cfg.perceptual_resolution);
        let p = per.distance_to(g, o, &tf);
        let p = g.scale(p, cfg.lambda_per);
        loss = g.add(loss, p);
    }
    if cfg.f_match_weight != 0.0 {
        let ft = g.constant(s.f_gt.clone());
        let d = g.mse(f, ft);
        let d = g.scale(d, cfg.f_match_weight);
        loss = g.add(loss, d);
    }
    loss
}

/// Mean training loss over `samples` without updating anything.
pub fn eval_loss<T: Real>(
    enc: &EncoderWeights<T>,
    gen: &GeneratorWeights<T>,
    per: &Perceptual<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let vars = enc.vars(&mut g, false);
            let l = sample_loss(&mut g, enc, &vars, gen, per, s, cfg);
            g.value(l).item().to_f64c()
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Loss and parameter gradients (flattened per block) for one batch.
pub fn batch_gradients<T: Real>(
    enc: &EncoderWeights<T>,
    gen: &GeneratorWeights<T>,
    per: &Perceptual<T>,
    batch: &[Sample<T>],
    cfg: &TrainConfig,
) -> (f64, Vec<(Tensor<T>, Tensor<T>)>) {
    let mut grads: Vec<(Tensor<T>, Tensor<T>)> = enc
        .blocks
        .iter()
        .map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape())))
        .collect();
    let mut loss = 0.0;
    let k = tensor::lit::<T>(1.0 / batch.len() as f64);
    for s in batch {
        let mut g = Graph::new();
        let vars = enc.vars(&mut g, true);
        let l = sample_loss(&mut g, enc, &vars, gen, per, s, cfg);
        loss += g.value(l).item().to_f64c();
        let mut gr = g.backward(l);
        for ((gw, gb), &(w, b)) in grads.iter_mut().zip(&vars) {
            if let Some(t) = gr.take(w) {
                gw.axpy(k, &t);
            }
            if let Some(t) = gr.take(b) {
                gb.axpy(k, &t);
            }
        }
    }
    (loss / batch.len() as f64, grads)
}

/// Mean of `|shift_k(E(I)) - E(shift(I))| / |shift_k(E(I))|` over images and
/// cell shifts, where the image moves by the matching number of pixels and
/// both sides are zero-filled. Only cells at least `margin` away from the
/// filled strip and the grid edge are compared.
pub fn shift_consistency(
    enc: &EncoderWeights<f32>,
    images: &[Image<f32>],
    shifts: &[(isize, isize)],
    margin: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for img in images {
        let px = img.dim(2) / enc.config.base_code_resolution;
        let code = enc.encode(&downsample_for_encoder(img, &enc.config))?;
        for &(dx, dy) in shifts {
            let cells = GeometricTransform::translate(dx as f64, dy as f64);
            let pixels = GeometricTransform::translate((dx * px as isize) as f64, (dy * px as isize) as f64);
            let moved = cells.apply(&code).crop_shift_overlap(dx, dy, margin);
            let from_moved = enc
                .encode(&downsample_for_encoder(&pixels.apply(img), &enc.config))?
                .crop_shift_overlap(dx, dy, margin);
            let denom = moved.norm();
            if denom == 0.0 {
                return Err(Error::Degenerate("encoder output is zero on the compared cells".into()));
            }
            total += moved.sub(&from_moved).norm() / denom;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("shift consistency needs at least one image and shift".into()));
    }
    Ok(total / n as f64)
}

pub struct TrainOutput {
    pub weights: EncoderWeights<f32>,
    pub loss_trace: Vec<f64>,
}

/// Train against a frozen generator on freshly sampled, untransformed codes.
/// `on_step` sees `(step, loss)` after each update.
pub fn train_encoder(
    gen: &GeneratorWeights<f32>,
    per: &Perceptual<f32>,
    init: EncoderWeights<f32>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    init.config.check_generator(&gen.config)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut enc = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, enc.blocks.iter().flat_map(|(w, b)| [w.len(), b.len()]));
    let mut trace = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let zs: Vec<Tensor<f32>> = (0..cfg.batch_size).map(|_| gen.sample_z(&mut rng)).collect();
        let batch = make_samples(gen, &zs)?;
        let (loss, grads) = batch_gradients(&enc, gen, per, &batch, cfg);
        if !loss.is_finite() || grads.iter().any(|(w, b)| !w.all_finite() || !b.all_finite()) {
            return Err(Error::NonFinite {
                what: format!("encoder training loss ({loss})"),
                step,
            });
        }
        let mut params: Vec<&mut Tensor<f32>> = enc.blocks.iter_mut().flat_map(|(w, b)| [w, b]).collect();
        let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().flat_map(|(w, b)| [Some(w), Some(b)]).collect();
        adam.step(cfg.lr_at(step), &mut params, &grad_refs);
        trace.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutput {
        weights: enc,
        loss_trace: trace,
    })
}

impl EncoderWeights<f32> {
    fn archive_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("block.{i}.weight"), w.clone()), (format!("block.{i}.bias"), b.clone())])
            .collect()
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum_of(&self.archive_tensors())
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    generator_checksum: String,
    #[serde(default)]
    train: Option<TrainConfig>,
}

pub fn save_encoder(
    enc: &EncoderWeights<f32>,
    dir: &Path,
    generator_checksum: &str,
    train: Option<&TrainConfig>,
) -> Result<checkpoint::Manifest> {
    let tensors = enc.archive_tensors();
    let meta = EncoderMeta {
        config: enc.config.clone(),
        generator_checksum: generator_checksum.to_string(),
        train: train.cloned(),
    };
    checkpoint::write_archive(dir, ENCODER_KIND, serde_json::to_value(meta)?, &tensors)
}

/// Load an encoder; with `generator_checksum` set, encoders trained against a
/// different generator are rejected.
pub fn load_encoder(dir: &Path, generator_checksum: Option<&str>) -> Result<EncoderWeights<f32>> {
    let archive = checkpoint::read_archive(dir)?;
    let incompatible = |reason: String| Error::Incompatible {
        path: dir.to_path_buf(),
        reason,
    };
    if archive.manifest.kind != ENCODER_KIND {
        return Err(incompatible(format!("archive kind is {}", archive.manifest.kind)));
    }
    let meta: EncoderMeta =
        serde_json::from_value(archive.manifest.meta.clone()).map_err(|e| incompatible(e.to_string()))?;
    if let Some(sum) = generator_checksum {
        if sum != meta.generator_checksum {
            return Err(incompatible("encoder was trained against a different generator".into()));
        }
    }
    meta.config.validate()?;
    let blocks = layout(&meta.config)
        .into_iter()
        .enumerate()
        .map(|(i, (cin, cout, _, _))| {
            Ok((
                archive.expect(&format!("block.{i}.weight"), &[cout, cin, 3, 3], dir)?,
                archive.expect(&format!("block.{i}.bias"), &[cout], dir)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(EncoderWeights {
        config: meta.config,
        blocks,
    })
}

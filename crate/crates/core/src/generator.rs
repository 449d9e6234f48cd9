//! Style-based generator in two flavours: AdaIN styling (`stylegan`) and
//! weight modulation/demodulation with RGB skip connections (`stylegan2`).
//!
//! Style inputs are numbered `1..=N` from the coarsest layer to the finest.
//! Per scale there are `style_layers_per_scale` convolution layers, and in
//! `stylegan2` mode one more slot for that scale's to-RGB layer:
//!
//! ```text
//! stylegan :  [conv_up, conv]            per scale
//! stylegan2:  [conv_up, conv, to_rgb]    per scale
//! ```
//!
//! The base code `f` is the feature map entering the layer that takes
//! `w_M`:
//! * `stylegan`: output of the first (upsampling) convolution at the base
//!   scale, right before its AdaIN, so `M` is that AdaIN's slot;
//! * `stylegan2`: output of the upsample+conv layer at the base scale, so `M`
//!   is the slot of the next layer. The RGB skip arriving from coarser scales
//!   is replaced by zeros.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Archive};
use crate::error::{Error, Result};
use crate::tensor::{self, lit, Padding, Real, Tensor};

pub type Image<T = f32> = Tensor<T>;

const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;
const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorMode {
    #[serde(rename = "stylegan")]
    StyleGan,
    #[serde(rename = "stylegan2")]
    StyleGan2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    #[default]
    None,
    Fixed,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mode: GeneratorMode,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub channels_per_scale: Vec<usize>,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_activation_slope: f64,
    pub style_layers_per_scale: usize,
    pub base_code_resolution: usize,
    pub padding_mode: Padding,
    pub noise_mode: NoiseMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    /// First convolution at 4x4, applied to the learned constant.
    Input,
    ConvUp,
    Conv,
    ToRgb,
}

/// One entry of the style layout, recorded in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSlot {
    pub index: usize,
    pub resolution: usize,
    pub kind: SlotKind,
}

impl GeneratorConfig {
    /// 64x64 output, 128-d latents, channels [256, 256, 128, 128, 64].
    /// The mapping network is two layers deep: deeper random stacks give
    /// styles whose whitened coordinates are far from Gaussian.
    pub fn desk(mode: GeneratorMode) -> Self {
        Self {
            mode,
            base_resolution: 4,
            output_resolution: 64,
            channels_per_scale: vec![256, 256, 128, 128, 64],
            z_dim: 128,
            w_dim: 128,
            mapping_layers: 2,
            mapping_activation_slope: LRELU_SLOPE,
            style_layers_per_scale: 2,
            base_code_resolution: 16,
            padding_mode: Padding::Zero,
            noise_mode: NoiseMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.base_resolution.is_power_of_two() || !self.output_resolution.is_power_of_two() {
            return bad("resolutions must be powers of two".into());
        }
        if self.output_resolution < self.base_resolution {
            return bad("output_resolution below base_resolution".into());
        }
        let scales = self.num_scales();
        if self.channels_per_scale.len() != scales {
            return bad(format!(
                "channels_per_scale has {} entries, {scales} scales need one each",
                self.channels_per_scale.len()
            ));
        }
        if self.channels_per_scale.contains(&0) || self.z_dim == 0 || self.w_dim == 0 {
            return bad("zero-sized dimension".into());
        }
        if self.style_layers_per_scale == 0 || self.mapping_layers == 0 {
            return bad("need at least one style layer per scale and one mapping layer".into());
        }
        let b = self.base_code_resolution;
        if !b.is_power_of_two() || b < self.base_resolution || self.output_resolution % b != 0 {
            return bad(format!(
                "base_code_resolution {b} must be a power of two in [{}, {}]",
                self.base_resolution, self.output_resolution
            ));
        }
        if !(0.0..1.0).contains(&self.mapping_activation_slope) || self.mapping_activation_slope == 0.0 {
            return bad("mapping_activation_slope must be in (0, 1)".into());
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        (self.output_resolution / self.base_resolution).trailing_zeros() as usize + 1
    }

    pub fn resolution_of_scale(&self, k: usize) -> usize {
        self.base_resolution << k
    }

    pub fn base_scale(&self) -> usize {
        (self.base_code_resolution / self.base_resolution).trailing_zeros() as usize
    }

    pub fn slots_per_scale(&self) -> usize {
        match self.mode {
            GeneratorMode::StyleGan => self.style_layers_per_scale,
            GeneratorMode::StyleGan2 => self.style_layers_per_scale + 1,
        }
    }

    /// N: number of style inputs.
    pub fn num_styles(&self) -> usize {
        self.num_scales() * self.slots_per_scale()
    }

    /// M: 1-based slot of the first detail-code layer.
    pub fn detail_start(&self) -> usize {
        let first = self.base_scale() * self.slots_per_scale() + 1;
        match self.mode {
            GeneratorMode::StyleGan => first,
            GeneratorMode::StyleGan2 => first + 1,
        }
    }

    /// N - M + 1
    pub fn detail_len(&self) -> usize {
        self.num_styles() - self.detail_start() + 1
    }

    pub fn base_code_channels(&self) -> usize {
        self.channels_per_scale[self.base_scale()]
    }

    pub fn base_code_shape(&self) -> [usize; 3] {
        [self.base_code_channels(), self.base_code_resolution, self.base_code_resolution]
    }

    /// Image pixels per base-code cell.
    pub fn stride(&self) -> usize {
        self.output_resolution / self.base_code_resolution
    }

    pub fn style_layout(&self) -> Vec<StyleSlot> {
        let per = self.slots_per_scale();
        let mut out = Vec::with_capacity(self.num_styles());
        for k in 0..self.num_scales() {
            for j in 0..per {
                let kind = if j == self.style_layers_per_scale {
                    SlotKind::ToRgb
                } else if j > 0 {
                    SlotKind::Conv
                } else if k == 0 {
                    SlotKind::Input
                } else {
                    SlotKind::ConvUp
                };
                out.push(StyleSlot {
                    index: k * per + j + 1,
                    resolution: self.resolution_of_scale(k),
                    kind,
                });
            }
        }
        out
    }

    /// Same generator viewed with a different base-code scale.
    pub fn with_base_code_resolution(&self, res: usize) -> Result<Self> {
        let mut c = self.clone();
        c.base_code_resolution = res;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Real = f32> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        g.linear(w, x, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleLayer<T: Real = f32> {
    pub slot: StyleSlot,
    /// `[Cout, Cin, K, K]`, equalized-lr scaling already folded in.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Maps `w` to per-channel styles: `Cin` modulation scales in
    /// `stylegan2` mode, `2 * Cout` AdaIN (scale, shift) in `stylegan` mode.
    pub affine: Dense<T>,
    pub noise_strength: T,
    /// Fixed noise map `[1, H, W]`; empty for to-RGB layers.
    pub noise: Tensor<T>,
    /// Sum over taps of squared weights, `[Cout, Cin]`, for demodulation.
    weight_sq: Tensor<T>,
}

impl<T: Real> StyleLayer<T> {
    fn new(slot: StyleSlot, weight: Tensor<T>, bias: Tensor<T>, affine: Dense<T>, noise_strength: T, noise: Tensor<T>) -> Self {
        let weight_sq = squared_taps(&weight);
        Self {
            slot,
            weight,
            bias,
            affine,
            noise_strength,
            noise,
            weight_sq,
        }
    }

    fn cast<U: Real>(&self) -> StyleLayer<U> {
        StyleLayer::new(
            self.slot,
            self.weight.cast(),
            self.bias.cast(),
            self.affine.cast(),
            lit(self.noise_strength.to_f64c()),
            self.noise.cast(),
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }
}

fn squared_taps<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    let (o, i) = (w.dim(0), w.dim(1));
    let kk = w.dim(2) * w.dim(3);
    Tensor::from_fn(&[o, i], |idx| w.data()[idx * kk..(idx + 1) * kk].iter().map(|&v| v * v).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights<T: Real = f32> {
    pub config: GeneratorConfig,
    pub mapping: Vec<Dense<T>>,
    /// Learned 4x4 input, `[C0, 4, 4]`.
    pub constant: Tensor<T>,
    /// One layer per style slot, in slot order.
    pub layers: Vec<StyleLayer<T>>,
    /// Final unstyled 1x1 projection (`stylegan` mode only).
    pub to_rgb: Option<Dense<T>>,
    /// Average of `map_latent` over sampled `z`; the inversion starting point.
    pub w_mean: Tensor<T>,
}

/// A point of F/W+: base code plus detail styles `w_M..w_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct FwPlusCode<T: Real = f32> {
    pub f: Tensor<T>,
    pub w_detail: Vec<Tensor<T>>,
}

impl<T: Real> FwPlusCode<T> {
    pub fn cast<U: Real>(&self) -> FwPlusCode<U> {
        FwPlusCode {
            f: self.f.cast(),
            w_detail: self.w_detail.iter().map(|w| w.cast()).collect(),
        }
    }

    pub fn check(&self, cfg: &GeneratorConfig) -> Result<()> {
        let shape = cfg.base_code_shape();
        if self.f.shape() != shape {
            return Err(Error::Shape {
                what: "base code",
                expected: shape.to_vec(),
                got: self.f.shape().to_vec(),
            });
        }
        if self.w_detail.len() != cfg.detail_len() {
            return Err(Error::Config(format!(
                "detail code has {} layers, generator expects {}",
                self.w_detail.len(),
                cfg.detail_len()
            )));
        }
        for w in &self.w_detail {
            if w.shape() != [cfg.w_dim] {
                return Err(Error::Shape {
                    what: "detail style",
                    expected: vec![cfg.w_dim],
                    got: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn randn<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

impl GeneratorWeights<f32> {
    /// Randomly initialized generator. `w_mean` is estimated from 10^4 samples.
    pub fn random(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.mapping_activation_slope;
        let he = (2.0 / (1.0 + slope * slope)).sqrt();

        let mut mapping = Vec::with_capacity(config.mapping_layers);
        for l in 0..config.mapping_layers {
            let fan_in = if l == 0 { config.z_dim } else { config.w_dim };
            mapping.push(Dense {
                weight: random_orthogonal(config.w_dim, fan_in, he, &mut rng),
                bias: randn(&[config.w_dim], 0.1, &mut rng),
            });
        }

        let chans = &config.channels_per_scale;
        let constant = randn(&[chans[0], config.base_resolution, config.base_resolution], 1.0, &mut rng);
        let scales = config.num_scales();
        let mut layers = Vec::with_capacity(config.num_styles());
        for slot in config.style_layout() {
            let k = (slot.resolution / config.base_resolution).trailing_zeros() as usize;
            let cout_conv = chans[k];
            let cin = match slot.kind {
                SlotKind::Input => chans[0],
                SlotKind::ConvUp => chans[k - 1],
                SlotKind::Conv | SlotKind::ToRgb => chans[k],
            };
            let (cout, ksz) = if slot.kind == SlotKind::ToRgb { (3, 1) } else { (cout_conv, 3) };
            let fan_in = cin * ksz * ksz;
            // Coarse to-RGB outputs are kept small, as they are in trained
            // StyleGAN2 models.
            let (gain, bias_std) = if slot.kind == SlotKind::ToRgb {
                let f = 0.25f64.powi((scales - 1 - k) as i32);
                (0.5 * f, 0.1 * f)
            } else {
                (1.0, 0.1)
            };
            let weight = randn(&[cout, cin, ksz, ksz], gain / (fan_in as f64).sqrt(), &mut rng);
            let bias = randn(&[cout], bias_std, &mut rng);
            let affine_out = match config.mode {
                GeneratorMode::StyleGan2 => cin,
                GeneratorMode::StyleGan => 2 * cout,
            };
            // style = A w + b with b = 1 on scales and 0 on AdaIN shifts
            let mut affine_bias = Tensor::zeros(&[affine_out]);
            let n_scale = match config.mode {
                GeneratorMode::StyleGan2 => cin,
                GeneratorMode::StyleGan => cout,
            };
            affine_bias.data_mut()[..n_scale].iter_mut().for_each(|v| *v = 1.0);
            let affine = Dense {
                weight: randn(&[affine_out, config.w_dim], 1.0 / (config.w_dim as f64).sqrt(), &mut rng),
                bias: affine_bias,
            };
            let noise = if slot.kind == SlotKind::ToRgb {
                Tensor::zeros(&[0])
            } else {
                randn(&[1, slot.resolution, slot.resolution], 1.0, &mut rng)
            };
            let strength = if slot.kind == SlotKind::ToRgb { 0.0 } else { 0.1 };
            layers.push(StyleLayer::new(slot, weight, bias, affine, strength, noise));
        }

        let to_rgb = (config.mode == GeneratorMode::StyleGan).then(|| {
            let c = chans[scales - 1];
            Dense {
                weight: randn(&[3, c], 0.4 / (c as f64).sqrt(), &mut rng),
                bias: randn(&[3], 0.05, &mut rng),
            }
        });

        let mut g = Self {
            w_mean: Tensor::zeros(&[config.w_dim]),
            config,
            mapping,
            constant,
            layers,
            to_rgb,
        };
        g.w_mean = g.estimate_w_mean(10_000, seed ^ 0x5eed);
        Ok(g)
    }
}

/// `gain * Q` with `Q` having orthonormal rows or columns. Keeps a deep
/// random mapping network well conditioned.
fn random_orthogonal<T: Real>(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    let g: Tensor<f64> = randn(&[n, m], 1.0, rng);
    let q = nalgebra::DMatrix::from_row_slice(n, m, g.data()).qr().q();
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let v = if rows >= cols { q[(r, c)] } else { q[(c, r)] };
        lit(v * gain)
    })
}

/// Inverse of the leaky activation with the given slope.
pub fn inverse_leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x / slope
    }
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x * slope
    }
}

impl<T: Real> GeneratorWeights<T> {
    pub fn cast<U: Real>(&self) -> GeneratorWeights<U> {
        GeneratorWeights {
            config: self.config.clone(),
            mapping: self.mapping.iter().map(Dense::cast).collect(),
            constant: self.constant.cast(),
            layers: self.layers.iter().map(StyleLayer::cast).collect(),
            to_rgb: self.to_rgb.as_ref().map(Dense::cast),
            w_mean: self.w_mean.cast(),
        }
    }

    /// Same parameters, different base-code scale (changes `M` only).
    pub fn with_base_code_resolution(&self, res: usize) -> Result<Self> {
        let mut g = self.clone();
        g.config = self.config.with_base_code_resolution(res)?;
        Ok(g)
    }

    /// Mapping network on a batch `[n, z_dim] -> [n, w_dim]`.
    pub fn map_latent_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if z.shape().len() != 2 || z.dim(1) != cfg.z_dim {
            return Err(Error::Shape {
                what: "latent z batch",
                expected: vec![z.shape().first().copied().unwrap_or(0), cfg.z_dim],
                got: z.shape().to_vec(),
            });
        }
        let n = z.dim(0);
        let d = cfg.z_dim;
        // second-moment normalization of z
        let mut x = z.clone();
        for row in x.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>() / d as f64;
            let inv = lit::<T>(1.0 / (ms + 1e-8).sqrt());
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let slope = lit::<T>(cfg.mapping_activation_slope);
        for layer in &self.mapping {
            let mut y = tensor::matmul(&x, false, &layer.weight, true);
            let o = layer.weight.dim(0);
            for row in y.data_mut().chunks_mut(o) {
                for (v, &b) in row.iter_mut().zip(layer.bias.data()) {
                    let a = *v + b;
                    *v = if a >= T::zero() { a } else { a * slope };
                }
            }
            x = y;
        }
        debug_assert_eq!(x.shape(), [n, cfg.w_dim]);
        Ok(x)
    }

    pub fn map_latent(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape() != [self.config.z_dim] {
            return Err(Error::Shape {
                what: "latent z",
                expected: vec![self.config.z_dim],
                got: z.shape().to_vec(),
            });
        }
        let w = self.map_latent_batch(&z.clone().reshape(&[1, self.config.z_dim]))?;
        Ok(w.reshape(&[self.config.w_dim]))
    }

    pub fn sample_z(&self, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::randn(&[self.config.z_dim], 1.0, rng)
    }

    pub fn estimate_w_mean(&self, n: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0f64; self.config.w_dim];
        let chunk = 1000;
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let z = Tensor::<T>::randn(&[m, self.config.z_dim], 1.0, &mut rng);
            let w = self.map_latent_batch(&z).expect("shape checked");
            for row in w.data().chunks(self.config.w_dim) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.to_f64c();
                }
            }
            done += m;
        }
        Tensor::from_fn(&[self.config.w_dim], |i| lit(acc[i] / n as f64))
    }

    fn check_wplus(&self, wplus: &[Tensor<T>]) -> Result<()> {
        let n = self.config.num_styles();
        if wplus.len() != n {
            return Err(Error::Config(format!("W+ code has {} layers, generator has {n}", wplus.len())));
        }
        for w in wplus {
            if w.shape() != [self.config.w_dim] {
                return Err(Error::Shape {
                    what: "style vector",
                    expected: vec![self.config.w_dim],
                    got: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Full generator output for a W+ code (all skips active).
    pub fn synthesize(&self, wplus: &[Tensor<T>], noise: NoiseMode) -> Result<Image<T>> {
        self.check_wplus(wplus)?;
        let mut g = Graph::new();
        let styles: Vec<Var> = wplus.iter().map(|w| g.constant(w.clone())).collect();
        let x = g.constant(self.constant.clone());
        let img = Synthesis::new(self, noise).run(&mut g, x, &styles);
        Ok(g.value(img).clone())
    }

    /// Base code produced by a W+ code (the feature map at the hook).
    pub fn extract_base(&self, wplus: &[Tensor<T>], noise: NoiseMode) -> Result<Tensor<T>> {
        self.check_wplus(wplus)?;
        let mut g = Graph::new();
        let styles: Vec<Var> = wplus.iter().map(|w| g.constant(w.clone())).collect();
        let x = g.constant(self.constant.clone());
        let f = Synthesis::new(self, noise).run_to_base(&mut g, x, &styles);
        Ok(g.value(f).clone())
    }

    pub fn synthesize_from_base(&self, code: &FwPlusCode<T>, noise: NoiseMode) -> Result<Image<T>> {
        code.check(&self.config)?;
        let mut g = Graph::new();
        let f = g.constant(code.f.clone());
        let w: Vec<Var> = code.w_detail.iter().map(|w| g.constant(w.clone())).collect();
        let img = self.synthesize_from_base_graph(&mut g, f, &w, noise);
        Ok(g.value(img).clone())
    }

    /// Differentiable `G(f, w_{M+})` on a caller-owned graph.
    pub fn synthesize_from_base_graph(&self, g: &mut Graph<T>, f: Var, w_detail: &[Var], noise: NoiseMode) -> Var {
        let m0 = self.config.detail_start() - 1;
        let mut styles = vec![None; m0];
        styles.extend(w_detail.iter().copied().map(Some));
        Synthesis::new(self, noise).run_opt(g, m0, f, true, &styles)
    }

    /// `(f^gt, w^gt_{M+})` for a sampled z, and the image `G(f^gt, w^gt_{M+})`.
    pub fn sample_fwplus(&self, z: &Tensor<T>) -> Result<(FwPlusCode<T>, Image<T>)> {
        let w = self.map_latent(z)?;
        let wplus = vec![w.clone(); self.config.num_styles()];
        let f = self.extract_base(&wplus, NoiseMode::None)?;
        let code = FwPlusCode {
            f,
            w_detail: vec![w; self.config.detail_len()],
        };
        let img = self.synthesize_from_base(&code, NoiseMode::None)?;
        Ok((code, img))
    }

    /// Style-affine matrix of every slot (used for direction discovery).
    pub fn style_affine(&self, index: usize) -> &Tensor<T> {
        &self.layers[index - 1].affine.weight
    }

    pub fn to_archive_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.mapping.iter().enumerate() {
            out.push((format!("mapping.{i}.weight"), l.weight.cast()));
            out.push((format!("mapping.{i}.bias"), l.bias.cast()));
        }
        out.push(("synthesis.const".into(), self.constant.cast()));
        for l in &self.layers {
            let p = format!("synthesis.{}", l.slot.index);
            out.push((format!("{p}.weight"), l.weight.cast()));
            out.push((format!("{p}.bias"), l.bias.cast()));
            out.push((format!("{p}.affine.weight"), l.affine.weight.cast()));
            out.push((format!("{p}.affine.bias"), l.affine.bias.cast()));
            out.push((format!("{p}.noise_strength"), Tensor::scalar(l.noise_strength.to_f64c() as f32)));
            out.push((format!("{p}.noise"), l.noise.cast()));
        }
        if let Some(rgb) = &self.to_rgb {
            out.push(("synthesis.to_rgb.weight".into(), rgb.weight.cast()));
            out.push(("synthesis.to_rgb.bias".into(), rgb.bias.cast()));
        }
        out.push(("w_mean".into(), self.w_mean.cast()));
        out
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum_of(&self.to_archive_tensors())
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    config: GeneratorConfig,
    num_styles: usize,
    detail_start: usize,
    style_layout: Vec<StyleSlot>,
}

pub const GENERATOR_KIND: &str = "generator";

pub fn save_weights(weights: &GeneratorWeights<f32>, dir: &std::path::Path) -> Result<checkpoint::Manifest> {
    let cfg = &weights.config;
    let meta = GeneratorMeta {
        config: cfg.clone(),
        num_styles: cfg.num_styles(),
        detail_start: cfg.detail_start(),
        style_layout: cfg.style_layout(),
    };
    checkpoint::write_archive(dir, GENERATOR_KIND, serde_json::to_value(meta)?, &weights.to_archive_tensors())
}

/// Load a generator checkpoint. If `expected` is given, the stored config
/// must match it exactly.
pub fn load_weights(dir: &std::path::Path, expected: Option<&GeneratorConfig>) -> Result<GeneratorWeights<f32>> {
    let archive = checkpoint::read_archive(dir)?;
    let incompatible = |reason: String| Error::Incompatible {
        path: dir.to_path_buf(),
        reason,
    };
    if archive.manifest.kind != GENERATOR_KIND {
        return Err(incompatible(format!("archive kind is {}", archive.manifest.kind)));
    }
    let meta: GeneratorMeta = serde_json::from_value(archive.manifest.meta.clone())
        .map_err(|e| incompatible(format!("bad generator manifest: {e}")))?;
    let cfg = meta.config;
    cfg.validate()?;
    if let Some(exp) = expected {
        if exp != &cfg {
            return Err(incompatible(config_diff(exp, &cfg)));
        }
    }
    from_archive(&archive, cfg, dir)
}

fn config_diff(expected: &GeneratorConfig, found: &GeneratorConfig) -> String {
    let a = serde_json::to_value(expected).unwrap_or_default();
    let b = serde_json::to_value(found).unwrap_or_default();
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!("{k}: expected {va}, checkpoint has {}", b.get(k).unwrap_or(&serde_json::Value::Null)));
            }
        }
    }
    format!("config mismatch ({})", diffs.join("; "))
}

fn from_archive(archive: &Archive, config: GeneratorConfig, dir: &std::path::Path) -> Result<GeneratorWeights<f32>> {
    let chans = config.channels_per_scale.clone();
    let mut mapping = Vec::new();
    for i in 0..config.mapping_layers {
        let fan_in = if i == 0 { config.z_dim } else { config.w_dim };
        mapping.push(Dense {
            weight: archive.expect(&format!("mapping.{i}.weight"), &[config.w_dim, fan_in], dir)?,
            bias: archive.expect(&format!("mapping.{i}.bias"), &[config.w_dim], dir)?,
        });
    }
    let constant = archive.expect(
        "synthesis.const",
        &[chans[0], config.base_resolution, config.base_resolution],
        dir,
    )?;
    let mut layers = Vec::new();
    for slot in config.style_layout() {
        let p = format!("synthesis.{}", slot.index);
        let get = |n: &str| {
            archive.get(&format!("{p}.{n}")).cloned().ok_or_else(|| Error::Incompatible {
                path: dir.to_path_buf(),
                reason: format!("missing tensor {p}.{n}"),
            })
        };
        let weight = get("weight")?;
        let affine = Dense {
            weight: get("affine.weight")?,
            bias: get("affine.bias")?,
        };
        let strength = get("noise_strength")?.item();
        layers.push(StyleLayer::new(slot, weight, get("bias")?, affine, strength, get("noise")?));
    }
    let to_rgb = match config.mode {
        GeneratorMode::StyleGan => Some(Dense {
            weight: archive.expect("synthesis.to_rgb.weight", &[3, chans[chans.len() - 1]], dir)?,
            bias: archive.expect("synthesis.to_rgb.bias", &[3], dir)?,
        }),
        GeneratorMode::StyleGan2 => None,
    };
    let w_mean = archive.expect("w_mean", &[config.w_dim], dir)?;
    Ok(GeneratorWeights {
        config,
        mapping,
        constant,
        layers,
        to_rgb,
        w_mean,
    })
}

/// Forward pass over the synthesis layers.
struct Synthesis<'a, T: Real> {
    weights: &'a GeneratorWeights<T>,
    noise: NoiseMode,
}

impl<'a, T: Real> Synthesis<'a, T> {
    fn new(weights: &'a GeneratorWeights<T>, noise: NoiseMode) -> Self {
        Self { weights, noise }
    }

    fn pad(&self) -> Padding {
        self.weights.config.padding_mode
    }

    fn noise_map(&self, layer: &StyleLayer<T>, c: usize) -> Option<Tensor<T>> {
        let base = match self.noise {
            NoiseMode::None => return None,
            NoiseMode::Fixed => layer.noise.clone(),
            NoiseMode::Random => Tensor::randn(layer.noise.shape(), 1.0, &mut rand::rng()),
        };
        let (_, h, w) = base.chw();
        let plane: Vec<T> = base.data().iter().map(|&v| v * layer.noise_strength).collect();
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(&plane);
        }
        Some(Tensor::new(&[c, h, w], data))
    }

    /// Convolution part of a layer: everything up to the styling step in
    /// `stylegan` mode, the whole modulated layer in `stylegan2` mode.
    fn pre(&self, g: &mut Graph<T>, x: Var, layer: &StyleLayer<T>, style: Option<Var>) -> Var {
        let pad = self.pad();
        let up = layer.slot.kind == SlotKind::ConvUp;
        let weight = g.constant(layer.weight.clone());
        let bias = g.constant(layer.bias.clone());
        let y = match self.weights.config.mode {
            GeneratorMode::StyleGan => {
                let x = if up { g.upsample2x(x, pad) } else { x };
                g.conv2d(x, weight, pad)
            }
            GeneratorMode::StyleGan2 => {
                let w = style.expect("stylegan2 layers need a style");
                let s = layer.affine.forward(g, w);
                let xs = g.scale_channels(x, s);
                let xs = if up { g.upsample2x(xs, pad) } else { xs };
                let y = g.conv2d(xs, weight, pad);
                if layer.slot.kind == SlotKind::ToRgb {
                    return g.add_channels(y, bias);
                }
                // demodulation: 1 / sqrt(sum_{i,k} (W[o,i,k] s_i)^2 + eps)
                let wsq = g.constant(layer.weight_sq.clone());
                let s2 = g.mul(s, s);
                let energy = g.matvec(wsq, s2);
                let d = g.rsqrt(energy, DEMOD_EPS);
                g.scale_channels(y, d)
            }
        };
        let y = match self.noise_map(layer, layer.out_channels()) {
            Some(n) => {
                let n = g.constant(n);
                g.add(y, n)
            }
            None => y,
        };
        let y = g.add_channels(y, bias);
        let y = g.leaky_relu(y, LRELU_SLOPE);
        g.scale(y, std::f64::consts::SQRT_2)
    }

    /// AdaIN styling (`stylegan` mode).
    fn adain(&self, g: &mut Graph<T>, x: Var, layer: &StyleLayer<T>, style: Var) -> Var {
        let c = layer.out_channels();
        let st = layer.affine.forward(g, style);
        let ys = g.slice(st, 0, c);
        let yb = g.slice(st, c, c);
        let n = g.instance_norm(x, IN_EPS);
        let y = g.scale_channels(n, ys);
        g.add_channels(y, yb)
    }

    /// Full pass from the learned constant.
    fn run(&self, g: &mut Graph<T>, x: Var, styles: &[Var]) -> Var {
        let styles: Vec<Option<Var>> = styles.iter().copied().map(Some).collect();
        self.run_opt(g, 0, x, false, &styles)
    }

    /// Run from slot `start` (0-based) to the output. If `pre_done`, `x` is
    /// the base code: the `stylegan` AdaIN of slot `start` is applied
    /// directly, and in `stylegan2` mode processing starts at `start` with
    /// a zero RGB skip.
    fn run_opt(&self, g: &mut Graph<T>, start: usize, x: Var, pre_done: bool, styles: &[Option<Var>]) -> Var {
        let w = self.weights;
        let pad = self.pad();
        let mut x = x;
        let mut rgb: Option<Var> = None;
        for j in start..w.layers.len() {
            let layer = &w.layers[j];
            let style = styles[j];
            match w.config.mode {
                GeneratorMode::StyleGan => {
                    if !(pre_done && j == start) {
                        x = self.pre(g, x, layer, None);
                    }
                    x = self.adain(g, x, layer, style.expect("style"));
                }
                GeneratorMode::StyleGan2 => {
                    if layer.slot.kind == SlotKind::ToRgb {
                        let y = self.pre(g, x, layer, style);
                        // the skip from the previous scale is upsampled here
                        rgb = Some(match rgb {
                            Some(prev) => {
                                let up = g.upsample2x(prev, pad);
                                g.add(up, y)
                            }
                            None => y,
                        });
                    } else {
                        x = self.pre(g, x, layer, style);
                    }
                }
            }
        }
        let out = match w.config.mode {
            GeneratorMode::StyleGan => {
                let rgb = w.to_rgb.as_ref().expect("stylegan to_rgb");
                let (c, _, _) = g.value(x).chw();
                let wt = g.constant(rgb.weight.clone().reshape(&[3, c, 1, 1]));
                let b = g.constant(rgb.bias.clone());
                let y = g.conv2d(x, wt, pad);
                g.add_channels(y, b)
            }
            GeneratorMode::StyleGan2 => rgb.expect("at least one to-RGB layer"),
        };
        g.tanh(out)
    }

    /// Run from the constant up to the base-code hook and return `f`.
    fn run_to_base(&self, g: &mut Graph<T>, x: Var, styles: &[Var]) -> Var {
        let w = self.weights;
        let m0 = w.config.detail_start() - 1;
        let mut x = x;
        for j in 0..m0 {
            let layer = &w.layers[j];
            match w.config.mode {
                GeneratorMode::StyleGan => {
                    x = self.pre(g, x, layer, None);
                    x = self.adain(g, x, layer, styles[j]);
                }
                GeneratorMode::StyleGan2 => {
                    // coarse to-RGB outputs are not part of f
                    if layer.slot.kind != SlotKind::ToRgb {
                        x = self.pre(g, x, layer, Some(styles[j]));
                    }
                }
            }
        }
        if w.config.mode == GeneratorMode::StyleGan {
            x = self.pre(g, x, &w.layers[m0], None);
        }
        x
    }
}

//! Fixed perceptual feature extractor: a seeded random convolutional pyramid
//! whose per-pixel channel vectors are normalized to unit length. Distances
//! have the usual LPIPS layout, `sum_l mean_hw |φ_l(a) - φ_l(b)|²`, with
//! uniform channel weights. Callers downsample large images first, see
//! [`downsample_to`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::{Padding, Real, Tensor};

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Recorded in run manifests; only `random_pyramid` is built in.
    pub extractor: String,
    pub seed: u64,
    /// Output channels of each level; every level after the first halves the
    /// resolution first.
    pub channels: Vec<usize>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            extractor: "random_pyramid".into(),
            seed: 0x9e37_79b9,
            channels: vec![16, 32, 64],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Perceptual<T: Real = f32> {
    pub config: PerceptualConfig,
    levels: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Perceptual<T> {
    pub fn new(config: PerceptualConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cin = 3;
        let mut levels = Vec::new();
        for &c in &config.channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::<f32>::randn(&[c, cin, 3, 3], std, &mut rng).cast();
            let b = Tensor::<f32>::randn(&[c], 0.1, &mut rng).cast();
            levels.push((w, b));
            cin = c;
        }
        Self { config, levels }
    }

    pub fn cast<U: Real>(&self) -> Perceptual<U> {
        Perceptual {
            config: self.config.clone(),
            levels: self.levels.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        }
    }

    /// Unit-normalized features of every level.
    pub fn features(&self, g: &mut Graph<T>, img: Var) -> Vec<Var> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, (w, b)) in self.levels.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool(x, 2);
            }
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(x, wv, Padding::Zero);
            let y = g.add_channels(y, bv);
            x = g.leaky_relu(y, SLOPE);
            out.push(g.channel_normalize(x, NORM_EPS, false));
        }
        out
    }

    pub fn features_const(&self, img: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let f = self.features(&mut g, x);
        f.into_iter().map(|v| g.value(v).clone()).collect()
    }

    /// Distance between the features of `img` and precomputed target
    /// features.
    pub fn distance_to(&self, g: &mut Graph<T>, img: Var, target: &[Tensor<T>]) -> Var {
        let fa = self.features(g, img);
        self.sum_levels(g, &fa, target)
    }

    fn sum_levels(&self, g: &mut Graph<T>, fa: &[Var], target: &[Tensor<T>]) -> Var {
        let mut total: Option<Var> = None;
        for (a, t) in fa.iter().zip(target) {
            let c = t.dim(0) as f64;
            let tv = g.constant(t.clone());
            // mean over (c, h, w) times c = mean over pixels of the squared norm
            let m = g.mse(*a, tv);
            let m = g.scale(m, c);
            total = Some(match total {
                Some(s) => g.add(s, m),
                None => m,
            });
        }
        total.expect("at least one level")
    }

    pub fn distance(&self, a: &Tensor<T>, b: &Tensor<T>) -> f64 {
        let tb = self.features_const(b);
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let d = self.distance_to(&mut g, x, &tb);
        g.value(d).item().to_f64c()
    }

    /// Spatially averaged features, concatenated over levels.
    pub fn pooled(&self, img: &Tensor<T>) -> Vec<f64> {
        self.features_const(img)
            .iter()
            .flat_map(|f| {
                let (c, _, _) = f.chw();
                (0..c).map(|k| {
                    let ch = f.channel(k);
                    ch.iter().map(|v| v.to_f64c()).sum::<f64>() / ch.len() as f64
                })
            })
            .collect()
    }

    pub fn pooled_dim(&self) -> usize {
        self.config.channels.iter().sum()
    }
}

/// Area-downsample to at most `max_res` pixels per side.
pub fn downsample_to<T: Real>(g: &mut Graph<T>, img: Var, max_res: usize) -> Var {
    let (_, h, _) = g.value(img).chw();
    if h > max_res {
        g.avg_pool(img, h / max_res)
    } else {
        img
    }
}

pub fn downsample_tensor<T: Real>(img: &Tensor<T>, max_res: usize) -> Tensor<T> {
    let (_, h, _) = img.chw();
    if h > max_res {
        crate::tensor::avg_pool(img, h / max_res)
    } else {
        img.clone()
    }
}

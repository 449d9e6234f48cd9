//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! parameters (gradients requested) or constants; intermediate nodes record a
//! backward closure only when some ancestor is a parameter.

use crate::tensor::{self, lit, Padding, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct BackCtx<'a, T: Real> {
    grad: &'a Tensor<T>,
    out: &'a Tensor<T>,
    inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(
            v,
            &[a, b],
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(
            v,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.clone()),
                    c.needs[1].then(|| c.grad.scale(-T::one())),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        self.push(
            v,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.mul(c.inputs[1])),
                    c.needs[1].then(|| c.grad.mul(c.inputs[0])),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        let v = self.value(a).scale(s);
        self.push(v, &[a], Box::new(move |c| vec![Some(c.grad.scale(s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = lit::<T>(slope);
        let v = self.value(a).map(|x| if x >= T::zero() { x } else { x * s });
        self.push(
            v,
            &[a],
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x >= T::zero() { g } else { g * s }))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(
            v,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.out, |g, y| g * (T::one() - y * y)))]),
        )
    }

    /// `(a + eps)^(-1/2)`
    pub fn rsqrt(&mut self, a: Var, eps: f64) -> Var {
        let e = lit::<T>(eps);
        let v = self.value(a).map(|x| (x + e).sqrt().recip());
        self.push(
            v,
            &[a],
            Box::new(|c| {
                let half = lit::<T>(-0.5);
                vec![Some(c.grad.zip_map(c.out, |g, y| g * half * y * y * y))]
            }),
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(lit::<T>(self.value(a).sum()));
        self.push(
            v,
            &[a],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(lit::<T>(self.value(a).mean()));
        self.push(
            v,
            &[a],
            Box::new(|c| {
                let n = c.inputs[0].len() as f64;
                vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item() / lit(n)))]
            }),
        )
    }

    /// Mean squared difference, accumulated in f64.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let m = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| {
                let d = x.to_f64c() - y.to_f64c();
                d * d
            })
            .sum::<f64>()
            / va.len() as f64;
        self.push(
            Tensor::scalar(lit(m)),
            &[a, b],
            Box::new(|c| {
                let k = c.grad.item() * lit::<T>(2.0 / c.inputs[0].len() as f64);
                let d = c.inputs[0].zip_map(c.inputs[1], |x, y| (x - y) * k);
                let db = c.needs[1].then(|| d.scale(-T::one()));
                vec![c.needs[0].then_some(d), db]
            }),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[O, I] x [I] -> [O]`
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (mv, xv) = (self.value(m), self.value(x));
        assert_eq!(mv.shape().len(), 2);
        let (o, i) = (mv.dim(0), mv.dim(1));
        assert_eq!(xv.len(), i, "matvec: matrix {:?} vs vector {:?}", mv.shape(), xv.shape());
        let y = tensor::matmul(mv, false, &xv.clone().reshape(&[i, 1]), false).reshape(&[o]);
        self.push(
            y,
            &[m, x],
            Box::new(|c| {
                let (o, i) = (c.inputs[0].dim(0), c.inputs[0].dim(1));
                let g = c.grad.clone().reshape(&[o, 1]);
                let dm = c.needs[0]
                    .then(|| tensor::matmul(&g, false, &c.inputs[1].clone().reshape(&[i, 1]), true));
                let dx = c.needs[1].then(|| tensor::matmul(c.inputs[0], true, &g, false).reshape(&[i]));
                vec![dm, dx]
            }),
        )
    }

    pub fn linear(&mut self, m: Var, x: Var, bias: Var) -> Var {
        let y = self.matvec(m, x);
        self.add(y, bias)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, pad: Padding) -> Var {
        let (y, cols) = tensor::conv2d(self.value(x), self.value(w), pad);
        let keep_cols = self.requires_grad(w);
        let cols = if keep_cols { cols } else { Vec::new() };
        self.push(
            y,
            &[x, w],
            Box::new(move |c| {
                let dx = c.needs[0].then(|| tensor::conv2d_backward_input(c.grad, c.inputs[1], pad));
                let dw = c.needs[1].then(|| tensor::conv2d_backward_weight(c.grad, &cols, c.inputs[1].shape()));
                vec![dx, dw]
            }),
        )
    }

    /// Contiguous slice `[start, start + len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.len(), "slice out of bounds");
        let y = Tensor::new(&[len], xv.data()[start..start + len].to_vec());
        self.push(
            y,
            &[x],
            Box::new(move |c| {
                let mut d = Tensor::zeros(c.inputs[0].shape());
                d.data_mut()[start..start + len].copy_from_slice(c.grad.data());
                vec![Some(d)]
            }),
        )
    }

    // ---- per-channel ops on [C, H, W] --------------------------------------

    /// `x[c, :, :] * s[c]`
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let (ch, _, _) = xv.chw();
        assert_eq!(sv.len(), ch, "scale_channels: {ch} channels vs {} scales", sv.len());
        let mut y = xv.clone();
        for c in 0..ch {
            let k = sv.data()[c];
            y.channel_mut(c).iter_mut().for_each(|v| *v *= k);
        }
        self.push(
            y,
            &[x, s],
            Box::new(|c| {
                let (xv, sv) = (c.inputs[0], c.inputs[1]);
                let ch = sv.len();
                let dx = c.needs[0].then(|| {
                    let mut d = c.grad.clone();
                    for k in 0..ch {
                        let s = sv.data()[k];
                        d.channel_mut(k).iter_mut().for_each(|v| *v *= s);
                    }
                    d
                });
                let ds = c.needs[1].then(|| {
                    Tensor::from_fn(sv.shape(), |k| {
                        c.grad.channel(k).iter().zip(xv.channel(k)).map(|(&g, &x)| g * x).sum()
                    })
                });
                vec![dx, ds]
            }),
        )
    }

    /// `x[c, :, :] + b[c]`
    pub fn add_channels(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (ch, _, _) = xv.chw();
        assert_eq!(bv.len(), ch, "add_channels: {ch} channels vs {} biases", bv.len());
        let mut y = xv.clone();
        for c in 0..ch {
            let k = bv.data()[c];
            y.channel_mut(c).iter_mut().for_each(|v| *v += k);
        }
        self.push(
            y,
            &[x, b],
            Box::new(|c| {
                let db = c.needs[1]
                    .then(|| Tensor::from_fn(c.inputs[1].shape(), |k| c.grad.channel(k).iter().copied().sum()));
                vec![c.needs[0].then(|| c.grad.clone()), db]
            }),
        )
    }

    /// Per-channel standardization over the spatial extent.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (ch, h, w) = xv.chw();
        let n = (h * w) as f64;
        let mut y = xv.clone();
        let mut inv_std = Vec::with_capacity(ch);
        for c in 0..ch {
            let d = y.channel_mut(c);
            let mean = d.iter().map(|v| v.to_f64c()).sum::<f64>() / n;
            let var = d.iter().map(|v| (v.to_f64c() - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for v in d.iter_mut() {
                *v = lit((v.to_f64c() - mean) * is);
            }
            inv_std.push(is);
        }
        self.push(
            y,
            &[x],
            Box::new(move |c| {
                let (ch, h, w) = c.out.chw();
                let n = (h * w) as f64;
                let mut dx = Tensor::zeros(&[ch, h, w]);
                for k in 0..ch {
                    let g = c.grad.channel(k);
                    let yk = c.out.channel(k);
                    let gm = g.iter().map(|v| v.to_f64c()).sum::<f64>() / n;
                    let gy = g.iter().zip(yk).map(|(a, b)| a.to_f64c() * b.to_f64c()).sum::<f64>() / n;
                    let is = inv_std[k];
                    for ((d, &gi), &yi) in dx.channel_mut(k).iter_mut().zip(g).zip(yk) {
                        *d = lit(is * (gi.to_f64c() - gm - yi.to_f64c() * gy));
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Per-pixel normalization across channels: `x / sqrt(agg_c x^2 + eps)`
    /// where `agg` is the mean (`mean = true`, pixel norm) or the sum
    /// (unit-length feature vectors).
    pub fn channel_normalize(&mut self, x: Var, eps: f64, mean: bool) -> Var {
        let xv = self.value(x);
        let (ch, h, w) = xv.chw();
        let hw = h * w;
        let div = if mean { ch as f64 } else { 1.0 };
        let mut inv = vec![0.0f64; hw];
        for c in 0..ch {
            for (i, v) in xv.channel(c).iter().enumerate() {
                inv[i] += v.to_f64c().powi(2);
            }
        }
        for v in inv.iter_mut() {
            *v = 1.0 / (*v / div + eps).sqrt();
        }
        let mut y = xv.clone();
        for c in 0..ch {
            for (i, v) in y.channel_mut(c).iter_mut().enumerate() {
                *v = lit(v.to_f64c() * inv[i]);
            }
        }
        self.push(
            y,
            &[x],
            Box::new(move |c| {
                // dy/dx: inv * (g - y * <g, y> / div)
                let (ch, h, w) = c.out.chw();
                let hw = h * w;
                let mut gy = vec![0.0f64; hw];
                for k in 0..ch {
                    for (i, (g, y)) in c.grad.channel(k).iter().zip(c.out.channel(k)).enumerate() {
                        gy[i] += g.to_f64c() * y.to_f64c();
                    }
                }
                let mut dx = Tensor::zeros(&[ch, h, w]);
                for k in 0..ch {
                    let g = c.grad.channel(k);
                    let yk = c.out.channel(k);
                    for (i, d) in dx.channel_mut(k).iter_mut().enumerate() {
                        *d = lit(inv[i] * (g[i].to_f64c() - yk[i].to_f64c() * gy[i] / div));
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn upsample2x(&mut self, x: Var, pad: Padding) -> Var {
        let y = tensor::upsample2x(self.value(x), pad);
        self.push(y, &[x], Box::new(move |c| vec![Some(tensor::upsample2x_backward(c.grad, pad))]))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let y = tensor::avg_pool(self.value(x), factor);
        self.push(y, &[x], Box::new(move |c| vec![Some(tensor::avg_pool_backward(c.grad, factor))]))
    }
}

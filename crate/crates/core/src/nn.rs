//! Layers over [`ParamStore`] and the optimizer.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamGrads, ParamId, ParamStore, Var, PAD};
use crate::math::sqrt;
use crate::rng::{normal, StreamRng};

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut StreamRng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut StreamRng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { String::from(name) } else { format!("{}.{}", self.prefix, name) };
        let mut child = Init { store: self.store, rng: self.rng, prefix };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| normal(self.rng) * std).collect();
        let name = self.full_name(name);
        self.store.add(name, rows, cols, data)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, rows, cols, vec![value; rows * cols])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, inputs: usize, outputs: usize) -> Self {
        init.scoped(name, |i| Linear {
            weight: i.normal("weight", inputs, outputs, 1.0 / sqrt(inputs as f64)),
            bias: i.constant("bias", 1, outputs, 0.0),
            inputs,
            outputs,
        })
    }

    pub fn zeros(init: &mut Init<'_>, name: &str, inputs: usize, outputs: usize) -> Self {
        init.scoped(name, |i| Linear {
            weight: i.constant("weight", inputs, outputs, 0.0),
            bias: i.constant("bias", 1, outputs, 0.0),
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize) -> Self {
        init.scoped(name, |i| LayerNorm { gain: i.constant("gain", 1, width, 1.0), bias: i.constant("bias", 1, width, 0.0) })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must divide into heads");
        init.scoped(name, |i| Attention {
            query: Linear::new(i, "query", width, width),
            key: Linear::new(i, "key", width, width),
            value: Linear::new(i, "value", width, width),
            out: Linear::new(i, "out", width, width),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, context);
        let v = self.value.forward(g, store, context);
        let width = self.query.outputs;
        let head = width / self.heads;
        let scale = 1.0 / sqrt(head as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * head, head), g.slice_cols(k, h * head, head), g.slice_cols(v, h * head, head))
            };
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, store, merged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, hidden: usize) -> Self {
        init.scoped(name, |i| Mlp { fc1: Linear::new(i, "fc1", width, hidden), fc2: Linear::new(i, "fc2", hidden, width) })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        init.scoped(name, |i| Block {
            norm1: LayerNorm::new(i, "norm1", width),
            attn: Attention::new(i, "attn", width, heads),
            norm2: LayerNorm::new(i, "norm2", width),
            mlp: Mlp::new(i, "mlp", width, width * mlp_ratio),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// Square-kernel convolution over `(H·W) × C` feature maps via an im2col gather.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub linear: Linear,
    index: Arc<[usize]>,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let pad = kernel / 2;
        let out_height = (height + 2 * pad - kernel) / stride + 1;
        let out_width = (width + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * in_channels;
        let mut index = Vec::with_capacity(out_height * out_width * cols);
        for oy in 0..out_height {
            for ox in 0..out_width {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width;
                        for c in 0..in_channels {
                            index.push(if inside { (iy as usize * width + ix as usize) * in_channels + c } else { PAD });
                        }
                    }
                }
            }
        }
        let linear = Linear::new(init, name, cols, out_channels);
        Self { linear, index: index.into(), out_height, out_width }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let cols = self.linear.inputs;
        let patches = g.gather(x, self.index.clone(), self.out_height * self.out_width, cols);
        self.linear.forward(g, store, patches)
    }
}

/// Nearest-neighbour 2× upsampling of a `(H·W) × C` map.
pub fn upsample2(g: &mut Graph, x: Var, height: usize, width: usize) -> Var {
    let channels = g.shape(x).1;
    let mut index = Vec::with_capacity(4 * height * width * channels);
    for y in 0..2 * height {
        for xo in 0..2 * width {
            for c in 0..channels {
                index.push(((y / 2) * width + xo / 2) * channels + c);
            }
        }
    }
    g.gather(x, index.into(), 4 * height * width, channels)
}

/// Gather indices converting `(C, H, W)` storage to `(H·W) × C` rows.
pub fn chw_to_rows(channels: usize, height: usize, width: usize) -> Arc<[usize]> {
    let mut index = Vec::with_capacity(channels * height * width);
    for p in 0..height * width {
        for c in 0..channels {
            index.push(c * height * width + p);
        }
    }
    index.into()
}

/// Gather indices converting `(H·W) × C` rows back to `(C, H, W)` storage.
pub fn rows_to_chw(channels: usize, height: usize, width: usize) -> Arc<[usize]> {
    let mut index = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for p in 0..height * width {
            index.push(p * channels + c);
        }
    }
    index.into()
}

/// Adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let bc1 = 1.0 - crate::math::powf(self.beta1, self.step as f64);
        let bc2 = 1.0 - crate::math::powf(self.beta2, self.step as f64);
        for (id, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.first[id];
            let v = &mut self.second[id];
            for (((p, gi), mi), vi) in entry.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (sqrt(vhat) + self.eps);
            }
        }
    }
}

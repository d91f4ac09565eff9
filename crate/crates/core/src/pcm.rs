//! Prototype condition mechanism.
//!
//! Each class owns one `K`-wide prototype row. A single-query cross-attention
//! over all prototypes, queried by the step and class embeddings, reconstructs
//! the pooled encoder features; a self-attention layer mixes the time, class,
//! text and prototype tokens; and a zero-initialized linear map turns the
//! mixed tokens into a residual for the middle blocks.

use alloc::format;
use alloc::sync::Arc;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::math::sqrt;
use crate::nn::{Attention, Init, Linear};
use crate::{Error, Result};

/// How the reconstruction query attends over prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PrototypeAttention {
    /// Softmax over every class prototype.
    #[default]
    Soft,
    /// Only the sample's own class prototype (test mode).
    Masked,
}

#[derive(Debug, Clone)]
pub struct Pcm {
    pub prototypes: ParamId,
    recon_query: Linear,
    recon_key: Linear,
    recon_value: Linear,
    fusion: Attention,
    inject: Linear,
    pub attention: PrototypeAttention,
    classes: usize,
    width: usize,
}

/// Reconstruction output: `F̂` (`1 × K`) and the attention weights (`1 × C`).
#[derive(Debug, Clone, Copy)]
pub struct Reconstruction {
    pub features: Var,
    pub weights: Var,
}

impl Pcm {
    pub fn new(init: &mut Init<'_>, classes: usize, width: usize, heads: usize, attention: PrototypeAttention) -> Self {
        init.scoped("pcm", |i| Pcm {
            prototypes: i.normal("prototypes", classes, width, 1.0 / sqrt(width as f64)),
            recon_query: Linear::new(i, "recon_query", width, width),
            recon_key: Linear::new(i, "recon_key", width, width),
            recon_value: Linear::new(i, "recon_value", width, width),
            fusion: Attention::new(i, "fusion", width, heads),
            inject: Linear::zeros(i, "inject", width, width),
            attention,
            classes,
            width,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inject_layer(&self) -> &Linear {
        &self.inject
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes {
            return Err(Error::invalid("class", format!("{class} outside [0, {})", self.classes)));
        }
        Ok(())
    }

    pub fn prototype_row(&self, g: &mut Graph, store: &ParamStore, class: usize) -> Result<Var> {
        self.check_class(class)?;
        let table = g.param(store, self.prototypes);
        let k = self.width;
        let index: Arc<[usize]> = (class * k..(class + 1) * k).collect();
        Ok(g.gather(table, index, 1, k))
    }

    /// Cross-attention from `time + class` onto the prototype rows.
    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, time: Var, class_emb: Var, class: usize) -> Result<Reconstruction> {
        self.check_class(class)?;
        let (keys_src, rows) = match self.attention {
            PrototypeAttention::Soft => (g.param(store, self.prototypes), self.classes),
            PrototypeAttention::Masked => (self.prototype_row(g, store, class)?, 1),
        };
        let q_in = g.add(time, class_emb);
        let q = self.recon_query.forward(g, store, q_in);
        let k = self.recon_key.forward(g, store, keys_src);
        let v = self.recon_value.forward(g, store, keys_src);
        let scores = g.matmul_t(q, false, k, true);
        let scores = g.scale(scores, 1.0 / sqrt(self.width as f64));
        let weights = g.softmax_rows(scores);
        debug_assert_eq!(g.shape(weights), (1, rows));
        let features = g.matmul(weights, v);
        Ok(Reconstruction { features, weights })
    }

    /// Self-attention over `[time, class, text, prototype]` with a residual path.
    /// No positional encoding is applied, so the map is permutation-equivariant.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, tokens: [Var; 4]) -> Result<Var> {
        for t in tokens {
            if g.shape(t) != (1, self.width) {
                return Err(Error::shape(format!("(1, {})", self.width), format!("{:?}", g.shape(t))));
            }
        }
        let x = g.concat_rows(&tokens);
        let a = self.fusion.forward(g, store, x, x);
        Ok(g.add(x, a))
    }

    /// Per-token zero-initialized projection of the fused tokens.
    pub fn inject(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        if g.shape(fused).1 != self.width {
            return Err(Error::shape(format!("width {}", self.width), format!("{}", g.shape(fused).1)));
        }
        Ok(self.inject.forward(g, store, fused))
    }
}

/// Mean squared error between reconstructed and encoder features.
pub fn recon_loss(reconstructed: &[f64], encoded: &[f64]) -> Result<f64> {
    if reconstructed.len() != encoded.len() {
        return Err(Error::shape(format!("width {}", encoded.len()), format!("{}", reconstructed.len())));
    }
    let n = encoded.len().max(1) as f64;
    Ok(reconstructed.iter().zip(encoded).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Components of the composite objective `l_diffusion + α·l_recon`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub l_diffusion: f64,
    pub l_recon: f64,
    pub alpha: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_diffusion: f64, l_recon: f64, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::invalid("alpha", format!("{alpha} is negative")));
        }
        Ok(Self { l_diffusion, l_recon, alpha, l_total: l_diffusion + alpha * l_recon })
    }

    pub fn additivity_gap(&self) -> f64 {
        crate::math::abs(self.l_total - (self.l_diffusion + self.alpha * self.l_recon))
    }
}

pub fn vap_loss(eps_pred: &[f64], eps: &[f64], reconstructed: &[f64], encoded: &[f64], alpha: f64) -> Result<LossBreakdown> {
    if eps_pred.len() != eps.len() {
        return Err(Error::shape(format!("{} noise elements", eps.len()), format!("{}", eps_pred.len())));
    }
    let n = eps.len().max(1) as f64;
    let l_d = eps_pred.iter().zip(eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    LossBreakdown::new(l_d, recon_loss(reconstructed, encoded)?, alpha)
}

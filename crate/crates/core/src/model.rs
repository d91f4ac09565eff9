//! The conditioned noise predictor: denoiser plus optional prototype branch.

use alloc::vec::Vec;

use crate::autograd::{Graph, ParamStore, Var};
use crate::denoiser::{ConditionSet, Denoiser, DenoiserConfig, EncoderOutput};
use crate::nn::Init;
use crate::pcm::{Pcm, PrototypeAttention, Reconstruction};
use crate::rng::{derive, streams};
use crate::{LatentTensor, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    /// Attach the prototype branch.
    pub pcm: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub prototype_attention: PrototypeAttention,
    pub fusion_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { denoiser: DenoiserConfig::default(), pcm: true, prototype_attention: PrototypeAttention::Soft, fusion_heads: 4 }
    }
}

/// Which path a forward pass takes through the prototype branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Prototype residual applied whenever the branch exists and a text token is present.
    Full,
    /// Prototype branch skipped entirely.
    Detached,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Noise prediction, `1 × CHW`.
    pub eps: Var,
    pub encoder: EncoderOutput,
    pub reconstruction: Option<Reconstruction>,
    /// Residual added at the middle-block input (`1 × K`).
    pub injection: Option<Var>,
    /// Per-token output of the zero-initialized projection (`4 × K`).
    pub injected_tokens: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct VapModel {
    pub config: ModelConfig,
    pub denoiser: Denoiser,
    pub pcm: Option<Pcm>,
    pub params: ParamStore,
}

impl VapModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.denoiser.validate()?;
        let mut params = ParamStore::new();
        let mut rng = derive(seed, streams::INIT, 0);
        let mut init = Init::new(&mut params, &mut rng);
        let denoiser = Denoiser::new(&mut init, config.denoiser.clone())?;
        let pcm = config.pcm.then(|| {
            Pcm::new(
                &mut init,
                config.denoiser.class_count,
                config.denoiser.embed_dim,
                config.fusion_heads,
                config.prototype_attention,
            )
        });
        Ok(Self { config, denoiser, pcm, params })
    }

    /// The prototype branch runs only alongside a text condition.
    pub fn pcm_active(&self, cond: &ConditionSet) -> bool {
        self.pcm.is_some() && !cond.text_tokens.is_empty()
    }

    /// Builds the forward pass on `g`. `with_reconstruction` adds the prototype
    /// reconstruction head (training only).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: &LatentTensor,
        cond: &ConditionSet,
        branch: Branch,
        with_reconstruction: bool,
    ) -> Result<ModelOutput> {
        let d = &self.denoiser;
        let (c, h, w) = latent.shape();
        let expected = (d.config.channels, d.config.height, d.config.width);
        if (c, h, w) != expected {
            return Err(crate::Error::Shape {
                expected: alloc::format!("{expected:?}"),
                got: alloc::format!("{:?}", (c, h, w)),
            });
        }
        let x = g.constant(1, latent.len(), latent.data().to_vec());
        let emb = d.embed_inputs(g, store, x, cond)?;
        let encoder = d.encode(g, store, emb.tokens);
        let mut reconstruction = None;
        let mut injection = None;
        let mut injected_tokens = None;
        if let (Some(pcm), Branch::Full, Some(text)) = (&self.pcm, branch, emb.text) {
            if with_reconstruction {
                reconstruction = Some(pcm.reconstruct(g, store, emb.time, emb.class, cond.class)?);
            }
            let proto = pcm.prototype_row(g, store, cond.class)?;
            let fused = pcm.fuse(g, store, [emb.time, emb.class, text, proto])?;
            let tokens = pcm.inject(g, store, fused)?;
            injected_tokens = Some(tokens);
            injection = Some(g.mean_rows(tokens));
        }
        let eps = d.decode(g, store, &encoder, injection, cond.prefix_len());
        Denoiser::check_finite(g, &[("encoder blocks", encoder.tokens), ("decoder head", eps)])?;
        Ok(ModelOutput { eps, encoder, reconstruction, injection, injected_tokens })
    }

    pub fn predict_noise(&self, latent: &LatentTensor, cond: &ConditionSet) -> Result<LatentTensor> {
        self.predict_with(latent, cond, Branch::Full)
    }

    pub fn predict_with(&self, latent: &LatentTensor, cond: &ConditionSet, branch: Branch) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &self.params, latent, cond, branch, false)?;
        self.denoiser.to_latent(&g, out.eps)
    }

    /// `F̂` and the prototype attention weights for step `t` and class `c`.
    pub fn reconstruct_features(&self, t: usize, class: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let pcm = self.pcm.as_ref().ok_or(crate::Error::UnsupportedMode {
            mode: "no-prototype",
            what: "feature reconstruction",
        })?;
        let mut g = Graph::new();
        let time = self.denoiser.time_embedding(&mut g, &self.params, t);
        let class_emb = self.denoiser.class_embedding(&mut g, &self.params, class);
        let r = pcm.reconstruct(&mut g, &self.params, time, class_emb, class)?;
        Ok((g.value(r.features).to_vec(), g.value(r.weights).to_vec()))
    }
}

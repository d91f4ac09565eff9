//! Patch-token transformer noise predictor with encoder, middle and decoder
//! stages joined by long skip connections.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::math::{cos, exp, ln, sin};
use crate::nn::{Block, Init, LayerNorm, Linear};
use crate::{Error, LatentTensor, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub middle_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub class_count: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            patch_size: 2,
            embed_dim: 64,
            encoder_depth: 2,
            middle_depth: 1,
            decoder_depth: 2,
            heads: 4,
            class_count: 3,
            text_dim: 32,
            mlp_ratio: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("class_count", self.class_count),
            ("text_dim", self.text_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::invalid(
                "patch_size",
                format!("{}x{} is not divisible by patch size {}", self.height, self.width, self.patch_size),
            ));
        }
        if self.encoder_depth != self.decoder_depth {
            return Err(Error::invalid(
                "decoder_depth",
                format!("{} must equal encoder_depth {} for skip pairing", self.decoder_depth, self.encoder_depth),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid("heads", format!("{} does not divide embed_dim {}", self.heads, self.embed_dim)));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::invalid("embed_dim", "sinusoidal time embedding needs an even width"));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Per-sample conditioning: step, class and optional text-side vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub t: usize,
    pub class: usize,
    /// Text embeddings, each `text_dim` wide.
    pub text_tokens: Vec<Vec<f64>>,
    /// Additional caller-supplied prefix tokens, `text_dim` wide.
    pub extra_tokens: Vec<Vec<f64>>,
}

impl ConditionSet {
    pub fn class_only(t: usize, class: usize) -> Self {
        Self { t, class, text_tokens: Vec::new(), extra_tokens: Vec::new() }
    }

    pub fn with_text(t: usize, class: usize, text: Vec<f64>) -> Self {
        Self { t, class, text_tokens: alloc::vec![text], extra_tokens: Vec::new() }
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        if self.class >= cfg.class_count {
            return Err(Error::invalid("class", format!("{} outside [0, {})", self.class, cfg.class_count)));
        }
        if self.t == 0 {
            return Err(Error::invalid("t", "step indices start at 1"));
        }
        for tok in self.text_tokens.iter().chain(&self.extra_tokens) {
            if tok.len() != cfg.text_dim {
                return Err(Error::shape(format!("text token width {}", cfg.text_dim), format!("{}", tok.len())));
            }
        }
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        2 + self.text_tokens.len() + self.extra_tokens.len()
    }
}

/// `[sin(t·f_i), cos(t·f_i)]` with geometrically spaced frequencies.
pub fn sinusoidal_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = alloc::vec![0.0; width];
    for i in 0..half {
        let freq = exp(-ln(10_000.0) * i as f64 / half as f64);
        out[i] = sin(t * freq);
        out[half + i] = cos(t * freq);
    }
    out
}

/// Encoder-stage output held on a graph.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: Var,
    /// Output of each encoder block, in block order.
    pub skips: Vec<Var>,
    /// Mean over `tokens` rows (`1 × K`).
    pub pooled: Var,
}

/// Embedded inputs plus the condition vectors other components reuse.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    pub tokens: Var,
    pub time: Var,
    pub class: Var,
    /// First projected text token, if any.
    pub text: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    time_fc1: Linear,
    time_fc2: Linear,
    class_embed: ParamId,
    text_proj: Linear,
    encoder: Vec<Block>,
    middle: Vec<Block>,
    skip_proj: Vec<Linear>,
    decoder: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    patch_index: Arc<[usize]>,
    unpatch_index: Arc<[usize]>,
}

/// Intermediate values recorded during an untaped forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// The skip tensor each decoder block received, in decoder order.
    pub decoder_skips: Vec<Vec<f64>>,
    pub output: LatentTensor,
}

impl Denoiser {
    pub fn new(init: &mut Init<'_>, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let k = config.embed_dim;
        let built = init.scoped("denoiser", |i| {
            let patch_embed = Linear::new(i, "patch_embed", config.patch_width(), k);
            let pos_embed = i.normal("pos_embed", config.patch_count(), k, 0.02);
            let time_fc1 = Linear::new(i, "time_fc1", k, k);
            let time_fc2 = Linear::new(i, "time_fc2", k, k);
            let class_embed = i.normal("class_embed", config.class_count, k, 0.02 * 10.0);
            let text_proj = Linear::new(i, "text_proj", config.text_dim, k);
            let encoder = (0..config.encoder_depth)
                .map(|d| Block::new(i, &format!("encoder.{d}"), k, config.heads, config.mlp_ratio))
                .collect();
            let middle = (0..config.middle_depth)
                .map(|d| Block::new(i, &format!("middle.{d}"), k, config.heads, config.mlp_ratio))
                .collect();
            let skip_proj = (0..config.decoder_depth).map(|d| Linear::new(i, &format!("skip.{d}"), 2 * k, k)).collect();
            let decoder = (0..config.decoder_depth)
                .map(|d| Block::new(i, &format!("decoder.{d}"), k, config.heads, config.mlp_ratio))
                .collect();
            let final_norm = LayerNorm::new(i, "final_norm", k);
            let head = Linear::new(i, "head", k, config.patch_width());
            (patch_embed, pos_embed, time_fc1, time_fc2, class_embed, text_proj, encoder, middle, skip_proj, decoder, final_norm, head)
        });
        let (patch_embed, pos_embed, time_fc1, time_fc2, class_embed, text_proj, encoder, middle, skip_proj, decoder, final_norm, head) =
            built;
        let (patch_index, unpatch_index) = patch_indices(&config);
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            time_fc1,
            time_fc2,
            class_embed,
            text_proj,
            encoder,
            middle,
            skip_proj,
            decoder,
            final_norm,
            head,
            patch_index,
            unpatch_index,
        })
    }

    fn check_latent(&self, latent: &LatentTensor) -> Result<()> {
        let c = &self.config;
        if latent.shape() != (c.channels, c.height, c.width) {
            return Err(Error::shape(format!("({}, {}, {})", c.channels, c.height, c.width), format!("{:?}", latent.shape())));
        }
        Ok(())
    }

    /// Time embedding `1 × K` for step `t`.
    pub fn time_embedding(&self, g: &mut Graph, store: &ParamStore, t: usize) -> Var {
        let k = self.config.embed_dim;
        let sinus = g.constant(1, k, sinusoidal_embedding(t as f64, k));
        let h = self.time_fc1.forward(g, store, sinus);
        let h = g.silu(h);
        self.time_fc2.forward(g, store, h)
    }

    /// Class embedding `1 × K`.
    pub fn class_embedding(&self, g: &mut Graph, store: &ParamStore, class: usize) -> Var {
        let k = self.config.embed_dim;
        let table = g.param(store, self.class_embed);
        let index: Arc<[usize]> = (class * k..(class + 1) * k).collect();
        g.gather(table, index, 1, k)
    }

    /// Builds `[time, class, text…, extra…, patches…]` as an `n × K` token matrix.
    pub fn embed_inputs(&self, g: &mut Graph, store: &ParamStore, latent: Var, cond: &ConditionSet) -> Result<Embedded> {
        cond.validate(&self.config)?;
        let cfg = &self.config;
        let (rows, cols) = g.shape(latent);
        if rows * cols != cfg.latent_len() {
            return Err(Error::shape(format!("{} latent elements", cfg.latent_len()), format!("{}", rows * cols)));
        }
        let patches = g.gather(latent, self.patch_index.clone(), cfg.patch_count(), cfg.patch_width());
        let patches = self.patch_embed.forward(g, store, patches);
        let pos = g.param(store, self.pos_embed);
        let patches = g.add(patches, pos);

        let time = self.time_embedding(g, store, cond.t);
        let class = self.class_embedding(g, store, cond.class);
        let mut parts = alloc::vec![time, class];
        let mut text = None;
        for tok in cond.text_tokens.iter().chain(&cond.extra_tokens) {
            let raw = g.constant(1, cfg.text_dim, tok.clone());
            let projected = self.text_proj.forward(g, store, raw);
            text.get_or_insert(projected);
            parts.push(projected);
        }
        parts.push(patches);
        let tokens = g.concat_rows(&parts);
        Ok(Embedded { tokens, time, class, text: if cond.text_tokens.is_empty() { None } else { text } })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> EncoderOutput {
        let mut x = tokens;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(g, store, x);
            skips.push(x);
        }
        let pooled = g.mean_rows(x);
        EncoderOutput { tokens: x, skips, pooled }
    }

    /// Middle and decoder stages plus the output head. `injection`, when given,
    /// is a `1 × K` residual added to every token entering the middle blocks.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncoderOutput,
        injection: Option<Var>,
        prefix_len: usize,
    ) -> Var {
        self.decode_traced(g, store, enc, injection, prefix_len, &mut |_, _| {})
    }

    fn decode_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncoderOutput,
        injection: Option<Var>,
        prefix_len: usize,
        on_skip: &mut dyn FnMut(&mut Graph, Var),
    ) -> Var {
        let mut x = enc.tokens;
        if let Some(r) = injection {
            x = g.add_row(x, r);
        }
        for block in &self.middle {
            x = block.forward(g, store, x);
        }
        let depth = self.decoder.len();
        for (i, (block, proj)) in self.decoder.iter().zip(&self.skip_proj).enumerate() {
            let skip = enc.skips[depth - 1 - i];
            on_skip(g, skip);
            let joined = g.concat_cols(&[x, skip]);
            x = proj.forward(g, store, joined);
            x = block.forward(g, store, x);
        }
        let x = self.final_norm.forward(g, store, x);
        let rows = g.shape(x).0;
        let patches = g.slice_rows(x, prefix_len, rows - prefix_len);
        let out = self.head.forward(g, store, patches);
        g.gather(out, self.unpatch_index.clone(), 1, self.config.latent_len())
    }

    /// Full forward pass on a graph; returns the `1 × CHW` noise prediction and encoder output.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: &LatentTensor,
        cond: &ConditionSet,
    ) -> Result<(Var, EncoderOutput, Embedded)> {
        self.check_latent(latent)?;
        let x = g.constant(1, latent.len(), latent.data().to_vec());
        let emb = self.embed_inputs(g, store, x, cond)?;
        let enc = self.encode(g, store, emb.tokens);
        let out = self.decode(g, store, &enc, None, cond.prefix_len());
        Ok((out, enc, emb))
    }

    pub fn predict_noise(&self, store: &ParamStore, latent: &LatentTensor, cond: &ConditionSet) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let (out, _, _) = self.forward(&mut g, store, latent, cond)?;
        self.to_latent(&g, out)
    }

    /// Forward pass that records the skip each decoder block receives, optionally
    /// zeroing the retained output of one encoder block first.
    pub fn forward_traced(
        &self,
        store: &ParamStore,
        latent: &LatentTensor,
        cond: &ConditionSet,
        zero_encoder_block: Option<usize>,
    ) -> Result<ForwardTrace> {
        self.check_latent(latent)?;
        let mut g = Graph::new();
        let x = g.constant(1, latent.len(), latent.data().to_vec());
        let emb = self.embed_inputs(&mut g, store, x, cond)?;
        let mut enc = self.encode(&mut g, store, emb.tokens);
        if let Some(b) = zero_encoder_block {
            let (r, c) = g.shape(enc.skips[b]);
            enc.skips[b] = g.constant(r, c, alloc::vec![0.0; r * c]);
        }
        let mut skips = Vec::new();
        let out = self.decode_traced(&mut g, store, &enc, None, cond.prefix_len(), &mut |g, v| {
            skips.push(g.value(v).to_vec())
        });
        Ok(ForwardTrace { decoder_skips: skips, output: self.to_latent(&g, out)? })
    }

    pub fn to_latent(&self, g: &Graph, out: Var) -> Result<LatentTensor> {
        let c = &self.config;
        LatentTensor::new(c.channels, c.height, c.width, g.value(out).to_vec()).map_err(|e| match e {
            Error::Numeric { reason, .. } => Error::Numeric { location: "denoiser output head".into(), reason },
            other => other,
        })
    }

    /// Finds the first graph stage with non-finite values, for error reporting.
    pub fn check_finite(g: &Graph, stages: &[(&str, Var)]) -> Result<()> {
        for (name, v) in stages {
            if g.value(*v).iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric { location: (*name).into(), reason: "non-finite activation".into() });
            }
        }
        Ok(())
    }
}

/// Flat-index maps between `(C, H, W)` latents and `patches × (C·p·p)` tokens.
fn patch_indices(cfg: &DenoiserConfig) -> (Arc<[usize]>, Arc<[usize]>) {
    let p = cfg.patch_size;
    let (h, w) = (cfg.height, cfg.width);
    let cols = w / p;
    let pw = cfg.patch_width();
    let mut fwd = alloc::vec![0usize; cfg.latent_len()];
    let mut inv = alloc::vec![0usize; cfg.latent_len()];
    for py in 0..h / p {
        for px in 0..cols {
            let token = py * cols + px;
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        let feature = (c * p + dy) * p + dx;
                        let src = (c * h + py * p + dy) * w + px * p + dx;
                        fwd[token * pw + feature] = src;
                        inv[src] = token * pw + feature;
                    }
                }
            }
        }
    }
    (fwd.into(), inv.into())
}

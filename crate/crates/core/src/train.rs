//! One optimization step of the composite objective, and ancestral sampling.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, ParamGrads, ParamStore, Var};
use crate::denoiser::ConditionSet;
use crate::model::{Branch, VapModel};
use crate::nn::Adam;
use crate::pcm::LossBreakdown;
use crate::rng::{derive, normal_tensor, streams, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::{Error, LatentTensor, Result};

/// A clean latent with its class and optional description embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub latent: LatentTensor,
    pub class: usize,
    pub text: Option<Vec<f64>>,
}

/// A training example after noising to step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedExample {
    pub noisy: LatentTensor,
    pub eps: LatentTensor,
    pub cond: ConditionSet,
}

impl NoisedExample {
    pub fn new(schedule: &NoiseSchedule, ex: &TrainExample, t: usize, eps: LatentTensor) -> Result<Self> {
        let noisy = schedule.forward_diffuse(&ex.latent, t, &eps)?;
        let cond = match &ex.text {
            Some(text) => ConditionSet::with_text(t, ex.class, text.clone()),
            None => ConditionSet::class_only(t, ex.class),
        };
        Ok(Self { noisy, eps, cond })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectiveOptions {
    pub alpha: f64,
    /// When false the reconstruction head is never built and contributes nothing.
    pub recon_enabled: bool,
}

/// Builds the per-example objective `mse(ε̂, ε) + α·mse(F̂, sg(F_e))` on a fresh graph.
pub fn objective(
    model: &VapModel,
    store: &ParamStore,
    ex: &NoisedExample,
    opts: ObjectiveOptions,
) -> Result<(Graph, Var, LossBreakdown)> {
    if !(opts.alpha >= 0.0) {
        return Err(Error::invalid("alpha", format!("{} is negative", opts.alpha)));
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &ex.noisy, &ex.cond, Branch::Full, opts.recon_enabled)?;
    let target = g.constant(1, ex.eps.len(), ex.eps.data().to_vec());
    let l_d = g.mse(out.eps, target);
    let (total, l_r) = match out.reconstruction {
        Some(r) => {
            let fe = g.detach(out.encoder.pooled);
            let l_r = g.mse(r.features, fe);
            let weighted = g.scale(l_r, opts.alpha);
            (g.add(l_d, weighted), g.scalar(l_r))
        }
        None => (l_d, 0.0),
    };
    let breakdown = LossBreakdown::new(g.scalar(l_d), l_r, opts.alpha)?;
    Ok((g, total, breakdown))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainOptions {
    pub objective: ObjectiveOptions,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub params: ParamStore,
}

impl Ema {
    pub fn update(&mut self, live: &ParamStore) {
        let d = self.decay;
        for (e, p) in self.params.entries_mut().iter_mut().zip(live.entries()) {
            e.data.iter_mut().zip(&p.data).for_each(|(a, b)| *a = d * *a + (1.0 - d) * b);
        }
    }
}

/// Owns parameters, optimizer state and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: VapModel,
    pub optimizer: Adam,
    pub schedule: NoiseSchedule,
    pub options: TrainOptions,
    pub step: u64,
    pub ema: Option<Ema>,
}

impl Trainer {
    pub fn new(model: VapModel, schedule: NoiseSchedule, options: TrainOptions) -> Result<Self> {
        if options.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(options.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        let optimizer = Adam::new(&model.params, options.lr);
        Ok(Self { model, optimizer, schedule, options, step: 0, ema: None })
    }

    /// Tracks an EMA of the parameters from the current values onward.
    pub fn enable_ema(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid("ema_decay", format!("{decay} is outside [0, 1)")));
        }
        self.ema = Some(Ema { decay, params: self.model.params.clone() });
        Ok(())
    }

    /// The model with EMA parameters when enabled, otherwise the live one.
    pub fn sampling_model(&self) -> VapModel {
        let mut m = self.model.clone();
        if let Some(ema) = &self.ema {
            m.params = ema.params.clone();
        }
        m
    }

    /// Draws this step's batch: example index, uniform `t ∈ [1, T]` and noise per slot.
    pub fn draw_batch(&self, data: &[TrainExample]) -> Result<Vec<NoisedExample>> {
        if data.is_empty() {
            return Err(Error::invalid("dataset", "no training examples"));
        }
        let mut rng: StreamRng = derive(self.options.seed, streams::BATCH, self.step);
        (0..self.options.batch_size)
            .map(|_| {
                let ex = &data[rng.random_range(0..data.len())];
                let t = rng.random_range(1..=self.schedule.steps());
                let (c, h, w) = ex.latent.shape();
                let eps = normal_tensor(&mut rng, c, h, w);
                NoisedExample::new(&self.schedule, ex, t, eps)
            })
            .collect()
    }

    /// Batch-mean loss and gradients at the current parameters, without updating.
    pub fn loss_and_grads(&self, batch: &[NoisedExample]) -> Result<(LossBreakdown, ParamGrads)> {
        let mut grads = ParamGrads::zeros_like(&self.model.params);
        let (mut sum_d, mut sum_r, mut sum_total) = (0.0, 0.0, 0.0);
        for ex in batch {
            let (g, total, parts) = objective(&self.model, &self.model.params, ex, self.options.objective)?;
            grads.add_assign(&g.backward(total, self.model.params.len()));
            sum_d += parts.l_diffusion;
            sum_r += parts.l_recon;
            sum_total += g.scalar(total);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let loss = LossBreakdown::new(sum_d / n, sum_r / n, self.options.objective.alpha)?;
        if !loss.l_total.is_finite() {
            return Err(Error::Numeric { location: format!("training step {}", self.step), reason: "non-finite loss".into() });
        }
        let gap = crate::math::abs(loss.l_total - sum_total / n);
        if gap > 1e-9 || loss.additivity_gap() > 1e-9 {
            return Err(Error::Numeric {
                location: format!("training step {}", self.step),
                reason: format!("loss additivity violated by {gap:e}"),
            });
        }
        Ok((loss, grads))
    }

    pub fn step(&mut self, data: &[TrainExample]) -> Result<LossBreakdown> {
        let batch = self.draw_batch(data)?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        self.optimizer.update(&mut self.model.params, &grads);
        if let Some(ema) = &mut self.ema {
            ema.update(&self.model.params);
        }
        self.step += 1;
        Ok(loss)
    }
}

/// Runs the full reverse chain from standard-normal noise.
pub fn sample_latent(
    model: &VapModel,
    schedule: &NoiseSchedule,
    class: usize,
    text: Option<&[f64]>,
    rng: &mut StreamRng,
) -> Result<LatentTensor> {
    let cfg = &model.config.denoiser;
    let mut x = normal_tensor(rng, cfg.channels, cfg.height, cfg.width);
    for t in (1..=schedule.steps()).rev() {
        let cond = match text {
            Some(v) => ConditionSet::with_text(t, class, v.to_vec()),
            None => ConditionSet::class_only(t, class),
        };
        let eps = model.predict_noise(&x, &cond)?;
        let z = normal_tensor(rng, cfg.channels, cfg.height, cfg.width);
        x = schedule.reverse_step(&x, &eps, t, &z)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::model::ModelConfig;

    fn tiny_model(pcm: bool) -> VapModel {
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                channels: 1,
                height: 4,
                width: 4,
                patch_size: 2,
                embed_dim: 8,
                encoder_depth: 1,
                middle_depth: 1,
                decoder_depth: 1,
                heads: 2,
                class_count: 2,
                text_dim: 4,
                mlp_ratio: 2,
            },
            pcm,
            fusion_heads: 2,
            ..ModelConfig::default()
        };
        VapModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn sampling_chain_is_finite_and_shaped() {
        let model = tiny_model(true);
        let schedule = NoiseSchedule::linear_default(5).unwrap();
        let mut rng = crate::rng::seeded(1);
        let x = sample_latent(&model, &schedule, 1, Some(&[0.5, 0.5, 0.5, 0.5]), &mut rng).unwrap();
        assert_eq!(x.shape(), (1, 4, 4));
        let x = sample_latent(&model, &schedule, 0, None, &mut rng).unwrap();
        assert_eq!(x.shape(), (1, 4, 4));
    }

    #[test]
    fn negative_alpha_rejected() {
        let model = tiny_model(true);
        let schedule = NoiseSchedule::linear_default(5).unwrap();
        let ex = TrainExample { latent: LatentTensor::zeros(1, 4, 4), class: 0, text: Some(alloc::vec![0.0; 4]) };
        let noised = NoisedExample::new(&schedule, &ex, 2, LatentTensor::zeros(1, 4, 4)).unwrap();
        let opts = ObjectiveOptions { alpha: -1.0, recon_enabled: true };
        assert!(objective(&model, &model.params, &noised, opts).is_err());
    }

    #[test]
    fn step_counter_and_determinism() {
        let schedule = NoiseSchedule::linear_default(10).unwrap();
        let data: Vec<TrainExample> = (0..3)
            .map(|i| TrainExample {
                latent: LatentTensor::filled(1, 4, 4, i as f64 * 0.3 - 0.3),
                class: i % 2,
                text: Some(alloc::vec![i as f64; 4]),
            })
            .collect();
        let opts = TrainOptions { objective: ObjectiveOptions { alpha: 0.1, recon_enabled: true }, batch_size: 2, lr: 1e-3, seed: 9 };
        let mut a = Trainer::new(tiny_model(true), schedule.clone(), opts).unwrap();
        let mut b = Trainer::new(tiny_model(true), schedule, opts).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step(&data).unwrap(), b.step(&data).unwrap());
        }
        assert_eq!(a.step, 3);
        assert_eq!(a.model.params, b.model.params);
    }
}

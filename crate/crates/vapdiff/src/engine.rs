//! Training, generation, ablation and downstream runs over a dataset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vapdiff_core::bank::{PromptBank, SplitTag};
use vapdiff_core::classifier::{downstream_eval, extract_features, train_toy_extractor, CnnConfig, CnnExtractor, DownstreamComparison, LabelledImage};
use vapdiff_core::codec::{Codec, CodecMode, FitOptions};
use vapdiff_core::metrics::MetricReport;
use vapdiff_core::model::VapModel;
use vapdiff_core::pcm::LossBreakdown;
use vapdiff_core::rng::{derive, streams};
use vapdiff_core::toy::ToySample;
use vapdiff_core::train::{sample_latent, ObjectiveOptions, TrainExample, TrainOptions, Trainer};
use vapdiff_core::vaps::encode_description;
use vapdiff_core::Image;

use crate::checkpoint::{Checkpoint, CheckpointManifest};
use crate::config::RunConfig;
use crate::dataset::{read_jsonl, write_jsonl, write_png, Dataset, Split};
use crate::error::{Error, Result};
use crate::report;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoVaps,
    NoPcm,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoVaps => "no_vaps",
            Arm::NoPcm => "no_pcm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Arm::Full),
            "no_vaps" => Ok(Arm::NoVaps),
            "no_pcm" => Ok(Arm::NoPcm),
            other => Err(vapdiff_core::Error::invalid("arms", format!("unknown arm {other:?}; expected full, no_vaps or no_pcm")).into()),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|a| !a.trim().is_empty()).map(Self::parse).collect()
    }

    /// The run config this arm trains under.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Arm::Full => {}
            Arm::NoVaps => {
                c.train.vaps = false;
                c.model.pcm = false;
            }
            Arm::NoPcm => c.model.pcm = false,
        }
        c
    }
}

/// The prototype branch only acts on description tokens, so removing it is
/// meaningful only while descriptions are in use.
pub fn validate_arms(arms: &[Arm], cfg: &RunConfig) -> Result<()> {
    if arms.is_empty() {
        return Err(vapdiff_core::Error::invalid("arms", "at least one arm is required").into());
    }
    for (i, a) in arms.iter().enumerate() {
        if arms[..i].contains(a) {
            return Err(vapdiff_core::Error::invalid("arms", format!("{} listed twice", a.name())).into());
        }
    }
    if arms.contains(&Arm::NoPcm) && !cfg.train.vaps {
        return Err(vapdiff_core::Error::invalid("arms", "no_pcm requires VAPS descriptions (train.vaps = true)").into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub class: usize,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub train: Vec<Item>,
    pub test: Vec<Item>,
}

impl Corpus {
    pub fn load(ds: &Dataset) -> Result<Self> {
        let items = |split| -> Result<Vec<Item>> {
            Ok(ds.load_split(split)?.into_iter().map(|(e, image)| Item { id: e.image_id, class: e.class, image }).collect())
        };
        let corpus = Self { class_names: ds.class_names.clone(), train: items(Split::Train)?, test: items(Split::Test)? };
        if corpus.train.is_empty() {
            return Err(Error::config(format!("dataset {} has no training images", ds.root.display())));
        }
        if let Some(bad) = corpus.train.iter().chain(&corpus.test).find(|i| i.image.shape() != corpus.image_shape()) {
            return Err(Error::config(format!("image {} is {:?}, expected {:?}", bad.id, bad.image.shape(), corpus.image_shape())));
        }
        Ok(corpus)
    }

    pub fn from_toy(train: &[ToySample], test: &[ToySample]) -> Self {
        let items = |s: &[ToySample]| s.iter().map(|t| Item { id: t.id.clone(), class: t.class, image: t.image.clone() }).collect();
        Self {
            class_names: vapdiff_core::toy::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            train: items(train),
            test: items(test),
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.train[0].image.shape()
    }

    pub fn train_images(&self) -> Vec<Image> {
        self.train.iter().map(|i| i.image.clone()).collect()
    }

    pub fn labelled(items: &[Item]) -> Vec<LabelledImage> {
        items.iter().map(|i| LabelledImage { image: i.image.clone(), label: i.class }).collect()
    }
}

/// Bank of ground-truth descriptions for toy samples: train seen, test unseen.
pub fn toy_bank(train: &[ToySample], test: &[ToySample]) -> Result<PromptBank> {
    let mut bank = PromptBank::new("toy", vapdiff_core::toy::CLASS_NAMES.len());
    for (tag, samples) in [(SplitTag::Seen, train), (SplitTag::Unseen, test)] {
        for s in samples {
            let mut r = vapdiff_core::bank::DescriptionRecord::new(s.class, s.id.clone(), s.description.clone());
            r.split_tag = tag;
            bank.insert(r)?;
        }
    }
    Ok(bank)
}

pub fn fit_codec(cfg: &RunConfig, images: &[Image]) -> Result<Codec> {
    let shape = images.first().ok_or_else(|| Error::config("no images to fit the codec on"))?.shape();
    let mut codec = Codec::new(cfg.codec.spec(shape)?, cfg.train.seed)?;
    if cfg.codec.mode == CodecMode::Autoencoder {
        let opts = FitOptions { lr: cfg.codec.lr, batch_size: cfg.codec.batch_size, seed: cfg.train.seed };
        let history = codec.fit(images, cfg.codec.epochs, opts)?;
        log::info!("codec reconstruction MSE {:.5} -> {:.5}", history[0], history[history.len() - 1]);
    }
    Ok(codec)
}

/// Latents with each image's own description when descriptions are in use.
pub fn training_examples(cfg: &RunConfig, codec: &Codec, items: &[Item], bank: Option<&PromptBank>) -> Result<Vec<TrainExample>> {
    let encoder = cfg.text.encoder()?;
    items
        .iter()
        .map(|item| {
            let text = if cfg.train.vaps {
                let bank = bank.ok_or_else(|| Error::config("train.vaps is on but no prompt bank was given"))?;
                let rec = bank.find(item.class, &item.id).ok_or_else(|| {
                    Error::config(format!("image {} has no description in bank {}; run `describe` or set train.vaps = false", item.id, bank.id))
                })?;
                Some(encode_description(&rec.text, &encoder)?.vector)
            } else {
                None
            };
            Ok(TrainExample { latent: codec.encode_image(&item.image)?, class: item.class, text })
        })
        .collect()
}

pub fn build_trainer(cfg: &RunConfig, codec: &Codec, classes: usize) -> Result<Trainer> {
    let model = VapModel::new(cfg.model_for(codec.spec.latent, classes), cfg.train.seed)?;
    let recon_enabled = model.pcm.is_some();
    let options = TrainOptions {
        objective: ObjectiveOptions { alpha: cfg.train.alpha, recon_enabled },
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: cfg.train.seed,
    };
    let mut trainer = Trainer::new(model, cfg.schedule.build()?, options)?;
    if let Some(d) = cfg.train.ema_decay {
        trainer.enable_ema(d)?;
    }
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "text")]
pub enum PromptSource {
    Bank,
    Free(String),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRequest {
    pub class: usize,
    pub count: usize,
    pub source: PromptSource,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub file: String,
    pub class: usize,
    pub class_name: String,
    pub index: usize,
    /// `bank`, `free` or `none`.
    pub prompt_source: String,
    pub prompt: Option<String>,
    pub prompt_image_id: Option<String>,
    /// Set when a requested prompt could not be used and class-only conditioning ran instead.
    pub fallback: bool,
    pub seed: u64,
    pub checkpoint: String,
}

/// A trained model with its codec, ready to sample.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: RunConfig,
    pub class_names: Vec<String>,
    pub image_shape: (usize, usize, usize),
    pub codec: Codec,
    pub trainer: Trainer,
}

impl Session {
    pub fn new(cfg: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let codec = fit_codec(cfg, &corpus.train_images())?;
        Self::with_codec(cfg, corpus, codec)
    }

    pub fn with_codec(cfg: &RunConfig, corpus: &Corpus, codec: Codec) -> Result<Self> {
        let trainer = build_trainer(cfg, &codec, corpus.class_names.len())?;
        Ok(Self { cfg: cfg.clone(), class_names: corpus.class_names.clone(), image_shape: corpus.image_shape(), codec, trainer })
    }

    pub fn step(&mut self, examples: &[TrainExample]) -> Result<LossBreakdown> {
        Ok(self.trainer.step(examples)?)
    }

    pub fn to_checkpoint(&self, metrics: &[(&str, f64)]) -> Checkpoint {
        let t = &self.trainer;
        let mut c = Checkpoint::new(CheckpointManifest {
            step: t.step,
            config_hash: self.cfg.config_hash(),
            config: self.cfg.clone(),
            class_names: self.class_names.clone(),
            image_shape: self.image_shape,
            latent_scale: self.codec.latent_scale,
            optimizer_step: t.optimizer.step,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            blobs: Vec::new(),
        });
        c.push_store("model", &t.model.params);
        c.push_aligned("adam.m", &t.model.params, &t.optimizer.first);
        c.push_aligned("adam.v", &t.model.params, &t.optimizer.second);
        if let Some(ema) = &t.ema {
            c.push_store("ema", &ema.params);
        }
        c.push_store("codec", &self.codec.params);
        c
    }

    /// Rebuilds a session; `cfg` defaults to the configuration stored in the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: Option<&RunConfig>, allow_mismatch: bool) -> Result<Self> {
        let m = &ckpt.manifest;
        let cfg = cfg.unwrap_or(&m.config);
        ckpt.check_config(cfg, allow_mismatch)?;
        let mut codec = Codec::new(cfg.codec.spec(m.image_shape)?, cfg.train.seed)?;
        ckpt.load_store("codec", &mut codec.params)?;
        codec.latent_scale = m.latent_scale;
        let mut trainer = build_trainer(cfg, &codec, m.class_names.len())?;
        ckpt.load_store("model", &mut trainer.model.params)?;
        trainer.optimizer.first = ckpt.group_for("adam.m", &trainer.model.params)?;
        trainer.optimizer.second = ckpt.group_for("adam.v", &trainer.model.params)?;
        trainer.optimizer.step = m.optimizer_step;
        trainer.step = m.step;
        match (&mut trainer.ema, ckpt.has_group("ema")) {
            (Some(ema), true) => ckpt.load_store("ema", &mut ema.params)?,
            (Some(ema), false) => ema.params = trainer.model.params.clone(),
            (None, _) => {}
        }
        Ok(Self { cfg: cfg.clone(), class_names: m.class_names.clone(), image_shape: m.image_shape, codec, trainer })
    }

    /// Samples `count` images of one class. Image `i` draws its prompt and its
    /// noise from streams fixed by `(seed, class, i)`.
    pub fn generate(&self, req: &SampleRequest, bank: Option<&PromptBank>, checkpoint: &str) -> Result<Vec<(Image, Provenance)>> {
        let classes = self.class_names.len();
        if req.class >= classes {
            return Err(vapdiff_core::Error::invalid("class", format!("{} outside [0, {classes})", req.class)).into());
        }
        if let PromptSource::Free(t) = &req.source {
            if t.trim().is_empty() {
                return Err(vapdiff_core::Error::invalid("free_text", "free-text prompt is empty").into());
            }
        }
        let encoder = self.cfg.text.encoder()?;
        let model = self.trainer.sampling_model();
        let uses_text = self.cfg.train.vaps;
        if !uses_text && req.source != PromptSource::None {
            log::warn!("model was trained without descriptions; ignoring the prompt source");
        }
        let mut out = Vec::with_capacity(req.count);
        for i in 0..req.count {
            let key = ((req.class as u64) << 32) | i as u64;
            let mut fallback = false;
            let (prompt, prompt_image_id) = match (&req.source, uses_text) {
                (_, false) | (PromptSource::None, _) => (None, None),
                (PromptSource::Free(t), true) => (Some(t.clone()), None),
                (PromptSource::Bank, true) => {
                    let bank = bank.ok_or_else(|| Error::config("prompt source bank needs a prompt bank"))?;
                    match bank.retrieve_with(req.class, &mut derive(req.seed, streams::PROMPT, key)) {
                        Ok(r) => (Some(r.text.clone()), Some(r.image_id.clone())),
                        Err(vapdiff_core::Error::EmptyClass(c)) => {
                            log::warn!("bank {} has no descriptions for class {c}; sampling class-only", bank.id);
                            fallback = true;
                            (None, None)
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            let text = prompt.as_deref().map(|p| encode_description(p, &encoder)).transpose()?.map(|e| e.vector);
            let mut rng = derive(req.seed, streams::SAMPLE, key);
            let latent = sample_latent(&model, &self.trainer.schedule, req.class, text.as_deref(), &mut rng)?;
            let image = self.codec.decode_latent(&latent)?;
            let source = match (&req.source, uses_text && !fallback) {
                (PromptSource::Bank, true) => "bank",
                (PromptSource::Free(_), true) => "free",
                _ => "none",
            };
            out.push((
                image,
                Provenance {
                    file: format!("{}_{:04}.png", self.class_names[req.class], i),
                    class: req.class,
                    class_name: self.class_names[req.class].clone(),
                    index: i,
                    prompt_source: source.into(),
                    prompt,
                    prompt_image_id,
                    fallback,
                    seed: req.seed,
                    checkpoint: checkpoint.into(),
                },
            ));
        }
        Ok(out)
    }
}

/// Trains on prepared examples until `trainer.step` reaches `steps`, calling
/// `on_step` after every step.
pub fn train_loop(
    session: &mut Session,
    examples: &[TrainExample],
    steps: u64,
    mut on_step: impl FnMut(&Session, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    while session.trainer.step < steps {
        let loss = session.step(examples)?;
        on_step(session, &loss)?;
    }
    Ok(())
}

pub fn load_bank(cfg: &RunConfig, classes: usize) -> Result<Option<PromptBank>> {
    match &cfg.data.bank {
        Some(p) if p.is_file() => Ok(Some(crate::bankfile::load(p, classes)?)),
        Some(p) if cfg.train.vaps => Err(Error::config(format!("prompt bank {} does not exist", p.display()))),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
}

/// Trains from the config's dataset into `out`: `loss.csv` plus a checkpoint every
/// `checkpoint_every` steps and at the end. A numeric failure aborts and points at
/// the last checkpoint that was written.
pub fn train_to_dir(cfg: &RunConfig, out: &Path, resume: Option<&Path>, allow_mismatch: bool) -> Result<TrainSummary> {
    cfg.validate(true)?;
    let ds = Dataset::load(&cfg.data.dataset)?;
    let corpus = Corpus::load(&ds)?;
    let bank = load_bank(cfg, ds.class_count())?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut session = match resume {
        Some(p) => Session::from_checkpoint(&Checkpoint::load(p)?.0, Some(cfg), allow_mismatch)?,
        None => Session::new(cfg, &corpus)?,
    };
    let examples = training_examples(cfg, &session.codec, &corpus.train, bank.as_ref())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let loss_path = out.join(LOSS_FILE);
    let mut losses = report::LossWriter::open(&loss_path, resume.is_some())?;
    let mut last_good: Option<PathBuf> = None;
    let mut last = None;
    let every = cfg.train.checkpoint_every;
    let result = train_loop(&mut session, &examples, cfg.train.steps, |s, loss| {
        losses.write(s.trainer.step, loss)?;
        if s.trainer.step % 100 == 0 {
            log::info!("step {} loss {:.5}", s.trainer.step, loss.l_total);
        }
        if every > 0 && s.trainer.step % every == 0 {
            s.to_checkpoint(&[("l_total", loss.l_total)]).save(&ckpt_path)?;
            last_good = Some(ckpt_path.clone());
        }
        last = Some(*loss);
        Ok(())
    });
    losses.flush()?;
    if let Err(e) = result {
        return Err(match e {
            Error::Core(vapdiff_core::Error::Numeric { location, reason }) => Error::TrainingAborted {
                step: session.trainer.step,
                reason: format!("{location}: {reason}"),
                checkpoint: last_good.map_or("none".into(), |p| p.display().to_string()),
            },
            other => other,
        });
    }
    let metrics: Vec<(&str, f64)> = last.iter().map(|l| ("l_total", l.l_total)).collect();
    session.to_checkpoint(&metrics).save(&ckpt_path)?;
    Ok(TrainSummary { steps: session.trainer.step, last, checkpoint: ckpt_path })
}

/// Samples into `out`: PNGs named `<class>_<index>.png` and one provenance line each.
pub fn generate_to_dir(
    ckpt_path: &Path,
    cfg: Option<&RunConfig>,
    req: &SampleRequest,
    bank_override: Option<&Path>,
    out: &Path,
    allow_mismatch: bool,
) -> Result<Vec<Provenance>> {
    let (ckpt, hash) = Checkpoint::load(ckpt_path)?;
    let session = Session::from_checkpoint(&ckpt, cfg, allow_mismatch)?;
    let bank = match (&req.source, bank_override.or(session.cfg.data.bank.as_deref())) {
        (PromptSource::Bank, Some(p)) if session.cfg.train.vaps => Some(crate::bankfile::load(p, session.class_names.len())?),
        (PromptSource::Bank, None) if session.cfg.train.vaps => return Err(Error::config("prompt source bank needs data.bank")),
        _ => None,
    };
    let images = session.generate(req, bank.as_ref(), &hash)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let prov_path = out.join(PROVENANCE_FILE);
    let mut prov = fs::OpenOptions::new().create(true).append(true).open(&prov_path).map_err(Error::io(&prov_path))?;
    let mut records = Vec::new();
    for (image, p) in images {
        write_png(&out.join(&p.file), &image)?;
        writeln!(prov, "{}", serde_json::to_string(&p).expect("provenance serializes")).map_err(Error::io(&prov_path))?;
        records.push(p);
    }
    Ok(records)
}

/// Labelled images of a generation directory, labels from its provenance file.
pub fn read_generated(dir: &Path) -> Result<Vec<LabelledImage>> {
    let prov: Vec<Provenance> = read_jsonl(&dir.join(PROVENANCE_FILE))?;
    prov.iter()
        .map(|p| Ok(LabelledImage { image: crate::dataset::read_png(&dir.join(&p.file))?, label: p.class }))
        .collect()
}

/// Frozen evaluation extractor trained on the class labels of every corpus image.
pub fn train_extractor(cfg: &RunConfig, corpus: &Corpus) -> Result<CnnExtractor> {
    let all = corpus.train.iter().chain(&corpus.test);
    let images: Vec<Image> = all.clone().map(|i| i.image.clone()).collect();
    let labels: Vec<usize> = all.map(|i| i.class).collect();
    let config = CnnConfig { epochs: cfg.eval.extractor_epochs, seed: cfg.train.seed, ..Default::default() };
    Ok(train_toy_extractor(&images, &labels, corpus.class_names.len(), config)?)
}

/// FID, IS and k-NN precision/recall of `fake` against `real` under a frozen extractor.
pub fn evaluate(cfg: &RunConfig, extractor: &CnnExtractor, real: &[Image], fake: &[Image]) -> Result<MetricReport> {
    let real_f = extract_features(extractor, real)?;
    let fake_f = extract_features(extractor, fake)?;
    let net = extractor.network();
    let mut probs = Vec::with_capacity(fake.len() * net.classes);
    for img in fake {
        probs.extend(net.probabilities(img)?);
    }
    Ok(MetricReport::compute(&real_f, &fake_f, &probs, net.classes, cfg.eval.k, cfg.eval.is_splits, cfg.config_hash())?)
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub report: MetricReport,
    pub final_loss: f64,
    pub samples: Vec<(Image, Provenance)>,
    pub session: Session,
}

/// Prompt pool for evaluation sampling: records with the configured split tag
/// where a class has them, otherwise all of the class's records.
pub fn evaluation_bank(bank: &PromptBank, tag: SplitTag) -> PromptBank {
    let tagged = bank.with_tag(tag);
    let mut out = PromptBank::new(bank.id.clone(), bank.class_count());
    for c in 0..bank.class_count() {
        let src = if tagged.count(c) > 0 { tagged.records(c) } else { bank.records(c) };
        for r in src {
            out.insert(r.clone()).expect("records come from a valid bank");
        }
    }
    out
}

/// Trains every arm from the same seed and codec and scores `samples_per_class`
/// images per class against the real training images.
pub fn ablation(
    cfg: &RunConfig,
    corpus: &Corpus,
    bank: Option<&PromptBank>,
    arms: &[Arm],
    codec: &Codec,
    extractor: &CnnExtractor,
) -> Result<Vec<ArmResult>> {
    validate_arms(arms, cfg)?;
    let real = corpus.train_images();
    let eval_bank = bank.map(|b| evaluation_bank(b, cfg.eval.prompt_split));
    arms.iter()
        .map(|&arm| {
            let arm_cfg = arm.apply(cfg);
            let mut session = Session::with_codec(&arm_cfg, corpus, codec.clone())?;
            let examples = training_examples(&arm_cfg, codec, &corpus.train, bank)?;
            let mut final_loss = f64::NAN;
            train_loop(&mut session, &examples, arm_cfg.train.steps, |s, l| {
                final_loss = l.l_total;
                if s.trainer.step % 500 == 0 {
                    log::info!("{} step {} loss {:.5}", arm.name(), s.trainer.step, l.l_total);
                }
                Ok(())
            })?;
            let source = if arm_cfg.train.vaps { PromptSource::Bank } else { PromptSource::None };
            let mut samples = Vec::new();
            for class in 0..corpus.class_names.len() {
                let req = SampleRequest { class, count: cfg.eval.samples_per_class, source: source.clone(), seed: cfg.train.seed };
                samples.extend(session.generate(&req, eval_bank.as_ref(), arm.name())?);
            }
            let fake: Vec<Image> = samples.iter().map(|(i, _)| i.clone()).collect();
            let report = evaluate(&arm_cfg, extractor, &real, &fake)?;
            log::info!("{}: fid {:.4} precision {:.3} recall {:.3}", arm.name(), report.fid, report.precision, report.recall);
            Ok(ArmResult { arm, report, final_loss, samples, session })
        })
        .collect()
}

/// Full ablation from the config's dataset; writes `metrics.csv`, an optional
/// `metrics.png` bar chart and each arm's samples under `<arm>/`.
pub fn ablation_to_dir(cfg: &RunConfig, arms: &[Arm], out: &Path) -> Result<Vec<ArmResult>> {
    validate_arms(arms, cfg)?;
    cfg.validate(arms.iter().any(|a| *a != Arm::NoVaps))?;
    let ds = Dataset::load(&cfg.data.dataset)?;
    let corpus = Corpus::load(&ds)?;
    let bank = load_bank(cfg, ds.class_count())?;
    let codec = fit_codec(cfg, &corpus.train_images())?;
    let extractor = train_extractor(cfg, &corpus)?;
    let results = ablation(cfg, &corpus, bank.as_ref(), arms, &codec, &extractor)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    report::write_metrics_csv(&out.join("metrics.csv"), results.iter().map(|r| (r.arm.name(), &r.report)))?;
    if cfg.eval.plots {
        report::write_metric_bars(&out.join("metrics.png"), &results.iter().map(|r| (r.arm.name(), &r.report)).collect::<Vec<_>>())?;
    }
    for r in &results {
        let dir = out.join(r.arm.name());
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for (img, p) in &r.samples {
            write_png(&dir.join(&p.file), img)?;
        }
        write_jsonl(&dir.join(PROVENANCE_FILE), r.samples.iter().map(|(_, p)| p))?;
    }
    Ok(results)
}

/// Baseline and augmented classifiers on the dataset's train/test split.
pub fn downstream(cfg: &RunConfig, corpus: &Corpus, synthetic: &[LabelledImage], source: &str) -> Result<DownstreamComparison> {
    if corpus.test.is_empty() {
        return Err(Error::config("downstream evaluation needs test-split images"));
    }
    let config = CnnConfig { epochs: cfg.eval.classifier_epochs, seed: cfg.train.seed, ..Default::default() };
    Ok(downstream_eval(
        &Corpus::labelled(&corpus.train),
        cfg.eval.real_fraction,
        synthetic,
        source,
        config,
        &Corpus::labelled(&corpus.test),
        corpus.class_names.len(),
    )?)
}

/// Class-balanced synthetic set of `total` images sampled with bank prompts
/// (or class-only when descriptions are off).
pub fn synthesize(session: &Session, bank: Option<&PromptBank>, total: usize, seed: u64) -> Result<Vec<LabelledImage>> {
    let classes = session.class_names.len();
    let source = if session.cfg.train.vaps { PromptSource::Bank } else { PromptSource::None };
    let mut out = Vec::with_capacity(total);
    for class in 0..classes {
        let count = total / classes + usize::from(class < total % classes);
        let req = SampleRequest { class, count, source: source.clone(), seed };
        out.extend(session.generate(&req, bank, "in-memory")?.into_iter().map(|(image, _)| LabelledImage { image, label: class }));
    }
    Ok(out)
}

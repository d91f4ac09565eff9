//! Small convolutional classifier, pluggable feature extractors and the
//! synthetic-augmentation downstream harness.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, ParamGrads, ParamStore, Var};
use crate::math::sqrt;
use crate::metrics::{macro_f1, mean_auc, FeatureSet};
use crate::nn::{chw_to_rows, Adam, Conv2d, Init, Linear};
use crate::rng::{derive, streams};
use crate::{Error, Image, Result};

pub const TOY_CNN: &str = "toy-cnn-v1";
pub const PIXEL_STATS: &str = "pixel-stats";

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CnnConfig {
    pub widths: [usize; 3],
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32], hidden: 32, epochs: 30, batch_size: 16, lr: 3e-3, seed: 0 }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.hidden == 0 {
            return Err(Error::invalid("widths", "every layer needs at least one channel"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} is not a positive learning rate", self.lr)));
        }
        Ok(())
    }
}

/// Three stride-2 convolutions, global mean pooling, one hidden linear layer
/// and a zero-initialized linear head. The hidden activations double as image
/// features.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    pub config: CnnConfig,
    pub classes: usize,
    pub shape: (usize, usize, usize),
    convs: Vec<Conv2d>,
    embed: Linear,
    head: Linear,
    rows: alloc::sync::Arc<[usize]>,
    pub params: ParamStore,
}

impl SmallCnn {
    pub fn new(config: CnnConfig, classes: usize, shape: (usize, usize, usize)) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::invalid("classes", "a classifier needs at least two classes"));
        }
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("shape", "image dimensions must be positive"));
        }
        let mut params = ParamStore::new();
        let mut rng = derive(config.seed, streams::CLASSIFIER, 0);
        let mut init = Init::new(&mut params, &mut rng);
        let (convs, embed, head) = init.scoped("cnn", |i| {
            let mut convs = Vec::new();
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for (k, &out) in config.widths.iter().enumerate() {
                let conv = Conv2d::new(i, &format!("conv.{k}"), ch, out, 3, 2, hh, ww);
                (ch, hh, ww) = (out, conv.out_height, conv.out_width);
                convs.push(conv);
            }
            let embed = Linear::new(i, "embed", ch, config.hidden);
            (convs, embed, Linear::zeros(i, "head", config.hidden, classes))
        });
        Ok(Self { config, classes, shape, convs, embed, head, rows: chw_to_rows(c, h, w), params })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.shape() != self.shape {
            return Err(Error::shape(format!("{:?}", self.shape), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    fn pooled(&self, g: &mut Graph, image: &Image) -> Var {
        let (c, h, w) = self.shape;
        let x = g.constant(1, c * h * w, image.data().to_vec());
        let mut x = g.gather(x, self.rows.clone(), h * w, c);
        for conv in &self.convs {
            x = conv.forward(g, &self.params, x);
            x = g.relu(x);
        }
        let pooled = g.mean_rows(x);
        let h = self.embed.forward(g, &self.params, pooled);
        g.relu(h)
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        self.check(image)?;
        let mut g = Graph::new();
        let f = self.pooled(&mut g, image);
        Ok(g.value(f).to_vec())
    }

    pub fn probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        self.check(image)?;
        let mut g = Graph::new();
        let f = self.pooled(&mut g, image);
        let logits = self.head.forward(&mut g, &self.params, f);
        let p = g.softmax_rows(logits);
        Ok(g.value(p).to_vec())
    }

    /// Mini-batch Adam on cross-entropy; returns the mean loss of every epoch.
    pub fn train(&mut self, images: &[Image], labels: &[usize]) -> Result<Vec<f64>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid("dataset", format!("{} images against {} labels", images.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= self.classes) {
            return Err(Error::invalid("labels", format!("label {bad} with {} classes", self.classes)));
        }
        for img in images {
            self.check(img)?;
        }
        let mut opt = Adam::new(&self.params, self.config.lr);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut rng = derive(self.config.seed, streams::CLASSIFIER, epoch as u64 + 1);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let mut grads = ParamGrads::zeros_like(&self.params);
                for &i in chunk {
                    let mut g = Graph::new();
                    let f = self.pooled(&mut g, &images[i]);
                    let logits = self.head.forward(&mut g, &self.params, f);
                    let loss = g.cross_entropy(logits, &[labels[i]]);
                    let value = g.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::Numeric { location: format!("classifier epoch {epoch}"), reason: "non-finite loss".into() });
                    }
                    total += value;
                    grads.add_assign(&g.backward(loss, self.params.len()));
                }
                grads.scale(1.0 / chunk.len() as f64);
                opt.update(&mut self.params, &grads);
            }
            history.push(total / images.len() as f64);
        }
        Ok(history)
    }
}

/// Maps an image to a fixed-width feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

/// A trained [`SmallCnn`] used frozen as an extractor.
#[derive(Debug, Clone)]
pub struct CnnExtractor {
    id: String,
    net: SmallCnn,
}

impl CnnExtractor {
    pub fn new(id: impl Into<String>, net: SmallCnn) -> Self {
        Self { id: id.into(), net }
    }

    pub fn network(&self) -> &SmallCnn {
        &self.net
    }
}

impl FeatureExtractor for CnnExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.net.feature_dim()
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        self.net.features(image)
    }
}

/// Per-channel mean and standard deviation plus a 4×4 grid of mean intensity.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelStats;

impl FeatureExtractor for PixelStats {
    fn id(&self) -> &str {
        PIXEL_STATS
    }

    fn dim(&self) -> usize {
        22
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let (c, h, w) = image.shape();
        if c != 3 || h < 4 || w < 4 {
            return Err(Error::shape("3×H×W with H, W ≥ 4", format!("{c}×{h}×{w}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(22);
        for ch in image.data().chunks(plane) {
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            out.push(mean);
            out.push(sqrt(var));
        }
        let mut grid = vec![0.0; 16];
        let mut counts = vec![0usize; 16];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * 4 / h) * 4 + x * 4 / w;
                grid[cell] += (0..3).map(|k| image.data()[k * plane + y * w + x]).sum::<f64>() / 3.0;
                counts[cell] += 1;
            }
        }
        out.extend(grid.iter().zip(&counts).map(|(s, n)| s / *n as f64));
        Ok(out)
    }
}

/// Extractors addressable by id.
#[derive(Default)]
pub struct ExtractorRegistry {
    entries: Vec<Box<dyn FeatureExtractor>>,
}

impl ExtractorRegistry {
    /// Registry holding only the handcrafted [`PixelStats`] extractor.
    pub fn with_builtin() -> Self {
        let mut r = Self::default();
        r.register(Box::new(PixelStats));
        r
    }

    /// Adds or replaces the extractor with the same id.
    pub fn register(&mut self, extractor: Box<dyn FeatureExtractor>) {
        self.entries.retain(|e| e.id() != extractor.id());
        self.entries.push(extractor);
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id().to_string()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&dyn FeatureExtractor> {
        self.entries
            .iter()
            .find(|e| e.id() == id)
            .map(|e| e.as_ref())
            .ok_or_else(|| Error::UnknownExtractor { id: id.to_string(), registered: self.ids().join(", ") })
    }

    pub fn extract_features(&self, images: &[Image], id: &str) -> Result<FeatureSet> {
        extract_features(self.get(id)?, images)
    }
}

pub fn extract_features(extractor: &dyn FeatureExtractor, images: &[Image]) -> Result<FeatureSet> {
    let dim = extractor.dim();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        let row = extractor.extract(img)?;
        if row.len() != dim {
            return Err(Error::shape(format!("{dim} features"), format!("{}", row.len())));
        }
        data.extend(row);
    }
    FeatureSet::new(images.len(), dim, data, extractor.id())
}

/// Trains a [`SmallCnn`] on labelled toy images and freezes it as [`TOY_CNN`].
pub fn train_toy_extractor(images: &[Image], labels: &[usize], classes: usize, config: CnnConfig) -> Result<CnnExtractor> {
    let shape = images.first().ok_or(Error::invalid("dataset", "no images"))?.shape();
    let mut net = SmallCnn::new(config, classes, shape)?;
    net.train(images, labels)?;
    Ok(CnnExtractor::new(TOY_CNN, net))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DownstreamReport {
    pub real_fraction: f64,
    pub classifier_id: String,
    pub mauc: f64,
    /// `None` for multi-label runs.
    pub f1: Option<f64>,
    /// `"none"` for the unaugmented arm.
    pub augmentation: String,
    pub real_count: usize,
    pub synthetic_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DownstreamComparison {
    pub baseline: DownstreamReport,
    pub augmented: DownstreamReport,
}

/// Per-class subsample keeping `round(fraction · n_c)` items, at least one per class.
pub fn stratified_subset(data: &[LabelledImage], fraction: f64, classes: usize, seed: u64) -> Result<Vec<LabelledImage>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("real_fraction", format!("{fraction} is outside (0, 1]")));
    }
    let mut out = Vec::new();
    for c in 0..classes {
        let mut members: Vec<&LabelledImage> = data.iter().filter(|d| d.label == c).collect();
        if members.is_empty() {
            return Err(Error::invalid("real_train", format!("class {c} has no training images to subsample")));
        }
        let take = (crate::math::round(fraction * members.len() as f64) as usize).clamp(1, members.len());
        members.shuffle(&mut derive(seed, streams::SPLIT, 1000 + c as u64));
        out.extend(members.into_iter().take(take).cloned());
    }
    Ok(out)
}

fn evaluate(net: &SmallCnn, test: &[LabelledImage]) -> Result<(f64, f64)> {
    let mut probs = Vec::with_capacity(test.len() * net.classes);
    let mut predicted = Vec::with_capacity(test.len());
    for item in test {
        let p = net.probabilities(&item.image)?;
        let arg = p.iter().enumerate().fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
        predicted.push(arg);
        probs.extend(p);
    }
    let labels: Vec<usize> = test.iter().map(|t| t.label).collect();
    Ok((mean_auc(&probs, &labels, net.classes)?, macro_f1(&predicted, &labels, net.classes)))
}

/// Trains one classifier on a real subset and one on the subset plus the
/// synthetic images, under the same seed, and scores both on `test`.
pub fn downstream_eval(
    real_train: &[LabelledImage],
    real_fraction: f64,
    synthetic: &[LabelledImage],
    augmentation: &str,
    config: CnnConfig,
    test: &[LabelledImage],
    classes: usize,
) -> Result<DownstreamComparison> {
    let shape = test.first().ok_or(Error::invalid("test", "empty test set"))?.image.shape();
    let subset = stratified_subset(real_train, real_fraction, classes, config.seed)?;
    let arm = |extra: &[LabelledImage], source: &str| -> Result<DownstreamReport> {
        let data: Vec<&LabelledImage> = subset.iter().chain(extra).collect();
        let images: Vec<Image> = data.iter().map(|d| d.image.clone()).collect();
        let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
        let mut net = SmallCnn::new(config, classes, shape)?;
        net.train(&images, &labels)?;
        let (mauc, f1) = evaluate(&net, test)?;
        Ok(DownstreamReport {
            real_fraction,
            classifier_id: TOY_CNN.into(),
            mauc,
            f1: Some(f1),
            augmentation: source.into(),
            real_count: subset.len(),
            synthetic_count: extra.len(),
        })
    };
    Ok(DownstreamComparison { baseline: arm(&[], "none")?, augmented: arm(synthetic, augmentation)? })
}

/// Scores an untrained classifier, which predicts a constant distribution.
pub fn untrained_mauc(test: &[LabelledImage], classes: usize, config: CnnConfig) -> Result<f64> {
    let shape = test.first().ok_or(Error::invalid("test", "empty test set"))?.image.shape();
    evaluate(&SmallCnn::new(config, classes, shape)?, test).map(|r| r.0)
}

//! Image ↔ latent mapping: an exact affine identity codec, or a small
//! convolutional autoencoder fitted on reconstruction error.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, ParamGrads, ParamStore, Var};
use crate::nn::{chw_to_rows, rows_to_chw, upsample2, Adam, Conv2d, Init};
use crate::rng::{derive, streams};
use crate::{Error, Image, LatentTensor, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CodecMode {
    Identity,
    Autoencoder,
}

impl CodecMode {
    fn name(self) -> &'static str {
        match self {
            CodecMode::Identity => "identity",
            CodecMode::Autoencoder => "autoencoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CodecSpec {
    pub mode: CodecMode,
    pub image: (usize, usize, usize),
    pub latent: (usize, usize, usize),
    pub factor: usize,
}

impl CodecSpec {
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        let shape = (channels, height, width);
        Self { mode: CodecMode::Identity, image: shape, latent: shape, factor: 1 }
    }

    pub fn autoencoder(image: (usize, usize, usize), latent_channels: usize, factor: usize) -> Result<Self> {
        let spec = Self {
            mode: CodecMode::Autoencoder,
            image,
            latent: (latent_channels, image.1 / factor.max(1), image.2 / factor.max(1)),
            factor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CodecMode::Identity => {
                if self.latent != self.image || self.factor != 1 {
                    return Err(Error::invalid("latent", "identity mode keeps the image shape"));
                }
            }
            CodecMode::Autoencoder => {
                let (_, h, w) = self.image;
                if self.factor < 2 || !self.factor.is_power_of_two() {
                    return Err(Error::invalid("factor", format!("{} is not a power of two ≥ 2", self.factor)));
                }
                if h % self.factor != 0 || w % self.factor != 0 {
                    return Err(Error::invalid("factor", format!("{h}x{w} is not divisible by {}", self.factor)));
                }
                if self.latent != (self.latent.0, h / self.factor, w / self.factor) || self.latent.0 == 0 {
                    return Err(Error::invalid("latent", "latent shape must be (c, H/factor, W/factor)"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Autoencoder {
    down: Vec<Conv2d>,
    to_latent: Conv2d,
    from_latent: Conv2d,
    up: Vec<(usize, usize, Conv2d)>,
    to_image: Conv2d,
    image_rows: Arc<[usize]>,
    image_chw: Arc<[usize]>,
    latent_rows: Arc<[usize]>,
    latent_chw: Arc<[usize]>,
}

impl Autoencoder {
    fn new(init: &mut Init<'_>, spec: &CodecSpec) -> Self {
        let (ic, h, w) = spec.image;
        let (lc, lh, lw) = spec.latent;
        let stages = spec.factor.trailing_zeros() as usize;
        let width_at = |stage: usize| if stage + 1 >= stages { 32 } else { 16 };
        init.scoped("codec", |i| {
            let mut down = Vec::new();
            let (mut ch, mut hh, mut ww) = (ic, h, w);
            for s in 0..stages {
                let conv = Conv2d::new(i, &format!("down.{s}"), ch, width_at(s), 3, 2, hh, ww);
                (ch, hh, ww) = (width_at(s), conv.out_height, conv.out_width);
                down.push(conv);
            }
            let to_latent = Conv2d::new(i, "to_latent", ch, lc, 3, 1, lh, lw);
            let from_latent = Conv2d::new(i, "from_latent", lc, 32, 3, 1, lh, lw);
            let mut up = Vec::new();
            let (mut ch, mut hh, mut ww) = (32, lh, lw);
            for s in 0..stages {
                let out = if s + 1 == stages { 16 } else { 32 };
                let conv = Conv2d::new(i, &format!("up.{s}"), ch, out, 3, 1, 2 * hh, 2 * ww);
                up.push((hh, ww, conv));
                (ch, hh, ww) = (out, 2 * hh, 2 * ww);
            }
            let to_image = Conv2d::new(i, "to_image", ch, ic, 3, 1, h, w);
            Autoencoder {
                down,
                to_latent,
                from_latent,
                up,
                to_image,
                image_rows: chw_to_rows(ic, h, w),
                image_chw: rows_to_chw(ic, h, w),
                latent_rows: chw_to_rows(lc, lh, lw),
                latent_chw: rows_to_chw(lc, lh, lw),
            }
        })
    }

    /// `1 × CHW` image → `1 × CHW` latent (unscaled).
    fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var, spec: &CodecSpec) -> Var {
        let (ic, h, w) = spec.image;
        let mut x = g.gather(image, self.image_rows.clone(), h * w, ic);
        for conv in &self.down {
            x = conv.forward(g, store, x);
            x = g.silu(x);
        }
        let z = self.to_latent.forward(g, store, x);
        let (lc, lh, lw) = spec.latent;
        g.gather(z, self.latent_chw.clone(), 1, lc * lh * lw)
    }

    fn decode(&self, g: &mut Graph, store: &ParamStore, latent: Var, spec: &CodecSpec) -> Var {
        let (lc, lh, lw) = spec.latent;
        let z = g.gather(latent, self.latent_rows.clone(), lh * lw, lc);
        let mut x = self.from_latent.forward(g, store, z);
        x = g.silu(x);
        for (hh, ww, conv) in &self.up {
            x = upsample2(g, x, *hh, *ww);
            x = conv.forward(g, store, x);
            x = g.silu(x);
        }
        let out = self.to_image.forward(g, store, x);
        let (ic, h, w) = spec.image;
        g.gather(out, self.image_chw.clone(), 1, ic * h * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { lr: 2e-3, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub spec: CodecSpec,
    net: Option<Autoencoder>,
    pub params: ParamStore,
    /// Multiplier applied to raw autoencoder latents so they have roughly unit variance.
    pub latent_scale: f64,
}

impl Codec {
    pub fn new(spec: CodecSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let net = match spec.mode {
            CodecMode::Identity => None,
            CodecMode::Autoencoder => {
                let mut rng = derive(seed, streams::CODEC, 0);
                Some(Autoencoder::new(&mut Init::new(&mut params, &mut rng), &spec))
            }
        };
        Ok(Self { spec, net, params, latent_scale: 1.0 })
    }

    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        Self::new(CodecSpec::identity(channels, height, width), 0).expect("identity spec is valid")
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape() != self.spec.image {
            return Err(Error::shape(format!("image {:?}", self.spec.image), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &Image) -> Result<LatentTensor> {
        self.check_image(image)?;
        let (lc, lh, lw) = self.spec.latent;
        match &self.net {
            None => LatentTensor::new(lc, lh, lw, image.data().iter().map(|v| 2.0 * v - 1.0).collect()),
            Some(net) => {
                let mut g = Graph::new();
                let x = g.constant(1, image.data().len(), image.data().to_vec());
                let z = net.encode(&mut g, &self.params, x, &self.spec);
                LatentTensor::new(lc, lh, lw, g.value(z).iter().map(|v| v * self.latent_scale).collect())
            }
        }
    }

    pub fn decode_latent(&self, latent: &LatentTensor) -> Result<Image> {
        if latent.shape() != self.spec.latent {
            return Err(Error::shape(format!("latent {:?}", self.spec.latent), format!("{:?}", latent.shape())));
        }
        let (ic, h, w) = self.spec.image;
        match &self.net {
            None => Ok(Image::clamped(ic, h, w, latent.data().iter().map(|v| (v + 1.0) / 2.0).collect())),
            Some(net) => {
                let mut g = Graph::new();
                let scaled = latent.data().iter().map(|v| v / self.latent_scale).collect();
                let z = g.constant(1, latent.len(), scaled);
                let x = net.decode(&mut g, &self.params, z, &self.spec);
                Ok(Image::clamped(ic, h, w, g.value(x).to_vec()))
            }
        }
    }

    fn recon_graph(net: &Autoencoder, params: &ParamStore, spec: &CodecSpec, image: &Image) -> (Graph, Var) {
        let mut g = Graph::new();
        let x = g.constant(1, image.data().len(), image.data().to_vec());
        let z = net.encode(&mut g, params, x, spec);
        let y = net.decode(&mut g, params, z, spec);
        let loss = g.mse(y, x);
        (g, loss)
    }

    /// Mean reconstruction error of `decode(encode(x))` over `images` (after clamping).
    pub fn reconstruction_mse(&self, images: &[Image]) -> Result<f64> {
        let mut total = 0.0;
        for img in images {
            let back = self.decode_latent(&self.encode_image(img)?)?;
            total += img.data().iter().zip(back.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.data().len() as f64;
        }
        Ok(total / images.len().max(1) as f64)
    }

    /// Fits the autoencoder; returns the dataset MSE before training followed by
    /// the MSE after each epoch. Resets `latent_scale` from the fitted latents.
    pub fn fit(&mut self, images: &[Image], epochs: usize, opts: FitOptions) -> Result<Vec<f64>> {
        let net = self
            .net
            .clone()
            .ok_or(Error::UnsupportedMode { mode: self.spec.mode.name(), what: "codec fitting" })?;
        if images.is_empty() {
            return Err(Error::invalid("dataset", "no images to fit"));
        }
        if opts.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        for img in images {
            self.check_image(img)?;
        }
        self.latent_scale = 1.0;
        let mut history = alloc::vec![self.reconstruction_mse(images)?];
        let mut opt = Adam::new(&self.params, opts.lr);
        let mut order: Vec<usize> = (0..images.len()).collect();
        for epoch in 0..epochs {
            let mut rng = derive(opts.seed, streams::CODEC, epoch as u64 + 1);
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch_size) {
                let mut grads = ParamGrads::zeros_like(&self.params);
                for &i in chunk {
                    let (g, loss) = Self::recon_graph(&net, &self.params, &self.spec, &images[i]);
                    if !g.scalar(loss).is_finite() {
                        return Err(Error::Numeric { location: format!("codec epoch {epoch}"), reason: "non-finite loss".into() });
                    }
                    grads.add_assign(&g.backward(loss, self.params.len()));
                }
                grads.scale(1.0 / chunk.len() as f64);
                opt.update(&mut self.params, &grads);
            }
            history.push(self.reconstruction_mse(images)?);
        }
        self.latent_scale = 1.0 / self.raw_latent_std(&net, images).max(1e-6);
        Ok(history)
    }

    fn raw_latent_std(&self, net: &Autoencoder, images: &[Image]) -> f64 {
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for img in images {
            let mut g = Graph::new();
            let x = g.constant(1, img.data().len(), img.data().to_vec());
            let z = net.encode(&mut g, &self.params, x, &self.spec);
            for v in g.value(z) {
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        crate::math::sqrt((sq / n as f64 - mean * mean).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gradient_image(c: usize, h: usize, w: usize) -> Image {
        let data = (0..c * h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Image::new(c, h, w, data).unwrap()
    }

    #[test]
    fn identity_affine_map() {
        let codec = Codec::identity(1, 1, 3);
        let img = Image::new(1, 1, 3, vec![0.5, 1.0, 0.0]).unwrap();
        let z = codec.encode_image(&img).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, -1.0]);
        let back = codec.decode_latent(&LatentTensor::zeros(1, 1, 3)).unwrap();
        assert_eq!(back.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn identity_roundtrip() {
        let codec = Codec::identity(3, 4, 4);
        let img = gradient_image(3, 4, 4);
        let back = codec.decode_latent(&codec.encode_image(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_clamps() {
        let codec = Codec::identity(1, 4, 4);
        let mut rng = crate::rng::seeded(5);
        let z = LatentTensor::new(1, 4, 4, (0..16).map(|_| rand::Rng::random_range(&mut rng, -10.0..10.0)).collect()).unwrap();
        assert!(codec.decode_latent(&z).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Image::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        let codec = Codec::identity(1, 2, 2);
        assert!(codec.encode_image(&gradient_image(1, 2, 3)).is_err());
        assert!(codec.decode_latent(&LatentTensor::zeros(1, 3, 3)).is_err());
        assert!(CodecSpec::autoencoder((3, 10, 10), 4, 4).is_err());
        assert!(CodecSpec::autoencoder((3, 8, 8), 4, 3).is_err());
    }

    #[test]
    fn identity_fit_is_unsupported() {
        let mut codec = Codec::identity(1, 2, 2);
        assert!(matches!(
            codec.fit(&[gradient_image(1, 2, 2)], 1, FitOptions::default()),
            Err(Error::UnsupportedMode { .. })
        ));
    }

    #[test]
    fn autoencoder_shapes_and_single_image_fit() {
        let spec = CodecSpec::autoencoder((3, 8, 8), 4, 4).unwrap();
        assert_eq!(spec.latent, (4, 2, 2));
        let mut codec = Codec::new(spec, 3).unwrap();
        let img = gradient_image(3, 8, 8);
        let z = codec.encode_image(&img).unwrap();
        assert_eq!(z.shape(), (4, 2, 2));
        assert_eq!(codec.decode_latent(&z).unwrap().shape(), (3, 8, 8));
        let history = codec.fit(&vec![img.clone(); 4], 1, FitOptions { batch_size: 4, ..FitOptions::default() }).unwrap();
        assert!(history[1] < history[0], "{history:?}");
        assert_eq!(codec.encode_image(&img).unwrap(), codec.encode_image(&img).unwrap());
    }
}

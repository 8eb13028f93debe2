//! The frozen latent autoencoder (𝓔, 𝓓): either the identity map (pixel-space
//! diffusion) or a small convolutional autoencoder pre-trained on the corpus.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Conv2d, Graph, Init, ParamStore, Tensor, Var};
use crate::{par, seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// `z = x`; forces 3 channels and no downsampling.
    Identity,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub mode: LatentMode,
    pub latent_channels: usize,
    /// Spatial downsampling; 4 in learned mode.
    pub down: usize,
    pub hidden: usize,
    /// Multiplier applied to encoder outputs so latents have roughly unit
    /// variance; set by pre-training.
    pub scale: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            mode: LatentMode::Learned,
            latent_channels: 4,
            down: 4,
            hidden: 16,
            scale: 1.0,
        }
    }
}

impl AutoencoderConfig {
    pub fn identity() -> Self {
        Self {
            mode: LatentMode::Identity,
            latent_channels: 3,
            down: 1,
            hidden: 0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LatentMode::Identity if self.latent_channels != 3 || self.down != 1 => Err(Error::Config(
                "identity latents require 3 channels and down = 1".into(),
            )),
            LatentMode::Learned if self.down != 4 || self.hidden == 0 || self.latent_channels == 0 => Err(
                Error::Config("learned autoencoder requires down = 4 and positive widths".into()),
            ),
            _ if !(self.scale > 0.0) => Err(Error::Config("latent scale must be > 0".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AutoencoderStats {
    pub epoch_losses: Vec<f64>,
    /// Mean per-pixel |𝓓(𝓔(x)) − x| over the supplied images.
    pub reconstruction_mae: f64,
}

/// Parameters live under the `ae.` prefix and are frozen outside [`Autoencoder::pretrain`].
#[derive(Clone, Debug)]
pub struct Autoencoder {
    cfg: AutoencoderConfig,
    ps: ParamStore<f32>,
    layers: Option<Layers>,
}

impl Autoencoder {
    pub fn new(cfg: &AutoencoderConfig, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let layers = match cfg.mode {
            LatentMode::Identity => None,
            LatentMode::Learned => {
                let mut rng = seed::rng(seed_value);
                let h = cfg.hidden;
                let c = cfg.latent_channels;
                let he = Init::He;
                let enc = vec![
                    Conv2d::new(&mut ps, "ae.enc0", 3, h, 3, 1, he, &mut rng),
                    Conv2d::new(&mut ps, "ae.enc1", h, 2 * h, 3, 2, he, &mut rng),
                    Conv2d::new(&mut ps, "ae.enc2", 2 * h, 4 * h, 3, 2, he, &mut rng),
                    Conv2d::new(&mut ps, "ae.enc3", 4 * h, c, 1, 1, Init::Normal(0.05), &mut rng),
                ];
                let dec = vec![
                    Conv2d::new(&mut ps, "ae.dec0", c, 4 * h, 3, 1, he, &mut rng),
                    Conv2d::new(&mut ps, "ae.dec1", 4 * h, 2 * h, 3, 1, he, &mut rng),
                    Conv2d::new(&mut ps, "ae.dec2", 2 * h, h, 3, 1, he, &mut rng),
                    Conv2d::new(&mut ps, "ae.dec3", h, 3, 3, 1, Init::Normal(0.05), &mut rng),
                ];
                Some(Layers { enc, dec })
            }
        };
        ps.freeze_all();
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            layers,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.ps
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    pub fn down(&self) -> usize {
        self.cfg.down
    }

    fn encode_raw(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let Some(l) = &self.layers else { return x };
        let x = g.scale(x, 2.0);
        let mut h = g.add_scalar(x, -1.0);
        for (i, c) in l.enc.iter().enumerate() {
            h = c.forward(g, &self.ps, h);
            if i + 1 < l.enc.len() {
                h = g.silu(h);
            }
        }
        h
    }

    fn decode_raw(&self, g: &mut Graph<f32>, z: Var) -> Var {
        let Some(l) = &self.layers else { return z };
        let mut h = z;
        for (i, c) in l.dec.iter().enumerate() {
            h = c.forward(g, &self.ps, h);
            if i + 1 < l.dec.len() {
                h = g.silu(h);
                if i < 2 {
                    h = g.upsample2(h);
                }
            }
        }
        let h = g.add_scalar(h, 1.0);
        g.scale(h, 0.5)
    }

    /// `x: [N, 3, H, W]` → scaled latent `[N, c, H/down, W/down]`.
    pub fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % self.cfg.down != 0 || s[3] % self.cfg.down != 0 {
            return Err(Error::Dimension(format!(
                "cannot encode {s:?} with downsampling {}",
                self.cfg.down
            )));
        }
        let z = self.encode_raw(g, x);
        Ok(if self.cfg.scale == 1.0 { z } else { g.scale(z, self.cfg.scale) })
    }

    /// Inverse of [`Self::encode_graph`], unclamped.
    pub fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.cfg.latent_channels {
            return Err(Error::Dimension(format!(
                "latent must be [N, {}, h, w], got {s:?}",
                self.cfg.latent_channels
            )));
        }
        let z = if self.cfg.scale == 1.0 { z } else { g.scale(z, 1.0 / self.cfg.scale) };
        Ok(self.decode_raw(g, z))
    }

    pub fn encode_latent(&self, x: &Image) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let xv = g.input(x.to_tensor());
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    /// Encode many images, in parallel, into one `[N, c, h, w]` tensor.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        if images.is_empty() {
            return Err(Error::Data("no images to encode".into()));
        }
        let parts: Result<Vec<Tensor<f32>>> = par::map(images, |im| self.encode_latent(im)).into_iter().collect();
        Ok(Tensor::stack(&parts?))
    }

    /// Decode item `index` of a latent batch into a clamped image.
    pub fn decode_latent(&self, z: &Tensor<f32>, index: usize) -> Result<Image> {
        let s = z.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::Dimension(format!("latent batch {s:?}, index {index}")));
        }
        let mut g = Graph::new();
        let zv = g.input(z.batch_item(index));
        let x = self.decode_graph(&mut g, zv)?;
        Ok(Image::from_tensor(g.value(x), 0)?.clamped())
    }

    pub fn decode_all(&self, z: &Tensor<f32>) -> Result<Vec<Image>> {
        let idx: Vec<usize> = (0..z.shape()[0]).collect();
        par::map(&idx, |&i| self.decode_latent(z, i)).into_iter().collect()
    }

    /// Train the learned autoencoder on random crops, then freeze it and set
    /// the latent scale from the encoded images. No-op in identity mode.
    pub fn pretrain(&mut self, images: &[&Image], opts: &PretrainOptions) -> Result<AutoencoderStats> {
        if self.layers.is_none() {
            return Ok(AutoencoderStats {
                epoch_losses: Vec::new(),
                reconstruction_mae: 0.0,
            });
        }
        if images.is_empty() {
            return Err(Error::Data("autoencoder pre-training needs images".into()));
        }
        let crop = opts.crop;
        if crop % self.cfg.down != 0 || images.iter().any(|im| im.width() < crop || im.height() < crop) {
            return Err(Error::Dimension(format!("crop {crop} incompatible with images")));
        }
        self.ps.set_trainable_prefix("ae.", true);
        self.cfg.scale = 1.0;
        let mut rng = seed::rng(opts.seed);
        let mut opt = Adam::new(opts.lr);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let crops: Vec<Image> = chunk
                    .iter()
                    .map(|&i| random_crop(images[i], crop, self.cfg.down, &mut rng))
                    .collect();
                let refs: Vec<&Image> = crops.iter().collect();
                let x = crate::image::batch_tensor::<f32>(&refs)?;
                let mut g = Graph::new();
                let xv = g.input(x);
                let z = self.encode_raw(&mut g, xv);
                let y = self.decode_raw(&mut g, z);
                let loss = g.mse(y, xv);
                total += g.value(loss).data()[0] as f64;
                batches += 1;
                let grads = g.backward(loss);
                opt.step(&mut self.ps, &grads);
            }
            epoch_losses.push(total / batches.max(1) as f64);
        }
        self.ps.freeze_all();
        if !self.ps.all_finite() {
            return Err(Error::Numeric("autoencoder parameters diverged".into()));
        }
        let probe: Vec<&Image> = images.iter().take(opts.stats_images).copied().collect();
        let z = self.encode_images(&probe)?;
        let n = z.len() as f64;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        self.cfg.scale = 1.0 / var.sqrt().max(1e-6);
        let reconstruction_mae = self.reconstruction_mae(&probe)?;
        Ok(AutoencoderStats {
            epoch_losses,
            reconstruction_mae,
        })
    }

    /// Mean per-pixel |𝓓(𝓔(x)) − x| over `images`.
    pub fn reconstruction_mae(&self, images: &[&Image]) -> Result<f64> {
        let errs: Result<Vec<f64>> = par::map(images, |im| {
            let z = self.encode_latent(im)?;
            let back = self.decode_latent(&z, 0)?;
            Ok(back
                .data()
                .iter()
                .zip(im.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / im.data().len() as f64)
        })
        .into_iter()
        .collect();
        let errs = errs?;
        Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
    }

    /// Restore parameters and the latent scale from a checkpoint.
    pub fn load(&mut self, params: &ParamStore<f32>, scale: f64) -> Result<()> {
        let n = self.ps.load_from(params);
        if n != self.ps.len() {
            return Err(Error::Checkpoint(format!(
                "autoencoder checkpoint supplied {n} of {} tensors",
                self.ps.len()
            )));
        }
        self.ps.freeze_all();
        self.cfg.scale = scale;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop: usize,
    pub seed: u64,
    /// Images used to estimate the latent scale and reconstruction error.
    pub stats_images: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            crop: 32,
            seed: 0,
            stats_images: 256,
        }
    }
}

fn random_crop<R: Rng + ?Sized>(im: &Image, side: usize, align: usize, rng: &mut R) -> Image {
    let (w, h) = im.dims();
    let x0 = rng.random_range(0..=(w - side) / align) * align;
    let y0 = rng.random_range(0..=(h - side) / align) * align;
    let flip = rng.random::<bool>();
    Image::from_fn(side, side, |x, y| {
        let sx = if flip { x0 + side - 1 - x } else { x0 + x };
        [im.get(sx, y0 + y, 0), im.get(sx, y0 + y, 1), im.get(sx, y0 + y, 2)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let c = (i % 5) as f32 / 5.0;
                Image::from_fn(16, 16, move |x, y| {
                    let v = if (x / 4 + y / 4 + i) % 2 == 0 { 0.8 } else { 0.2 };
                    [v, c, 1.0 - v]
                })
            })
            .collect()
    }

    #[test]
    fn identity_mode_is_exact() {
        let ae = Autoencoder::new(&AutoencoderConfig::identity(), 0).unwrap();
        let x = Image::from_fn(8, 4, |x, y| [x as f32 / 8.0, y as f32 / 4.0, 0.5]);
        let z = ae.encode_latent(&x).unwrap();
        assert_eq!(z.data(), x.to_tensor::<f32>().data());
        assert_eq!(ae.decode_latent(&z, 0).unwrap(), x);
        let c = Image::filled(8, 8, 0.5);
        assert_eq!(ae.decode_latent(&ae.encode_latent(&c).unwrap(), 0).unwrap(), c);
    }

    #[test]
    fn learned_shapes_and_errors() {
        let ae = Autoencoder::new(&AutoencoderConfig::default(), 0).unwrap();
        let z = ae.encode_latent(&Image::filled(64, 64, 0.3)).unwrap();
        assert_eq!(z.shape(), &[1, 4, 16, 16]);
        let x = ae.decode_latent(&z, 0).unwrap();
        assert_eq!(x.dims(), (64, 64));
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(ae.encode_latent(&Image::filled(30, 30, 0.3)), Err(Error::Dimension(_))));
        let bad = AutoencoderConfig {
            latent_channels: 4,
            ..AutoencoderConfig::identity()
        };
        assert!(Autoencoder::new(&bad, 0).is_err());
    }

    #[test]
    fn pretraining_reduces_error_and_freezes() {
        let imgs = blobs(40);
        let refs: Vec<&Image> = imgs.iter().collect();
        let cfg = AutoencoderConfig {
            hidden: 8,
            ..AutoencoderConfig::default()
        };
        let mut ae = Autoencoder::new(&cfg, 1).unwrap();
        let before = ae.reconstruction_mae(&refs).unwrap();
        let stats = ae
            .pretrain(
                &refs,
                &PretrainOptions {
                    epochs: 15,
                    batch_size: 8,
                    crop: 16,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(stats.reconstruction_mae < before, "{} !< {before}", stats.reconstruction_mae);
        assert_eq!(ae.params().numel(true), 0);
        let z = ae.encode_images(&refs).unwrap();
        let var = z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(var > 0.3 && var < 3.0, "latent second moment {var}");
    }

    #[test]
    fn encoding_is_deterministic() {
        let ae = Autoencoder::new(&AutoencoderConfig::default(), 3).unwrap();
        let x = &blobs(1)[0];
        let big = Image::from_fn(32, 32, |a, b| [x.get(a % 16, b % 16, 0), 0.1, 0.9]);
        assert_eq!(ae.encode_latent(&big).unwrap(), ae.encode_latent(&big).unwrap());
    }
}

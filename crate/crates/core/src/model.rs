//! The super-resolution bundle: frozen autoencoder and text encoder, the
//! trainable U-Net and conditioning encoder, plus training and sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::classifier::ClassifierModel;
use crate::conditioning::{ConditionConfig, ConditionEncoder};
use crate::degradation::bicubic_upsample;
use crate::denoiser::{DenoiserConfig, UNet};
use crate::diffusion::{
    ddim_sample, loss_graph, randn_like, sample_timesteps, stratified_timesteps, CondInputs, DiffusionBatch, EpsModel, NoiseSchedule,
    ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::latent::{Autoencoder, AutoencoderConfig, PretrainOptions};
use crate::nn::{Adam, Gradients, Graph, ParamStore, Tensor, Var};
use crate::text::{text_gate, Phase, PromptSet, TextConditioner, TextEncoder, TextEncoderConfig};
use crate::{par, seed};

pub const CHECKPOINT_KIND: &str = "sr-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    /// Probability of replacing the prompt embedding with the null text, so
    /// the text-free inference path is seen during training.
    pub text_dropout: f64,
    /// Freeze the denoiser and train only the conditioning encoder. The
    /// denoiser is first fitted unconditionally for `denoiser_pretrain_epochs`.
    pub strict_paper: bool,
    pub denoiser_pretrain_epochs: usize,
    pub lr_decay: LrDecay,
    pub timesteps: TimestepSampling,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from `lr` down to `lr * final_fraction` over the phase.
    Cosine { final_fraction: f64 },
}

impl LrDecay {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => base,
            LrDecay::Cosine { final_fraction } => {
                let p = step as f64 / total.max(1) as f64;
                base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
        }
    }
}

/// How training timesteps are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// Independent uniform draws per example.
    Uniform,
    /// Uniform marginals, stratified over each epoch so every slice of
    /// `[0, T)` is visited equally often.
    Stratified,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            grad_clip: Some(1.0),
            text_dropout: 0.5,
            strict_paper: false,
            denoiser_pretrain_epochs: 10,
            lr_decay: LrDecay::Cosine { final_fraction: 0.05 },
            timesteps: TimestepSampling::Stratified,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    pub factor: usize,
    pub hr_side: usize,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderConfig,
    pub denoiser: DenoiserConfig,
    pub condition: ConditionConfig,
    pub text: TextEncoderConfig,
    pub prompts: PromptSet,
    pub use_text: bool,
    pub seed: u64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            factor: 8,
            hr_side: 64,
            schedule: ScheduleConfig {
                timesteps: 200,
                ..Default::default()
            },
            autoencoder: AutoencoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            condition: ConditionConfig::default(),
            text: TextEncoderConfig::default(),
            prompts: PromptSet::default(),
            use_text: true,
            seed: 0,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.hr_side == 0 || self.hr_side % self.factor != 0 {
            return Err(Error::Config(format!(
                "hr side {} must be a positive multiple of factor {}",
                self.hr_side, self.factor
            )));
        }
        self.autoencoder.validate()?;
        self.denoiser.validate()?;
        let grid = self.autoencoder.down << (self.denoiser.depth() - 1);
        if self.hr_side % grid != 0 {
            return Err(Error::Config(format!("hr side {} not divisible by {grid}", self.hr_side)));
        }
        if self.condition.num_timesteps != self.schedule.timesteps {
            return Err(Error::Config("conditioning and schedule disagree on T".into()));
        }
        if self.autoencoder.latent_channels != self.denoiser.latent_channels {
            return Err(Error::Config("autoencoder and denoiser disagree on latent channels".into()));
        }
        if self.text.max_len != self.denoiser.text_len || self.text.dim != self.denoiser.text_dim {
            return Err(Error::Config("text encoder and denoiser disagree on text shape".into()));
        }
        Ok(())
    }
}

/// Precomputed per-record training inputs. Every tensor here comes from a
/// frozen component, so caching them is equivalent to recomputing per step.
pub struct TrainingSet {
    pub z0: Tensor<f32>,
    pub z_lr: Tensor<f32>,
    pub probs: Tensor<f32>,
    pub names: Vec<String>,
    pub categories: Vec<String>,
}

/// One training example before encoding.
pub struct TrainingExample<'a> {
    pub hr: &'a Image,
    pub reference: &'a Image,
    pub name: &'a str,
    pub category: &'a str,
}

/// Gradient norms of every component for one full-graph training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub autoencoder: f64,
    pub text_encoder: f64,
    pub classifier: f64,
    pub denoiser: f64,
    pub condition_encoder: f64,
}

impl GradientProbe {
    pub fn frozen_exactly_zero(&self) -> bool {
        self.autoencoder == 0.0 && self.text_encoder == 0.0 && self.classifier == 0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step {
        phase: String,
        epoch: usize,
        step: usize,
        loss: f64,
        prompts: Vec<String>,
    },
    Epoch {
        phase: String,
        epoch: usize,
        mean_loss: f64,
        probe: GradientProbe,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pretrain_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub probes: Vec<GradientProbe>,
}

pub struct SrModel {
    cfg: SrConfig,
    schedule: NoiseSchedule,
    ae: Autoencoder,
    unet: UNet,
    cond: ConditionEncoder,
    ps: ParamStore<f32>,
    text: TextConditioner,
    rng_state: Option<seed::RngState>,
}

/// The denoiser alone, without δ_θ features.
struct Unconditional<'a>(&'a SrModel);

impl EpsModel<f32> for Unconditional<'_> {
    fn eps_hat(&self, g: &mut Graph<f32>, z_t: Var, t: &[usize], cond: &CondInputs<f32>) -> Result<Var> {
        let m = self.0;
        let text = cond.text.as_ref().map(|x| g.input(x.clone()));
        m.unet.predict_eps(g, &m.ps, z_t, t, None, text)
    }
}

impl EpsModel<f32> for SrModel {
    fn eps_hat(&self, g: &mut Graph<f32>, z_t: Var, t: &[usize], cond: &CondInputs<f32>) -> Result<Var> {
        let z_lr = g.input(cond.z_lr.clone());
        let feats = self.cond.forward(g, &self.ps, &cond.class_probs, t, z_lr)?;
        let text = cond.text.as_ref().map(|x| g.input(x.clone()));
        self.unet.predict_eps(g, &self.ps, z_t, t, Some(&feats), text)
    }
}

fn grad_norm(grads: &Gradients<f32>, ps: &ParamStore<f32>, prefix: &str) -> f64 {
    ps.iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .filter_map(|(id, _)| grads.param(ps, id))
        .map(|t| t.sq_norm())
        .fold(0.0, |a, b| a + b)
        .sqrt()
}

impl SrModel {
    /// Fresh model with an untrained autoencoder.
    pub fn new(cfg: &SrConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::derived_rng(cfg.seed, "sr-model");
        let mut ps = ParamStore::new();
        let unet = UNet::new(&cfg.denoiser, &mut ps, &mut rng)?;
        let cond = ConditionEncoder::new(&cfg.condition, &cfg.denoiser, &mut ps, &mut rng)?;
        let ae = Autoencoder::new(&cfg.autoencoder, seed::derive_seed(cfg.seed, "autoencoder"))?;
        let text = TextConditioner {
            prompts: cfg.prompts.clone(),
            encoder: TextEncoder::new(&cfg.text)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            schedule: cfg.schedule.build()?,
            ae,
            unet,
            cond,
            ps,
            text,
            rng_state: None,
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.ae
    }

    pub fn autoencoder_mut(&mut self) -> &mut Autoencoder {
        &mut self.ae
    }

    pub fn text(&self) -> &TextConditioner {
        &self.text
    }

    /// U-Net (`unet.`) and conditioning-encoder (`cond.`) parameters.
    pub fn params(&self) -> &ParamStore<f32> {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.ps
    }

    /// Training RNG position after the last epoch, if trained.
    pub fn rng_state(&self) -> Option<&seed::RngState> {
        self.rng_state.as_ref()
    }

    pub fn trainable_params(&self) -> usize {
        self.ps.numel(false)
    }

    pub fn pretrain_autoencoder(&mut self, images: &[&Image], opts: &PretrainOptions) -> Result<crate::latent::AutoencoderStats> {
        self.ae.pretrain(images, opts)
    }

    /// Encode HR targets and references and collect classifier evidence.
    pub fn prepare(&self, examples: &[TrainingExample], classifier: &ClassifierModel) -> Result<TrainingSet> {
        if examples.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        if classifier.taxonomy().len() != self.cfg.condition.num_classes {
            return Err(Error::Config(format!(
                "classifier has {} classes, conditioning expects {}",
                classifier.taxonomy().len(),
                self.cfg.condition.num_classes
            )));
        }
        let side = self.cfg.hr_side;
        for e in examples {
            if e.hr.dims() != (side, side) || e.reference.dims() != (side, side) {
                return Err(Error::Dimension(format!("training images must be {side}x{side}")));
            }
        }
        let hr: Vec<&Image> = examples.iter().map(|e| e.hr).collect();
        let refs: Vec<&Image> = examples.iter().map(|e| e.reference).collect();
        let probs = classifier.probabilities(&refs)?;
        let k = self.cfg.condition.num_classes;
        Ok(TrainingSet {
            z0: self.ae.encode_images(&hr)?,
            z_lr: self.ae.encode_images(&refs)?,
            probs: Tensor::from_vec(&[probs.len(), k], probs.iter().flatten().map(|&v| v as f32).collect()),
            names: examples.iter().map(|e| e.name.to_string()).collect(),
            categories: examples.iter().map(|e| e.category.to_string()).collect(),
        })
    }

    fn batch<R: Rng + ?Sized>(
        &self,
        set: &TrainingSet,
        idx: &[usize],
        t: Vec<usize>,
        text_dropout: f64,
        rng: &mut R,
    ) -> Result<(DiffusionBatch<f32>, Vec<String>)> {
        let z0 = crate::diffusion::select_rows(&set.z0, idx);
        let eps = randn_like(z0.shape(), rng);
        let mut prompts = Vec::new();
        let text = match text_gate(Phase::Train, &self.text).filter(|_| self.cfg.use_text) {
            Some(tc) => {
                let mut parts = Vec::with_capacity(idx.len());
                for &i in idx {
                    if rng.random::<f64>() < text_dropout {
                        prompts.push(String::new());
                        parts.push(tc.encoder.null_embedding());
                    } else {
                        let (p, e) = tc.sample_embedding(&set.names[i], &set.categories[i], rng)?;
                        prompts.push(p);
                        parts.push(e);
                    }
                }
                Some(Tensor::stack(&parts))
            }
            None => None,
        };
        let cond = CondInputs {
            class_probs: crate::diffusion::select_rows(&set.probs, idx),
            z_lr: crate::diffusion::select_rows(&set.z_lr, idx),
            text,
        };
        Ok((DiffusionBatch { z0, t, eps, cond }, prompts))
    }

    /// One full-graph step on a single example: autoencoder, classifier and
    /// text encoder run inside the graph, and the gradient norm reaching each
    /// component is measured. Parameters are not updated.
    pub fn probe_gradients(
        &self,
        ex: &TrainingExample,
        classifier: &ClassifierModel,
        t: usize,
        seed_value: u64,
    ) -> Result<GradientProbe> {
        let mut rng = seed::rng(seed_value);
        let mut g = Graph::new();
        let hr = g.input(batch_tensor(&[ex.hr])?);
        let rf = g.input(batch_tensor(&[ex.reference])?);
        let z0 = self.ae.encode_graph(&mut g, hr)?;
        let z_lr = self.ae.encode_graph(&mut g, rf)?;
        let clf_in = g.input(batch_tensor(&[&classifier.prepare(ex.reference)?])?);
        let (_, logits) = classifier.forward_graph(&mut g, clf_in);
        let probs = g.softmax(logits);
        let b = self.cond.condition_vector(&mut g, &self.ps, probs, &[t]);
        let feats = self.cond.encode_conditions(&mut g, &self.ps, b, z_lr)?;
        let prompt = self
            .text
            .prompts
            .render_prompt(crate::text::pick_prompt(&mut rng), ex.name, ex.category)?;
        let txt = self.text.encoder.encode_graph(&mut g, &prompt)?;
        let txt = g.reshape(txt, &[1, self.cfg.text.max_len, self.cfg.text.dim]);
        let ab = self.schedule.alpha_bar(t)?;
        let eps = g.input(randn_like(g.shape(z0), &mut rng));
        let a = g.scale(z0, ab.sqrt());
        let e = g.scale(eps, (1.0 - ab).sqrt());
        let z_t = g.add(a, e);
        let pred = self.unet.predict_eps(&mut g, &self.ps, z_t, &[t], Some(&feats), Some(txt))?;
        let loss = g.mse(pred, eps);
        let grads = g.backward(loss);
        Ok(GradientProbe {
            autoencoder: grad_norm(&grads, self.ae.params(), ""),
            text_encoder: grad_norm(&grads, self.text.encoder.params(), ""),
            classifier: grad_norm(&grads, classifier.params(), ""),
            denoiser: grad_norm(&grads, &self.ps, "unet."),
            condition_encoder: grad_norm(&grads, &self.ps, "cond."),
        })
    }

    fn run_epochs(
        &mut self,
        set: &TrainingSet,
        probe_ex: &TrainingExample,
        classifier: &ClassifierModel,
        opts: &TrainOptions,
        phase: &str,
        epochs: usize,
        unconditional: bool,
        log: &mut dyn FnMut(&TrainEvent),
        report: &mut TrainReport,
    ) -> Result<Vec<f64>> {
        let n = set.z0.shape()[0];
        let mut rng = seed::derived_rng(opts.seed, &format!("train/{phase}"));
        let mut opt = Adam::new(opts.lr).with_clip(opts.grad_clip);
        let mut order: Vec<usize> = (0..n).collect();
        let mut losses = Vec::with_capacity(epochs);
        let bs = opts.batch_size.max(1);
        let total_steps = epochs * n.div_ceil(bs);
        let mut global_step = 0;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let ts = match opts.timesteps {
                TimestepSampling::Uniform => sample_timesteps(n, self.schedule.len(), &mut rng),
                TimestepSampling::Stratified => stratified_timesteps(n, self.schedule.len(), &mut rng),
            };
            let mut total = 0.0;
            for (step, (chunk, t)) in order.chunks(bs).zip(ts.chunks(bs)).enumerate() {
                opt.lr = opts.lr_decay.lr_at(opts.lr, global_step, total_steps);
                global_step += 1;
                let (batch, prompts) = self.batch(set, chunk, t.to_vec(), opts.text_dropout, &mut rng)?;
                let mut g = Graph::new();
                let loss = if unconditional {
                    loss_graph(&mut g, &batch, &self.schedule, &Unconditional(self))?
                } else {
                    loss_graph(&mut g, &batch, &self.schedule, self)?
                };
                let lv = g.value(loss).data()[0] as f64;
                total += lv * chunk.len() as f64;
                let grads = g.backward(loss);
                opt.step(&mut self.ps, &grads);
                log(&TrainEvent::Step {
                    phase: phase.into(),
                    epoch,
                    step,
                    loss: lv,
                    prompts,
                });
            }
            if !self.ps.all_finite() {
                return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
            }
            let mean_loss = total / n as f64;
            let t = rng.random_range(0..self.schedule.len());
            let probe = self.probe_gradients(probe_ex, classifier, t, rng.random())?;
            if !probe.frozen_exactly_zero() {
                return Err(Error::Numeric(format!("a frozen component received gradient: {probe:?}")));
            }
            log(&TrainEvent::Epoch {
                phase: phase.into(),
                epoch,
                mean_loss,
                probe: probe.clone(),
            });
            report.probes.push(probe);
            losses.push(mean_loss);
        }
        self.rng_state = Some(seed::RngState::capture(&rng));
        Ok(losses)
    }

    /// Train on a prepared set. `probe_ex` feeds the per-epoch frozen-gradient
    /// check.
    pub fn train(
        &mut self,
        set: &TrainingSet,
        probe_ex: &TrainingExample,
        classifier: &ClassifierModel,
        opts: &TrainOptions,
        log: &mut dyn FnMut(&TrainEvent),
    ) -> Result<TrainReport> {
        if !(0.0..=1.0).contains(&opts.text_dropout) {
            return Err(Error::Config("text dropout must lie in [0, 1]".into()));
        }
        if classifier.params().numel(true) != 0 {
            return Err(Error::Config("classifier must be frozen before SR training".into()));
        }
        let mut report = TrainReport::default();
        if opts.strict_paper {
            self.ps.set_trainable_prefix("cond.", false);
            self.ps.set_trainable_prefix("unet.", true);
            report.pretrain_losses = self.run_epochs(
                set,
                probe_ex,
                classifier,
                opts,
                "denoiser_pretrain",
                opts.denoiser_pretrain_epochs,
                true,
                log,
                &mut report,
            )?;
            self.ps.set_trainable_prefix("unet.", false);
            self.ps.set_trainable_prefix("cond.", true);
        } else {
            self.ps.set_trainable_prefix("", true);
        }
        report.epoch_losses =
            self.run_epochs(set, probe_ex, classifier, opts, "train", opts.epochs, false, log, &mut report)?;
        self.ps.freeze_all();
        Ok(report)
    }

    /// Super-resolve LR images: classifier evidence from the bicubic
    /// reference, no text, DDIM from seeded noise. Items are processed in
    /// chunks of `chunk`, each with its own derived seed.
    pub fn upsample(
        &self,
        lr: &[&Image],
        classifier: &ClassifierModel,
        steps: usize,
        eta: f64,
        seed_value: u64,
        chunk: usize,
    ) -> Result<Vec<Image>> {
        if steps == 0 {
            return Err(Error::Argument("sampling needs at least one step".into()));
        }
        if lr.is_empty() {
            return Ok(Vec::new());
        }
        let side = self.cfg.hr_side / self.cfg.factor;
        if let Some(bad) = lr.iter().find(|im| im.dims() != (side, side)) {
            return Err(Error::Dimension(format!(
                "LR input {:?} incompatible with factor {} and output side {}",
                bad.dims(),
                self.cfg.factor,
                self.cfg.hr_side
            )));
        }
        let refs: Result<Vec<Image>> = par::map(lr, |im| bicubic_upsample(im, self.cfg.factor)).into_iter().collect();
        let refs = refs?;
        let mut out = Vec::with_capacity(lr.len());
        for (ci, part) in refs.chunks(chunk.max(1)).enumerate() {
            let pr: Vec<&Image> = part.iter().collect();
            let probs = classifier.probabilities(&pr)?;
            let k = self.cfg.condition.num_classes;
            let cond = CondInputs {
                class_probs: Tensor::from_vec(&[pr.len(), k], probs.iter().flatten().map(|&v| v as f32).collect()),
                z_lr: self.ae.encode_images(&pr)?,
                text: text_gate(Phase::Infer, &self.text).map(|tc| Tensor::stack(&vec![tc.encoder.null_embedding(); pr.len()])),
            };
            let shape = cond.z_lr.shape().to_vec();
            let s = seed::derive_seed(seed_value, &format!("upsample/{ci}"));
            let z = ddim_sample(&shape, &self.schedule, steps, eta, s, |z_t, t| {
                let mut g = Graph::new();
                let zv = g.input(z_t.clone());
                let ts = vec![t; shape[0]];
                let e = self.eps_hat(&mut g, zv, &ts, &cond)?;
                Ok(g.value(e).clone())
            })?;
            out.extend(self.ae.decode_all(&z)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut all = ParamStore::new();
        for (_, p) in self.ps.iter().chain(self.ae.params().iter()) {
            all.add(p.name.clone(), p.value.clone());
        }
        let meta = serde_json::json!({
            "config": self.cfg,
            "latent_scale": self.ae.config().scale,
            "schedule": {
                "betas": self.schedule.betas(),
                "alpha_bars": self.schedule.alpha_bars(),
            },
            "rng_state": self.rng_state,
        });
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &all)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: SrConfig = serde_json::from_value(c.meta["config"].clone())?;
        let scale = c.meta["latent_scale"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("missing latent scale".into()))?;
        let mut m = Self::new(&cfg)?;
        let n = m.ps.load_from(&c.params);
        if n != m.ps.len() {
            return Err(Error::Checkpoint(format!("model checkpoint supplied {n} of {} tensors", m.ps.len())));
        }
        m.ps.freeze_all();
        m.ae.load(&c.params, scale)?;
        let stored: Vec<f64> = serde_json::from_value(c.meta["schedule"]["alpha_bars"].clone())?;
        if stored.len() != m.schedule.len()
            || stored.iter().zip(m.schedule.alpha_bars()).any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::Checkpoint("stored schedule does not match its config".into()));
        }
        m.rng_state = serde_json::from_value(c.meta["rng_state"].clone())?;
        Ok(m)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path, CHECKPOINT_KIND)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{CategoryTaxonomy, ClassifierConfig};

    fn tiny_cfg() -> SrConfig {
        SrConfig {
            hr_side: 32,
            factor: 4,
            schedule: ScheduleConfig {
                timesteps: 20,
                ..Default::default()
            },
            condition: ConditionConfig {
                num_classes: 2,
                class_dim: 8,
                time_dim: 8,
                num_timesteps: 20,
                zero_init_heads: true,
            },
            denoiser: DenoiserConfig {
                base_channels: 8,
                channel_mults: vec![1, 2],
                groups: 4,
                time_dim: 8,
                text_len: 16,
                text_dim: 64,
                ..Default::default()
            },
            autoencoder: AutoencoderConfig {
                hidden: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn classifier() -> ClassifierModel {
        let tax = CategoryTaxonomy::new(vec!["a".into(), "b".into()]).unwrap();
        let mut m = ClassifierModel::new(
            &tax,
            &ClassifierConfig {
                channels: vec![4, 4, 4, 4],
                input_side: 32,
                ..Default::default()
            },
        )
        .unwrap();
        m.params_mut().freeze_all();
        m
    }

    fn images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| Image::from_fn(32, 32, |x, y| [(x + i) as f32 / 40.0, y as f32 / 32.0, 0.5]))
            .collect()
    }

    #[test]
    fn cosine_decay_endpoints() {
        let d = LrDecay::Cosine { final_fraction: 0.1 };
        assert_eq!(d.lr_at(1.0, 0, 10), 1.0);
        assert!((d.lr_at(1.0, 10, 10) - 0.1).abs() < 1e-12);
        assert!((d.lr_at(1.0, 5, 10) - 0.55).abs() < 1e-12);
        assert_eq!(LrDecay::Constant.lr_at(0.3, 7, 10), 0.3);
    }

    #[test]
    fn probe_sees_zero_frozen_gradients() {
        let m = SrModel::new(&tiny_cfg()).unwrap();
        let clf = classifier();
        let im = images(1);
        let ex = TrainingExample {
            hr: &im[0],
            reference: &im[0],
            name: "MV Test",
            category: "a",
        };
        let p = m.probe_gradients(&ex, &clf, 10, 1).unwrap();
        assert!(p.frozen_exactly_zero(), "{p:?}");
        assert!(p.denoiser > 0.0);
    }

    #[test]
    fn training_runs_and_sampling_is_deterministic() {
        let mut m = SrModel::new(&tiny_cfg()).unwrap();
        let clf = classifier();
        let im = images(8);
        let ex: Vec<TrainingExample> = im
            .iter()
            .map(|i| TrainingExample {
                hr: i,
                reference: i,
                name: "MV Test",
                category: "b",
            })
            .collect();
        let set = m.prepare(&ex, &clf).unwrap();
        let mut prompts = 0;
        let rep = m
            .train(
                &set,
                &ex[0],
                &clf,
                &TrainOptions {
                    epochs: 2,
                    batch_size: 4,
                    ..Default::default()
                },
                &mut |e| {
                    if let TrainEvent::Step { prompts: p, .. } = e {
                        prompts += p.len();
                    }
                },
            )
            .unwrap();
        assert_eq!(rep.epoch_losses.len(), 2);
        assert_eq!(prompts, 16);
        assert_eq!(m.params().numel(true), 0);
        let lr = Image::filled(8, 8, 0.4);
        let a = m.upsample(&[&lr], &clf, 3, 0.0, 9, 8).unwrap();
        let b = m.upsample(&[&lr], &clf, 3, 0.0, 9, 8).unwrap();
        assert_eq!(a[0].dims(), (32, 32));
        assert_eq!(a[0].to_rgb8(), b[0].to_rgb8());
        assert!(matches!(m.upsample(&[&lr], &clf, 0, 0.0, 9, 8), Err(Error::Argument(_))));
        assert!(matches!(
            m.upsample(&[&Image::filled(6, 6, 0.1)], &clf, 2, 0.0, 9, 8),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn checkpoint_restores_outputs() {
        let m = SrModel::new(&tiny_cfg()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = SrModel::load(&p).unwrap();
        let clf = classifier();
        let lr = Image::filled(8, 8, 0.3);
        assert_eq!(
            m.upsample(&[&lr], &clf, 2, 0.0, 1, 4).unwrap()[0],
            back.upsample(&[&lr], &clf, 2, 0.0, 1, 4).unwrap()[0]
        );
    }
}

//! Noise schedules, forward noising, the ε-prediction objective and the DDIM
//! sampler over latent tensors.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Tensor, Var};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Squared-cosine ᾱ curve (offset 0.008); `beta_start`/`beta_end` are unused.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    snr: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit per-step betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Argument("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Argument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|&a| a <= 0.0) {
            return Err(Error::Numeric("cumulative alpha underflowed to zero".into()));
        }
        let snr = alpha_bars.iter().map(|&a| a / (1.0 - a)).collect();
        Ok(Self {
            betas,
            alpha_bars,
            snr,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn snr(&self) -> &[f64] {
        &self.snr
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Index(format!("timestep {t} outside [0, {})", self.len()))
        })
    }

    /// `steps` timesteps from `T−1` down to 0, evenly spaced.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 {
            return Err(Error::Argument("sampling needs at least one step".into()));
        }
        if steps > t {
            return Err(Error::Argument(format!(
                "{steps} sampling steps exceed the {t} schedule timesteps"
            )));
        }
        if steps == 1 {
            return Ok(vec![t - 1]);
        }
        let span = (t - 1) as f64 / (steps - 1) as f64;
        Ok((0..steps).rev().map(|i| (i as f64 * span).round() as usize).collect())
    }
}

pub fn make_schedule(kind: ScheduleKind, t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Argument("schedule needs T >= 1".into()));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::Argument(format!(
                    "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
                )));
            }
            if t == 1 {
                vec![beta_start]
            } else {
                (0..t)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let f = |i: usize| {
                let s = 0.008;
                (((i as f64 / t as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=t)
                .map(|i| (1.0 - f(i) / f(i - 1)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

pub fn snr_at(s: &NoiseSchedule, t: usize) -> Result<f64> {
    s.snr
        .get(t)
        .copied()
        .ok_or_else(|| Error::Index(format!("timestep {t} outside [0, {})", s.len())))
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · eps` for a single timestep.
pub fn q_sample<S: Scalar>(z0: &Tensor<S>, t: usize, eps: &Tensor<S>, s: &NoiseSchedule) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = s.alpha_bar(t)?;
    let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    let data = z0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Ok(Tensor::from_vec(z0.shape(), data))
}

/// [`q_sample`] with one timestep per batch item along axis 0.
pub fn q_sample_batch<S: Scalar>(
    z0: &Tensor<S>,
    ts: &[usize],
    eps: &Tensor<S>,
    s: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let n = z0.shape().first().copied().unwrap_or(0);
    if ts.len() != n {
        return Err(Error::Dimension(format!("{} timesteps for a batch of {n}", ts.len())));
    }
    let per = z0.len() / n.max(1);
    let mut out = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        let ab = s.alpha_bar(t)?;
        let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        let zs = &z0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(zs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Ok(Tensor::from_vec(z0.shape(), out))
}

/// Conditioning inputs of one batch: class evidence, LR latent and optional
/// text embeddings.
#[derive(Clone, Debug)]
pub struct CondInputs<S> {
    /// `[N, K]` probabilities (one-hot during training).
    pub class_probs: Tensor<S>,
    /// `[N, C, h, w]` latent of the LR input on the target latent grid.
    pub z_lr: Tensor<S>,
    /// `[N, L, d_txt]`, present only during training.
    pub text: Option<Tensor<S>>,
}

impl<S: Scalar> CondInputs<S> {
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            class_probs: select_rows(&self.class_probs, idx),
            z_lr: select_rows(&self.z_lr, idx),
            text: self.text.as_ref().map(|t| select_rows(t, idx)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionBatch<S> {
    pub z0: Tensor<S>,
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
    pub cond: CondInputs<S>,
}

impl<S: Scalar> DiffusionBatch<S> {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.z0.shape() != self.eps.shape() {
            return Err(Error::Dimension("eps shape must equal z0 shape".into()));
        }
        let n = self.z0.shape()[0];
        if self.t.len() != n || self.cond.class_probs.shape()[0] != n || self.cond.z_lr.shape()[0] != n {
            return Err(Error::Dimension("batch components disagree on batch size".into()));
        }
        if let Some(&t) = self.t.iter().find(|&&t| t >= s.len()) {
            return Err(Error::Index(format!("timestep {t} outside [0, {})", s.len())));
        }
        Ok(())
    }

    /// Reorder batch items.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            z0: select_rows(&self.z0, idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            eps: select_rows(&self.eps, idx),
            cond: self.cond.select(idx),
        }
    }
}

/// Gather items along axis 0.
pub fn select_rows<S: Scalar>(t: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let n = t.shape()[0];
    let per = t.len() / n.max(1);
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, data)
}

/// Anything that predicts the injected noise from a noisy latent.
pub trait EpsModel<S: Scalar> {
    fn eps_hat(&self, g: &mut Graph<S>, z_t: Var, t: &[usize], cond: &CondInputs<S>) -> Result<Var>;
}

/// Record the ε-prediction loss on `g`; returns the scalar loss node.
pub fn loss_graph<S: Scalar, M: EpsModel<S> + ?Sized>(
    g: &mut Graph<S>,
    batch: &DiffusionBatch<S>,
    s: &NoiseSchedule,
    model: &M,
) -> Result<Var> {
    batch.validate(s)?;
    let zt = q_sample_batch(&batch.z0, &batch.t, &batch.eps, s)?;
    let zt = g.input(zt);
    let pred = model.eps_hat(g, zt, &batch.t, &batch.cond)?;
    if g.shape(pred) != batch.eps.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs noise {:?}",
            g.shape(pred),
            batch.eps.shape()
        )));
    }
    if !g.value(pred).all_finite() {
        let bad = g.value(pred).data().iter().filter(|v| !v.is_finite()).count();
        return Err(Error::Numeric(format!(
            "{bad} non-finite noise predictions at timesteps {:?}",
            batch.t
        )));
    }
    let eps = g.input(batch.eps.clone());
    let loss = g.mse(pred, eps);
    let v = g.value(loss).data()[0].as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(loss)
}

/// Mean squared error between the injected noise and its prediction.
pub fn training_loss<S: Scalar, M: EpsModel<S> + ?Sized>(
    batch: &DiffusionBatch<S>,
    s: &NoiseSchedule,
    model: &M,
) -> Result<f64> {
    let mut g = Graph::new();
    let l = loss_graph(&mut g, batch, s, model)?;
    Ok(g.value(l).data()[0].as_f64())
}

pub fn sample_timesteps<R: rand::Rng + ?Sized>(n: usize, t: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..t)).collect()
}

pub fn randn_like<S: Scalar, R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(StandardNormal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// One DDIM update with explicit ᾱ values. `noise` is required when the step
/// is stochastic (σ > 0).
pub fn ddim_update<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Dimension("ddim: z_t and eps_hat shapes differ".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Argument(format!("eta {eta} outside [0, 1]")));
    }
    let sigma = if eta > 0.0 && ab_prev > ab_t {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sp = ab_prev.sqrt();
    let mut out = Vec::with_capacity(z_t.len());
    for (i, (&z, &e)) in z_t.data().iter().zip(eps_hat.data()).enumerate() {
        let x0 = (z.as_f64() - sb * e.as_f64()) / sa;
        let mut v = sp * x0 + dir * e.as_f64();
        if sigma > 0.0 {
            let n = noise.ok_or_else(|| Error::Argument("stochastic DDIM step needs noise".into()))?;
            v += sigma * n.data()[i].as_f64();
        }
        out.push(S::lit(v));
    }
    Ok(Tensor::from_vec(z_t.shape(), out))
}

/// DDIM step from `t` to `t_prev`; `None` denotes the clean end point (ᾱ = 1).
pub fn ddim_step<S: Scalar, R: rand::Rng + ?Sized>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let ab_t = s.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) if tp >= t => {
            return Err(Error::Argument(format!("t_prev {tp} must be below t {t}")));
        }
        Some(tp) => s.alpha_bar(tp)?,
        None => 1.0,
    };
    let noise = (eta > 0.0).then(|| randn_like::<S, R>(z_t.shape(), rng));
    ddim_update(z_t, eps_hat, ab_t, ab_prev, eta, noise.as_ref())
}

/// Run the reverse process from pure noise. `eps_fn(z_t, t)` returns the
/// noise prediction for the whole batch at timestep `t`.
pub fn ddim_sample<S, F>(
    shape: &[usize],
    s: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seed_value: u64,
    mut eps_fn: F,
) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
{
    let ts = s.sampling_timesteps(steps)?;
    let mut rng = seed::rng(seed_value);
    let mut z: Tensor<S> = randn_like(shape, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let eps = eps_fn(&z, t)?;
        let prev = ts.get(i + 1).copied();
        z = ddim_step(&z, &eps, t, prev, s, eta, &mut rng)?;
        if !z.all_finite() {
            return Err(Error::Numeric(format!("non-finite latent after step t={t}")));
        }
    }
    Ok(z)
}

/// Timesteps for a batch, stratified so each `1/n` slice of `[0, T)` gets
/// one draw; the marginal of each entry is uniform over `[0, T)`.
pub fn stratified_timesteps<R: rand::Rng + ?Sized>(n: usize, t: usize, rng: &mut R) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n)
        .map(|i| {
            let u: f64 = rng.random();
            (((i as f64 + u) / n as f64) * t as f64).floor().min((t - 1) as f64) as usize
        })
        .collect();
    // Shuffle so position in the batch carries no timestep information.
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

//! Class- and time-aware conditioning: the class+time vector `b`, the
//! encoder δ_θ that turns `(b, z_lr)` into multi-scale features, and the SFT
//! modulation those features drive inside the denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, ResBlock};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Conv2d, Graph, Init, Linear, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub num_classes: usize,
    pub class_dim: usize,
    pub time_dim: usize,
    pub num_timesteps: usize,
    /// Initialisation of the SFT heads; zero gives identity modulation.
    pub zero_init_heads: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            class_dim: 64,
            time_dim: 64,
            num_timesteps: 200,
            zero_init_heads: true,
        }
    }
}

/// Feature map and its SFT pair at one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleCond {
    pub features: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub scales: Vec<ScaleCond>,
}

/// `gamma ⊙ f + beta`; all three must share a shape.
pub fn sft_modulate<S: Scalar>(g: &mut Graph<S>, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    if g.shape(gamma) != g.shape(f) || g.shape(beta) != g.shape(f) {
        return Err(Error::Dimension(format!(
            "sft: features {:?}, gamma {:?}, beta {:?}",
            g.shape(f),
            g.shape(gamma),
            g.shape(beta)
        )));
    }
    let m = g.mul(gamma, f);
    Ok(g.add(m, beta))
}

/// Tensor-level SFT for callers outside a graph.
pub fn sft_apply<S: Scalar>(f: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (fv, gv, bv) = (g.input(f.clone()), g.input(gamma.clone()), g.input(beta.clone()));
    let out = sft_modulate(&mut g, fv, gv, bv)?;
    Ok(g.value(out).clone())
}

/// The class- and time-aware encoder δ_θ. Mirrors the denoiser encoder's
/// scales; parameters live under the `cond.` prefix.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    cfg: ConditionConfig,
    class_table: ParamId,
    t1: Linear,
    t2: Linear,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    gamma_heads: Vec<Conv2d>,
    beta_heads: Vec<Conv2d>,
}

impl ConditionEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        cfg: &ConditionConfig,
        unet: &DenoiserConfig,
        ps: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        unet.validate()?;
        if cfg.num_classes == 0 || cfg.class_dim == 0 || cfg.num_timesteps == 0 {
            return Err(Error::Config("condition encoder dimensions must be positive".into()));
        }
        if cfg.time_dim < 2 || cfg.time_dim % 2 != 0 {
            return Err(Error::Config("condition time_dim must be an even number >= 2".into()));
        }
        let class_table = ps.add(
            "cond.class_table",
            Tensor::randn(&[cfg.num_classes, cfg.class_dim], 1.0, rng),
        );
        let td = cfg.time_dim;
        let t1 = Linear::new(ps, "cond.time.l1", td, td, Init::He, rng);
        let t2 = Linear::new(ps, "cond.time.l2", td, td, Init::He, rng);
        let bdim = cfg.class_dim + td;
        let conv_in = Conv2d::new(ps, "cond.conv_in", unet.latent_channels, unet.channels(0), 3, 1, Init::He, rng);
        let head_init = if cfg.zero_init_heads { Init::Zeros } else { Init::Normal(0.05) };
        let mut blocks = Vec::new();
        let mut gamma_heads = Vec::new();
        let mut beta_heads = Vec::new();
        let mut prev = unet.channels(0);
        for s in 0..unet.depth() {
            let ch = unet.channels(s);
            blocks.push(ResBlock::new(ps, &format!("cond.block{s}"), prev, ch, bdim, unet.groups, rng));
            gamma_heads.push(Conv2d::new(ps, &format!("cond.gamma{s}"), ch, ch, 1, 1, head_init, rng));
            beta_heads.push(Conv2d::new(ps, &format!("cond.beta{s}"), ch, ch, 1, 1, head_init, rng));
            prev = ch;
        }
        Ok(Self {
            cfg: cfg.clone(),
            class_table,
            t1,
            t2,
            conv_in,
            blocks,
            gamma_heads,
            beta_heads,
        })
    }

    pub fn config(&self) -> &ConditionConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn class_table_id(&self) -> ParamId {
        self.class_table
    }

    /// `b = [probs · table, MLP(sinusoid(t))]`, `[N, class_dim + time_dim]`.
    pub fn condition_vector<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, probs: Var, t: &[usize]) -> Var {
        let table = g.param(ps, self.class_table);
        let class = g.mix_rows(probs, table);
        let te = g.input(sinusoidal_embedding(t, self.cfg.time_dim));
        let te = self.t1.forward(g, ps, te);
        let te = g.silu(te);
        let te = self.t2.forward(g, ps, te);
        g.concat(&[class, te])
    }

    /// Multi-scale features and SFT pairs from `b` and the LR latent.
    pub fn encode_conditions<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        b: Var,
        z_lr: Var,
    ) -> Result<MultiScaleFeatures> {
        let bs = g.shape(b).to_vec();
        let zs = g.shape(z_lr).to_vec();
        if bs.len() != 2 || bs[1] != self.cfg.class_dim + self.cfg.time_dim {
            return Err(Error::Dimension(format!("condition vector shape {bs:?}")));
        }
        if zs.len() != 4 || zs[0] != bs[0] {
            return Err(Error::Dimension(format!("LR latent shape {zs:?}")));
        }
        let div = 1usize << (self.depth() - 1);
        if zs[2] % div != 0 || zs[3] % div != 0 {
            return Err(Error::Dimension(format!("LR latent {zs:?} not divisible by {div}")));
        }
        let mut h = self.conv_in.forward(g, ps, z_lr);
        let mut scales = Vec::with_capacity(self.depth());
        for s in 0..self.depth() {
            if s > 0 {
                h = g.avg_pool2(h);
            }
            h = self.blocks[s].forward(g, ps, h, b, None)?;
            let gh = self.gamma_heads[s].forward(g, ps, h);
            let gamma = g.add_scalar(gh, 1.0);
            let beta = self.beta_heads[s].forward(g, ps, h);
            scales.push(ScaleCond {
                features: h,
                gamma,
                beta,
            });
        }
        Ok(MultiScaleFeatures { scales })
    }

    /// [`Self::condition_vector`] followed by [`Self::encode_conditions`].
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        probs: &Tensor<S>,
        t: &[usize],
        z_lr: Var,
    ) -> Result<MultiScaleFeatures> {
        validate_probs(probs, self.cfg.num_classes)?;
        if let Some(&bad) = t.iter().find(|&&x| x >= self.cfg.num_timesteps) {
            return Err(Error::Index(format!(
                "timestep {bad} outside [0, {})",
                self.cfg.num_timesteps
            )));
        }
        let p = g.input(probs.clone());
        let b = self.condition_vector(g, ps, p, t);
        self.encode_conditions(g, ps, b, z_lr)
    }
}

/// Check `[N, K]` rows are probability vectors (non-negative, sum 1 ± 1e-5).
pub fn validate_probs<S: Scalar>(probs: &Tensor<S>, k: usize) -> Result<()> {
    let s = probs.shape();
    if s.len() != 2 || s[1] != k {
        return Err(Error::Argument(format!("class probabilities must be [N, {k}], got {s:?}")));
    }
    for row in probs.data().chunks(k) {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| !(v.as_f64() >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Argument(format!("malformed probability vector (sum {sum})")));
        }
    }
    Ok(())
}

/// Single-sample condition vector `b` as plain numbers.
pub fn build_condition_vector<S: Scalar>(
    enc: &ConditionEncoder,
    ps: &ParamStore<S>,
    class_probs: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let k = enc.cfg.num_classes;
    let probs = Tensor::<S>::from_f64(&[1, class_probs.len()], class_probs);
    validate_probs(&probs, k)?;
    if t >= enc.cfg.num_timesteps {
        return Err(Error::Index(format!("timestep {t} outside [0, {})", enc.cfg.num_timesteps)));
    }
    let mut g = Graph::new();
    let p = g.input(probs);
    let b = enc.condition_vector(&mut g, ps, p, &[t]);
    Ok(g.value(b).data().iter().map(|v| v.as_f64()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNet;
    use crate::seed;
    use proptest::prelude::*;

    fn unet_cfg() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2, 2],
            groups: 4,
            time_dim: 16,
            text_len: 4,
            text_dim: 8,
        }
    }

    fn cond_cfg(k: usize, d: usize) -> ConditionConfig {
        ConditionConfig {
            num_classes: k,
            class_dim: d,
            time_dim: d,
            num_timesteps: 50,
            zero_init_heads: true,
        }
    }

    fn table(ps: &ParamStore<f64>, enc: &ConditionEncoder) -> Vec<f64> {
        ps.get(enc.class_table_id()).data().to_vec()
    }

    #[test]
    fn one_hot_selects_row_and_lengths_add() {
        let mut ps = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&cond_cfg(3, 4), &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
        let tab = table(&ps, &enc);
        let b = build_condition_vector(&enc, &ps, &[0.0, 1.0, 0.0], 7).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(&b[..4], &tab[4..8]);
    }

    #[test]
    fn uniform_probs_average_rows() {
        let mut ps = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&cond_cfg(2, 4), &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
        let tab = table(&ps, &enc);
        let b = build_condition_vector(&enc, &ps, &[0.5, 0.5], 0).unwrap();
        for j in 0..4 {
            assert!((b[j] - (tab[j] + tab[4 + j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn malformed_probabilities_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&cond_cfg(2, 4), &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
        assert!(matches!(build_condition_vector(&enc, &ps, &[0.6, 0.6], 0), Err(Error::Argument(_))));
        assert!(matches!(build_condition_vector(&enc, &ps, &[1.5, -0.5], 0), Err(Error::Argument(_))));
        assert!(matches!(build_condition_vector(&enc, &ps, &[1.0], 0), Err(Error::Argument(_))));
        assert!(build_condition_vector(&enc, &ps, &[1.0, 0.0], 50).is_err());
    }

    #[test]
    fn sft_arithmetic() {
        let f = Tensor::<f32>::full(&[1, 2, 2, 2], 0.5);
        let two = Tensor::full(&[1, 2, 2, 2], 2.0);
        let one = Tensor::full(&[1, 2, 2, 2], 1.0);
        let zero = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(sft_apply(&f, &two, &one).unwrap().data().iter().all(|&v| v == 2.0));
        assert_eq!(sft_apply(&f, &one, &zero).unwrap(), f);
        let bconst = Tensor::full(&[1, 2, 2, 2], -0.3);
        assert_eq!(sft_apply(&f, &zero, &bconst).unwrap(), bconst);
        assert!(matches!(
            sft_apply(&f, &Tensor::zeros(&[1, 2, 2, 1]), &zero),
            Err(Error::Dimension(_))
        ));
    }

    fn features(enc: &ConditionEncoder, ps: &ParamStore<f32>, t: usize, z: &Tensor<f32>) -> Vec<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let probs = Tensor::from_f64(&[1, 2], &[0.3, 0.7]);
        let m = enc.forward(&mut g, ps, &probs, &[t], zv).unwrap();
        m.scales
            .iter()
            .map(|s| (g.value(s.features).clone(), g.value(s.gamma).clone(), g.value(s.beta).clone()))
            .collect()
    }

    #[test]
    fn scale_shapes_and_identity_init() {
        let mut ps = ParamStore::<f32>::new();
        let enc = ConditionEncoder::new(&cond_cfg(2, 8), &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
        let z = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut seed::rng(1));
        let f = features(&enc, &ps, 3, &z);
        let sides: Vec<usize> = f.iter().map(|s| s.0.shape()[2]).collect();
        assert_eq!(sides, vec![16, 8, 4]);
        for (feat, gamma, beta) in &f {
            assert_eq!(gamma.shape(), feat.shape());
            assert!(gamma.data().iter().all(|&v| v == 1.0));
            assert!(beta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn time_sensitivity_at_every_scale() {
        let mut ps = ParamStore::<f32>::new();
        let enc = ConditionEncoder::new(&cond_cfg(2, 8), &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
        let z = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut seed::rng(1));
        let a = features(&enc, &ps, 3, &z);
        let b = features(&enc, &ps, 40, &z);
        for (x, y) in a.iter().zip(&b) {
            let d: f64 = x.0.data().iter().zip(y.0.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
            assert!(d > 0.0);
        }

        // With non-zero heads the SFT pairs themselves respond to t.
        let mut ps = ParamStore::<f32>::new();
        let cfg = ConditionConfig { zero_init_heads: false, ..cond_cfg(2, 8) };
        let enc = ConditionEncoder::new(&cfg, &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
        let a = features(&enc, &ps, 3, &z);
        let b = features(&enc, &ps, 40, &z);
        for (x, y) in a.iter().zip(&b) {
            assert_ne!(x.1, y.1);
            assert_ne!(x.2, y.2);
        }
    }

    #[test]
    fn identity_modulation_leaves_denoiser_unchanged() {
        let ucfg = unet_cfg();
        let mut ps = ParamStore::<f32>::new();
        let mut rng = seed::rng(0);
        let unet = UNet::new(&ucfg, &mut ps, &mut rng).unwrap();
        let enc = ConditionEncoder::new(&cond_cfg(2, 8), &ucfg, &mut ps, &mut rng).unwrap();
        // Non-zero output layer so the comparison is not trivially 0 == 0.
        let id = ps.find("unet.conv_out.weight").unwrap();
        let shape = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&shape, 0.1, &mut rng);

        let z = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut seed::rng(1));
        let zl = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut seed::rng(2));
        let probs = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.2, 0.8]);
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let zlv = g.input(zl);
        let cond = enc.forward(&mut g, &ps, &probs, &[4, 9], zlv).unwrap();
        let with = unet.predict_eps(&mut g, &ps, zv, &[4, 9], Some(&cond), None).unwrap();
        let without = unet.predict_eps(&mut g, &ps, zv, &[4, 9], None, None).unwrap();
        assert_eq!(g.value(with).data(), g.value(without).data());

        // Perturbing one scale's beta changes the output.
        let s1 = cond.scales[1];
        let shift = g.input(Tensor::full(g.shape(s1.beta), 0.5));
        let beta = g.add(s1.beta, shift);
        let mut pert = cond.clone();
        pert.scales[1].beta = beta;
        let moved = unet.predict_eps(&mut g, &ps, zv, &[4, 9], Some(&pert), None).unwrap();
        let d: f64 = g
            .value(moved)
            .data()
            .iter()
            .zip(g.value(without).data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!(d > 0.0);

        // Scale-count mismatch is a configuration error.
        let mut short = cond.clone();
        short.scales.pop();
        assert!(matches!(
            unet.predict_eps(&mut g, &ps, zv, &[4, 9], Some(&short), None),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sft_is_additive_in_features(ints in proptest::collection::vec(-64i32..64, 24)) {
            // Dyadic values keep every product and sum exactly representable.
            let vals: Vec<f64> = ints.iter().map(|&i| i as f64 / 16.0).collect();
            let f1 = Tensor::from_vec(&[1, 2, 2, 2], vals[..8].to_vec());
            let f2 = Tensor::from_vec(&[1, 2, 2, 2], vals[8..16].to_vec());
            let gamma = Tensor::from_vec(&[1, 2, 2, 2], vals[16..].to_vec());
            let zero = Tensor::zeros(&[1, 2, 2, 2]);
            let sum = Tensor::from_vec(&[1, 2, 2, 2], f1.data().iter().zip(f2.data()).map(|(a, b)| a + b).collect());
            let lhs = sft_apply(&sum, &gamma, &zero).unwrap();
            let a = sft_apply(&f1, &gamma, &zero).unwrap();
            let b = sft_apply(&f2, &gamma, &zero).unwrap();
            for i in 0..8 {
                prop_assert_eq!(lhs.data()[i], a.data()[i] + b.data()[i]);
            }
        }

        #[test]
        fn class_part_is_permutation_equivariant(
            raw in proptest::collection::vec(0.01f64..1.0, 5), shift in 1usize..5
        ) {
            let k = 5;
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let mut ps = ParamStore::<f32>::new();
            let enc = ConditionEncoder::new(&cond_cfg(k, 4), &unet_cfg(), &mut ps, &mut seed::rng(0)).unwrap();
            let b = build_condition_vector(&enc, &ps, &probs, 2).unwrap();
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let tab = ps.get(enc.class_table_id()).clone();
            let mut permuted = tab.clone();
            for (new, &old) in perm.iter().enumerate() {
                permuted.data_mut()[new * 4..new * 4 + 4].copy_from_slice(&tab.data()[old * 4..old * 4 + 4]);
            }
            *ps.get_mut(enc.class_table_id()) = permuted;
            let pp: Vec<f64> = perm.iter().map(|&o| probs[o]).collect();
            let bp = build_condition_vector(&enc, &ps, &pp, 2).unwrap();
            prop_assert_eq!(&b[..4], &bp[..4]);
        }
    }
}

//! Time-conditional U-Net noise predictor whose residual blocks accept SFT
//! modulation, with text cross-attention at the bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{sft_modulate, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Conv2d, Graph, GroupNorm, Init, Linear, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    /// One multiplier per scale; the scale count is the U-Net depth.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
    /// Text sequence length and width expected at the bottleneck.
    pub text_len: usize,
    pub text_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            groups: 8,
            time_dim: 64,
            text_len: 16,
            text_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn depth(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels * self.channel_mults[scale]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::Config("denoiser depth must be >= 1".into()));
        }
        if self.base_channels == 0 || self.latent_channels == 0 || self.channel_mults.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be an even number >= 2".into()));
        }
        Ok(())
    }
}

/// GroupNorm → SiLU → conv, embedding injection, GroupNorm → [SFT] → SiLU →
/// conv, plus a (projected) skip connection.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, Init::He, rng),
            emb: Linear::new(ps, &format!("{name}.emb"), emb_dim, cout, Init::He, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, Init::Normal(0.02), rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, Init::He, rng)),
        }
    }

    pub(crate) fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        emb: Var,
        sft: Option<(Var, Var)>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h);
        let e = g.silu(emb);
        let e = self.emb.forward(g, ps, e);
        let h = g.add_sample_channel(h, e);
        let mut h = self.norm2.forward(g, ps, h);
        if let Some((gamma, beta)) = sft {
            h = sft_modulate(g, h, gamma, beta)?;
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x),
            None => x,
        };
        Ok(g.add(s, h))
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, h: Var, text: Var) -> Var {
        let s = g.shape(h).to_vec();
        let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let ts = g.shape(text).to_vec();
        let (l, d) = (ts[1], ts[2]);
        let x = self.norm.forward(g, ps, h);
        let tok = g.to_tokens(x);
        let tok = g.reshape(tok, &[n * hh * ww, c]);
        let q = self.q.forward(g, ps, tok);
        let q = g.reshape(q, &[n, hh * ww, c]);
        let tx = g.reshape(text, &[n * l, d]);
        let k = self.k.forward(g, ps, tx);
        let k = g.reshape(k, &[n, l, c]);
        let v = self.v.forward(g, ps, tx);
        let v = g.reshape(v, &[n, l, c]);
        let a = g.attention(q, k, v);
        let a = g.reshape(a, &[n * hh * ww, c]);
        let o = self.out.forward(g, ps, a);
        let o = g.reshape(o, &[n, hh * ww, c]);
        let o = g.from_tokens(o, hh, ww);
        g.add(h, o)
    }
}

/// The noise predictor ε_θ. Parameters live under the `unet.` prefix.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: DenoiserConfig,
    t1: Linear,
    t2: Linear,
    conv_in: Conv2d,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    attn: CrossAttention,
    dec: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(cfg: &DenoiserConfig, ps: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let td = cfg.time_dim;
        let gr = cfg.groups;
        let t1 = Linear::new(ps, "unet.time.l1", td, td, Init::He, rng);
        let t2 = Linear::new(ps, "unet.time.l2", td, td, Init::He, rng);
        let conv_in = Conv2d::new(ps, "unet.conv_in", cfg.latent_channels, cfg.channels(0), 3, 1, Init::He, rng);
        let mut enc = Vec::new();
        let mut prev = cfg.channels(0);
        for s in 0..cfg.depth() {
            let ch = cfg.channels(s);
            enc.push(ResBlock::new(ps, &format!("unet.enc{s}"), prev, ch, td, gr, rng));
            prev = ch;
        }
        let last = cfg.channels(cfg.depth() - 1);
        let mid = ResBlock::new(ps, "unet.mid", last, last, td, gr, rng);
        let attn = CrossAttention {
            norm: GroupNorm::new(ps, "unet.attn.norm", last, gr),
            q: Linear::new(ps, "unet.attn.q", last, last, Init::Normal(1.0 / (last as f64).sqrt()), rng),
            k: Linear::new(ps, "unet.attn.k", cfg.text_dim, last, Init::Normal(1.0 / (cfg.text_dim as f64).sqrt()), rng),
            v: Linear::new(ps, "unet.attn.v", cfg.text_dim, last, Init::Normal(1.0 / (cfg.text_dim as f64).sqrt()), rng),
            out: Linear::new(ps, "unet.attn.out", last, last, Init::Zeros, rng),
        };
        let mut dec = Vec::new();
        let mut up = last;
        for s in (0..cfg.depth()).rev() {
            let ch = cfg.channels(s);
            dec.push(ResBlock::new(ps, &format!("unet.dec{s}"), up + ch, ch, td, gr, rng));
            up = ch;
        }
        let norm_out = GroupNorm::new(ps, "unet.norm_out", cfg.channels(0), gr);
        let conv_out = Conv2d::new(ps, "unet.conv_out", cfg.channels(0), cfg.latent_channels, 3, 1, Init::Zeros, rng);
        Ok(Self {
            cfg: cfg.clone(),
            t1,
            t2,
            conv_in,
            enc,
            mid,
            attn,
            dec,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Fixed null text sequence used whenever no prompt is supplied.
    pub fn null_text<S: Scalar>(&self, n: usize) -> Tensor<S> {
        Tensor::zeros(&[n, self.cfg.text_len, self.cfg.text_dim])
    }

    /// Predict the noise in `z_t: [N, C, h, w]`. `cond = None` runs the
    /// unmodulated network; `text = None` feeds the null embedding.
    pub fn predict_eps<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z_t: Var,
        t: &[usize],
        cond: Option<&MultiScaleFeatures>,
        text: Option<Var>,
    ) -> Result<Var> {
        let depth = self.cfg.depth();
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 || zs[1] != self.cfg.latent_channels {
            return Err(Error::Dimension(format!(
                "denoiser expects [N, {}, h, w], got {zs:?}",
                self.cfg.latent_channels
            )));
        }
        let (n, h, w) = (zs[0], zs[2], zs[3]);
        let div = 1usize << (depth - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Dimension(format!(
                "latent {h}x{w} not divisible by 2^{}",
                depth - 1
            )));
        }
        if t.len() != n {
            return Err(Error::Dimension(format!("{} timesteps for batch of {n}", t.len())));
        }
        if let Some(c) = cond {
            if c.scales.len() != depth {
                return Err(Error::Config(format!(
                    "conditioning has {} scales, denoiser depth is {depth}",
                    c.scales.len()
                )));
            }
        }
        let sft = |s: usize| cond.map(|c| (c.scales[s].gamma, c.scales[s].beta));

        let temb = g.input(sinusoidal_embedding(t, self.cfg.time_dim));
        let temb = self.t1.forward(g, ps, temb);
        let temb = g.silu(temb);
        let temb = self.t2.forward(g, ps, temb);

        let mut x = self.conv_in.forward(g, ps, z_t);
        let mut skips = Vec::with_capacity(depth);
        for (s, block) in self.enc.iter().enumerate() {
            if s > 0 {
                x = g.avg_pool2(x);
            }
            x = block.forward(g, ps, x, temb, sft(s))?;
            skips.push(x);
        }
        x = self.mid.forward(g, ps, x, temb, None)?;
        let text = match text {
            Some(tv) => {
                let ts = g.shape(tv);
                if ts != [n, self.cfg.text_len, self.cfg.text_dim] {
                    return Err(Error::Dimension(format!("text embedding shape {ts:?}")));
                }
                tv
            }
            None => g.input(self.null_text(n)),
        };
        x = self.attn.forward(g, ps, x, text);
        for (i, block) in self.dec.iter().enumerate() {
            let s = depth - 1 - i;
            x = g.concat(&[x, skips[s]]);
            x = block.forward(g, ps, x, temb, sft(s))?;
            if s > 0 {
                x = g.upsample2(x);
            }
        }
        let x = self.norm_out.forward(g, ps, x);
        let x = g.silu(x);
        Ok(self.conv_out.forward(g, ps, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn small() -> DenoiserConfig {
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

    #[test]
    fn output_matches_input_shape() {
        let cfg = small();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::new(&cfg, &mut ps, &mut seed::rng(0)).unwrap();
        let mut g = Graph::new();
        let z = g.input(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut seed::rng(1)));
        let y = net.predict_eps(&mut g, &ps, z, &[3, 7], None, None).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 8, 8]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = small();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::new(&cfg, &mut ps, &mut seed::rng(0)).unwrap();
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[1, 3, 6, 6]));
        assert!(net.predict_eps(&mut g, &ps, z, &[0], None, None).is_err());
        let z = g.input(Tensor::zeros(&[1, 2, 8, 8]));
        assert!(net.predict_eps(&mut g, &ps, z, &[0], None, None).is_err());
    }

    #[test]
    fn evaluation_is_deterministic_and_text_matters_once_trained() {
        let cfg = small();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::new(&cfg, &mut ps, &mut seed::rng(0)).unwrap();
        // Give the zero-initialised output layers some weight.
        for name in ["unet.conv_out.weight", "unet.attn.out.weight"] {
            let id = ps.find(name).unwrap();
            let shape = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = Tensor::randn(&shape, 0.1, &mut seed::rng(2));
        }
        let z0 = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut seed::rng(1));
        let text = Tensor::randn(&[1, 4, 8], 1.0, &mut seed::rng(3));
        let run = |text: Option<&Tensor<f32>>| {
            let mut g = Graph::new();
            let z = g.input(z0.clone());
            let tv = text.map(|t| g.input(t.clone()));
            let y = net.predict_eps(&mut g, &ps, z, &[5], None, tv).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(None), run(None));
        assert_ne!(run(None), run(Some(&text)));
    }
}

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal on fan-in.
    He,
    /// Normal with a fixed standard deviation.
    Normal(f64),
    Zeros,
}

fn init_tensor<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<S> {
    match init {
        Init::He => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init_tensor(&[cout, cin, k, k], cin * k * k, init, rng),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_channel(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        fin: usize,
        fout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init_tensor(&[fout, fin], fin, init, rng),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.linear(x, w);
        g.add_channel(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = effective_groups(channels, groups);
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let gm = g.param(ps, self.gamma);
        let bt = g.param(ps, self.beta);
        g.group_norm(x, gm, bt, self.groups)
    }
}

/// Largest divisor of `channels` not exceeding `wanted`.
pub fn effective_groups(channels: usize, wanted: usize) -> usize {
    (1..=wanted.max(1).min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn sinusoidal_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            out[i * dim + j] = S::lit(a.sin());
            out[i * dim + half + j] = S::lit(a.cos());
        }
    }
    Tensor::from_vec(&[ts.len(), dim], out)
}

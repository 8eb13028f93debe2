//! Parametric prompts and the frozen token-hash text encoder τ(y). Text is
//! supplied during training only.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::seed;

pub const NUM_TEMPLATES: usize = 5;

pub const DEFAULT_TEMPLATES: [&str; NUM_TEMPLATES] = [
    "a photo of the {category} ship {name}",
    "the {category} vessel {name} photographed at sea",
    "{name}, a {category}, seen from the harbour",
    "a detailed picture of {name}, which is a {category}",
    "high resolution image of a {category} called {name}",
];

/// Exactly five templates, each with one `{name}` and one `{category}` slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptSet {
    templates: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for PromptSet {
    type Error = Error;

    fn try_from(templates: Vec<String>) -> Result<Self> {
        if templates.len() != NUM_TEMPLATES {
            return Err(Error::Config(format!(
                "expected {NUM_TEMPLATES} prompt templates, got {}",
                templates.len()
            )));
        }
        for t in &templates {
            let stripped = t.replace("{name}", "").replace("{category}", "");
            if t.matches("{name}").count() != 1
                || t.matches("{category}").count() != 1
                || stripped.contains('{')
                || stripped.contains('}')
            {
                return Err(Error::Config(format!("malformed prompt template {t:?}")));
            }
        }
        Ok(Self { templates })
    }
}

impl From<PromptSet> for Vec<String> {
    fn from(p: PromptSet) -> Self {
        p.templates
    }
}

impl PromptSet {
    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render_prompt(&self, template_id: usize, name: &str, category: &str) -> Result<String> {
        let t = self
            .templates
            .get(template_id)
            .ok_or_else(|| Error::Argument(format!("unknown template id {template_id}")))?;
        if name.trim().is_empty() || category.trim().is_empty() {
            return Err(Error::Argument("prompt slots must be non-empty".into()));
        }
        Ok(t.replace("{name}", name).replace("{category}", category))
    }
}

pub fn pick_prompt<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..NUM_TEMPLATES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub max_len: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            dim: 64,
            vocab: 4096,
            seed: 0x7e47,
        }
    }
}

/// Deterministic token-hash embedder: each lower-cased word is hashed
/// (FNV-1a) into a fixed random table, plus a sinusoidal position code.
/// Never trained.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    ps: ParamStore<f32>,
    table: ParamId,
    calls: std::sync::Arc<AtomicUsize>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl TextEncoder {
    pub fn new(cfg: &TextEncoderConfig) -> Result<Self> {
        if cfg.max_len == 0 || cfg.dim == 0 || cfg.dim % 2 != 0 || cfg.vocab < 2 {
            return Err(Error::Config("text encoder needs max_len > 0, even dim, vocab >= 2".into()));
        }
        let mut rng = seed::rng(cfg.seed);
        let mut ps = ParamStore::new();
        let table = ps.add("tau.table", Tensor::randn(&[cfg.vocab, cfg.dim], 1.0, &mut rng));
        ps.freeze_all();
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            table,
            calls: Default::default(),
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.ps
    }

    fn token_ids(&self, prompt: &str) -> Result<Vec<usize>> {
        let toks = tokenize(prompt);
        if toks.is_empty() {
            return Err(Error::Argument("cannot encode an empty prompt".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(toks
            .iter()
            .take(self.cfg.max_len)
            .map(|t| (fnv1a(t) % self.cfg.vocab as u64) as usize)
            .collect())
    }

    fn position_code(&self, n_tokens: usize) -> Vec<f32> {
        let (l, d) = (self.cfg.max_len, self.cfg.dim);
        let mut out = vec![0f32; l * d];
        for pos in 0..n_tokens {
            for j in 0..d {
                let k = (j / 2) as f64;
                let freq = 1.0 / 10000f64.powf(2.0 * k / d as f64);
                let p = if j % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() };
                out[pos * d + j] = 0.5 * p as f32;
            }
        }
        out
    }

    /// [`Self::encode_text`] recorded on a graph as a lookup into the frozen
    /// table, so the encoder's (zero) gradient can be observed.
    pub fn encode_graph(&self, g: &mut Graph<f32>, prompt: &str) -> Result<Var> {
        let ids = self.token_ids(prompt)?;
        let (l, v) = (self.cfg.max_len, self.cfg.vocab);
        let mut onehot = vec![0f32; l * v];
        for (pos, &id) in ids.iter().enumerate() {
            onehot[pos * v + id] = 1.0;
        }
        let sel = g.input(Tensor::from_vec(&[l, v], onehot));
        let table = g.param(&self.ps, self.table);
        let rows = g.mix_rows(sel, table);
        let pos = g.input(Tensor::from_vec(&[l, self.cfg.dim], self.position_code(ids.len())));
        Ok(g.add(rows, pos))
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    /// Number of prompts encoded so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// `[max_len, dim]`; positions past the last token stay zero.
    pub fn encode_text(&self, prompt: &str) -> Result<Tensor<f32>> {
        let ids = self.token_ids(prompt)?;
        let d = self.cfg.dim;
        let table = self.ps.get(self.table).data();
        let mut out = self.position_code(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            for (o, &t) in out[pos * d..(pos + 1) * d].iter_mut().zip(&table[id * d..(id + 1) * d]) {
                *o += t;
            }
        }
        Ok(Tensor::from_vec(&[self.cfg.max_len, d], out))
    }

    /// Constant embedding fed to the denoiser when no prompt is available.
    pub fn null_embedding(&self) -> Tensor<f32> {
        Tensor::zeros(&[self.cfg.max_len, self.cfg.dim])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Prompt templates plus the frozen encoder.
#[derive(Clone, Debug)]
pub struct TextConditioner {
    pub prompts: PromptSet,
    pub encoder: TextEncoder,
}

impl TextConditioner {
    /// Render a randomly chosen template for one record and encode it.
    pub fn sample_embedding<R: Rng + ?Sized>(
        &self,
        name: &str,
        category: &str,
        rng: &mut R,
    ) -> Result<(String, Tensor<f32>)> {
        let id = pick_prompt(rng);
        let p = self.prompts.render_prompt(id, name, category)?;
        let e = self.encoder.encode_text(&p)?;
        Ok((p, e))
    }
}

/// The text provider is available only while training.
pub fn text_gate(phase: Phase, t: &TextConditioner) -> Option<&TextConditioner> {
    match phase {
        Phase::Train => Some(t),
        Phase::Infer => None,
    }
}

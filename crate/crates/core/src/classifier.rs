//! Ship-category classifier: pre-trained on HR images, frozen, and applied
//! to LR inputs to supply class evidence. Its penultimate features double as
//! the FID embedding.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::bicubic_upsample;
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::nn::{graph::softmax_rows, Adam, Conv2d, Graph, GroupNorm, Init, Linear, ParamStore, Tensor, Var};
use crate::{par, seed};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryTaxonomy {
    names: Vec<String>,
}

impl TryFrom<Vec<String>> for CategoryTaxonomy {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<CategoryTaxonomy> for Vec<String> {
    fn from(t: CategoryTaxonomy) -> Self {
        t.names
    }
}

impl CategoryTaxonomy {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("taxonomy needs at least one category".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if n.trim().is_empty() || !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("invalid or duplicate category {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Ship categories of the original corpus (19 named entries).
    pub fn ships() -> Self {
        let names = [
            "Bulkers",
            "Containerships",
            "Cruise ships",
            "Dredgers",
            "Fire Fighting Vessels",
            "Floating Sheerlegs",
            "General Cargo",
            "Inland",
            "Livestock Carriers",
            "Passenger Vessels",
            "Patrol Forces",
            "Reefers",
            "Ro-ro",
            "Supply ships",
            "Tankers",
            "Training ships",
            "Tugs",
            "Vehicle Carriers",
            "Wood Chip Carriers",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_side: usize,
    /// Output channels of the four conv blocks; the last is the feature width.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Continue training on degraded copies after HR pre-training.
    pub finetune_degraded: bool,
    pub finetune_epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            channels: vec![16, 32, 32, 32],
            groups: 4,
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            finetune_degraded: false,
            finetune_epochs: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    norm: GroupNorm,
}

/// Small CNN: four conv–norm–SiLU–pool blocks, global pooling, linear head.
/// Parameters live under the `clf.` prefix.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    taxonomy: CategoryTaxonomy,
    cfg: ClassifierConfig,
    ps: ParamStore<f32>,
    blocks: Vec<Block>,
    head: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: f64,
}

impl ClassifierModel {
    pub fn new(taxonomy: &CategoryTaxonomy, cfg: &ClassifierConfig) -> Result<Self> {
        if cfg.channels.len() != 4 || cfg.channels.contains(&0) {
            return Err(Error::Config("classifier needs four positive block widths".into()));
        }
        if cfg.input_side % 16 != 0 || cfg.input_side == 0 {
            return Err(Error::Config("classifier input side must be a multiple of 16".into()));
        }
        let mut rng = seed::rng(cfg.seed);
        let mut ps = ParamStore::new();
        let mut prev = 3;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            blocks.push(Block {
                conv: Conv2d::new(&mut ps, &format!("clf.conv{i}"), prev, c, 3, 1, Init::He, &mut rng),
                norm: GroupNorm::new(&mut ps, &format!("clf.norm{i}"), c, cfg.groups),
            });
            prev = c;
        }
        let head = Linear::new(&mut ps, "clf.head", prev, taxonomy.len(), Init::Normal(0.01), &mut rng);
        Ok(Self {
            taxonomy: taxonomy.clone(),
            cfg: cfg.clone(),
            ps,
            blocks,
            head,
        })
    }

    pub fn taxonomy(&self) -> &CategoryTaxonomy {
        &self.taxonomy
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.ps
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.channels[3]
    }

    /// `(features [N, D], logits [N, K])`.
    pub fn forward_graph(&self, g: &mut Graph<f32>, x: Var) -> (Var, Var) {
        let mut h = x;
        for b in &self.blocks {
            h = b.conv.forward(g, &self.ps, h);
            h = b.norm.forward(g, &self.ps, h);
            h = g.silu(h);
            h = g.avg_pool2(h);
        }
        let f = g.global_avg_pool(h);
        let logits = self.head.forward(g, &self.ps, f);
        (f, logits)
    }

    /// Bring an image to the classifier's input side.
    pub fn prepare(&self, img: &Image) -> Result<Image> {
        resize_square(img, self.cfg.input_side)
    }

    fn run(&self, images: &[&Image]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let prepared: Result<Vec<Image>> = images.iter().map(|im| self.prepare(im)).collect();
        let prepared = prepared?;
        let refs: Vec<&Image> = prepared.iter().collect();
        let mut g = Graph::new();
        let x = g.input(batch_tensor(&refs)?);
        let (f, l) = self.forward_graph(&mut g, x);
        Ok((g.value(f).clone(), g.value(l).clone()))
    }

    /// Softmax over categories for one image of any supported size.
    pub fn classify_lr(&self, img: &Image) -> Result<Vec<f64>> {
        let (_, logits) = self.run(&[img])?;
        Ok(softmax_rows(logits.data(), self.taxonomy.len())
            .iter()
            .map(|&v| v as f64)
            .collect())
    }

    /// `[N, K]` class probabilities, batched and parallel over chunks.
    pub fn probabilities(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let k = self.taxonomy.len();
        let chunks: Vec<&[&Image]> = images.chunks(64).collect();
        let out: Result<Vec<Vec<Vec<f64>>>> = par::map(&chunks, |c| {
            let (_, logits) = self.run(c)?;
            Ok(softmax_rows(logits.data(), k)
                .chunks(k)
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect())
        })
        .into_iter()
        .collect();
        Ok(out?.into_iter().flatten().collect())
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }

    /// Penultimate-layer features, `N × D`.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let d = self.feature_dim();
        let chunks: Vec<&[&Image]> = images.chunks(64).collect();
        let out: Result<Vec<Vec<Vec<f64>>>> = par::map(&chunks, |c| {
            let (f, _) = self.run(c)?;
            Ok(f.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
        })
        .into_iter()
        .collect();
        Ok(out?.into_iter().flatten().collect())
    }

    pub fn accuracy(&self, images: &[&Image], labels: &[usize]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Data("accuracy needs aligned, non-empty images and labels".into()));
        }
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    fn fit<R: Rng + ?Sized>(&mut self, data: &[(&Image, usize)], epochs: usize, rng: &mut R) -> Result<Vec<f64>> {
        let prepared: Result<Vec<Image>> = data.iter().map(|(im, _)| self.prepare(im)).collect();
        let prepared = prepared?;
        self.ps.set_trainable_prefix("clf.", true);
        let mut opt = Adam::new(self.cfg.lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut count = 0;
            for chunk in order.chunks(self.cfg.batch_size.max(1)) {
                let imgs: Vec<Image> = chunk
                    .iter()
                    .map(|&i| {
                        if rng.random::<bool>() {
                            hflip(&prepared[i])
                        } else {
                            prepared[i].clone()
                        }
                    })
                    .collect();
                let refs: Vec<&Image> = imgs.iter().collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
                let mut g = Graph::new();
                let x = g.input(batch_tensor(&refs)?);
                let (_, logits) = self.forward_graph(&mut g, x);
                let loss = g.cross_entropy(logits, &labels);
                total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
                count += chunk.len();
                let grads = g.backward(loss);
                opt.step(&mut self.ps, &grads);
            }
            losses.push(total / count.max(1) as f64);
        }
        self.ps.freeze_all();
        if !self.ps.all_finite() {
            return Err(Error::Numeric("classifier parameters diverged".into()));
        }
        Ok(losses)
    }

    /// Continue training on degraded copies (e.g. bicubic references), then refreeze.
    pub fn fine_tune(&mut self, data: &[(&Image, usize)], epochs: usize) -> Result<Vec<f64>> {
        check_labels(data, self.taxonomy.len(), 1)?;
        let mut rng = seed::derived_rng(self.cfg.seed, "finetune");
        self.fit(data, epochs, &mut rng)
    }

    /// Replace parameters from a checkpoint.
    pub fn load(&mut self, params: &ParamStore<f32>) -> Result<()> {
        let n = self.ps.load_from(params);
        if n != self.ps.len() {
            return Err(Error::Checkpoint(format!(
                "classifier checkpoint supplied {n} of {} tensors",
                self.ps.len()
            )));
        }
        self.ps.freeze_all();
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({"taxonomy": self.taxonomy, "config": self.cfg});
        crate::checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.ps)
    }

    pub fn from_checkpoint(c: &crate::checkpoint::Checkpoint) -> Result<Self> {
        let taxonomy: CategoryTaxonomy = serde_json::from_value(c.meta["taxonomy"].clone())?;
        let cfg: ClassifierConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut m = Self::new(&taxonomy, &cfg)?;
        m.load(&c.params)?;
        Ok(m)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&crate::checkpoint::load(path, CHECKPOINT_KIND)?)
    }
}

pub const CHECKPOINT_KIND: &str = "classifier";

fn check_labels(data: &[(&Image, usize)], k: usize, min_per_class: usize) -> Result<()> {
    let mut counts = vec![0usize; k];
    for (_, l) in data {
        if *l >= k {
            return Err(Error::Data(format!("label {l} outside taxonomy of {k}")));
        }
        counts[*l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 || counts.iter().any(|&c| c > 0 && c < min_per_class) {
        return Err(Error::Data(format!(
            "need >= 2 categories with >= {min_per_class} samples each, got counts {counts:?}"
        )));
    }
    Ok(())
}

/// Train on HR images and report validation accuracy. The returned model is frozen.
pub fn train_classifier(
    train: &[(&Image, usize)],
    val: &[(&Image, usize)],
    taxonomy: &CategoryTaxonomy,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierModel, ClassifierReport)> {
    check_labels(train, taxonomy.len(), 10)?;
    let mut model = ClassifierModel::new(taxonomy, cfg)?;
    let mut rng = seed::derived_rng(cfg.seed, "classifier");
    let epoch_losses = model.fit(train, cfg.epochs, &mut rng)?;
    let val_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        let imgs: Vec<&Image> = val.iter().map(|(i, _)| *i).collect();
        let labels: Vec<usize> = val.iter().map(|(_, l)| *l).collect();
        model.accuracy(&imgs, &labels)?
    };
    Ok((
        model,
        ClassifierReport {
            epoch_losses,
            val_accuracy,
        },
    ))
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn hflip(im: &Image) -> Image {
    let w = im.width();
    Image::from_fn(w, im.height(), |x, y| {
        [im.get(w - 1 - x, y, 0), im.get(w - 1 - x, y, 1), im.get(w - 1 - x, y, 2)]
    })
}

/// Resize a square image by an integer ratio: box averaging when shrinking,
/// bicubic when enlarging.
pub fn resize_square(img: &Image, side: usize) -> Result<Image> {
    let (w, h) = img.dims();
    if w != h {
        return Err(Error::Dimension(format!("expected a square image, got {w}x{h}")));
    }
    if w == side {
        Ok(img.clone())
    } else if w > side && w % side == 0 {
        let f = w / side;
        let inv = 1.0 / (f * f) as f32;
        Ok(Image::from_fn(side, side, |x, y| {
            let mut acc = [0f32; 3];
            for dy in 0..f {
                for dx in 0..f {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += img.get(x * f + dx, y * f + dy, c);
                    }
                }
            }
            acc.map(|v| v * inv)
        }))
    } else if w < side && side % w == 0 {
        bicubic_upsample(img, side / w)
    } else {
        Err(Error::Dimension(format!("cannot resize {w} to {side} by an integer ratio")))
    }
}

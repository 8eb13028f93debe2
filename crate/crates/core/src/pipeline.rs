//! Pipeline stages over a run directory. Each stage reads and writes only
//! inside its run directory and appends progress to `logs/<stage>.jsonl`.
//!
//! Layout:
//!
//! ```text
//! config.json              run configuration, written before any stage
//! corpus/                  synthetic source images (when generated)
//! manifest.jsonl           one record per pair
//! corpus_meta.json
//! pairs/{hr,lr,ref}/       materialized training pairs
//! checkpoints/             classifier.ckpt, sr.ckpt
//! eval/sr/                 model outputs on the test split
//! eval/per_image.jsonl
//! report.json, grid.png, report.md
//! logs/
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClassifierModel, ClassifierReport};
use crate::config::RunConfig;
use crate::dataset::{build_manifest, load_pairs, materialize, split_manifest, Manifest, ShipRecord, Split};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::metrics::{comparison_report, psnr, ssim, MetricsReport};
use crate::model::{SrModel, TrainEvent, TrainReport, TrainingExample};
use crate::synth::{self, SynthConfig};

pub const LR_REFERENCE: &str = "lr_reference";
pub const MODEL: &str = "model";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).at(path)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| Error::Dependency {
        what: what.to_string(),
        path: path.to_path_buf(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Append-only JSON-lines log.
pub struct JsonlLog {
    file: File,
    path: PathBuf,
}

impl JsonlLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(p) = path.parent() {
            create_dir(p)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let mut line = serde_json::to_vec(v)?;
        line.push(b'\n');
        self.file.write_all(&line).at(&self.path)
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.root.join("checkpoints/classifier.ckpt")
    }

    pub fn sr_path(&self) -> PathBuf {
        self.root.join("checkpoints/sr.ckpt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn log(&self, stage: &str) -> Result<JsonlLog> {
        JsonlLog::open(&self.root.join("logs").join(format!("{stage}.jsonl")))
    }

    /// Store `cfg` as the run configuration. A run directory never changes
    /// configuration once written.
    pub fn init(&self, cfg: &RunConfig) -> Result<()> {
        cfg.validate()?;
        create_dir(&self.root)?;
        let path = self.config_path();
        if path.exists() {
            let existing = RunConfig::read(&path)?;
            if existing.fingerprint()? != cfg.fingerprint()? {
                return Err(Error::Config(format!(
                    "{} already holds a different configuration",
                    self.root.display()
                )));
            }
            return Ok(());
        }
        cfg.write(&path)
    }

    pub fn config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        if !path.exists() {
            return Err(Error::Dependency {
                what: "run configuration (run dataset-build first)".into(),
                path,
            });
        }
        RunConfig::read(&path)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::read(&self.root)
    }

    pub fn classifier(&self) -> Result<ClassifierModel> {
        ClassifierModel::load_checkpoint(&self.classifier_path())
    }

    pub fn sr_model(&self) -> Result<SrModel> {
        SrModel::load(&self.sr_path())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub skipped: usize,
    pub per_split: BTreeMap<String, usize>,
    pub config_fingerprint: String,
}

/// Write a synthetic corpus under `<run>/corpus` and return its path.
pub fn synthesize_corpus(run: &RunDir, per_category: usize, seed_value: u64) -> Result<PathBuf> {
    let root = run.root().join("corpus");
    let n = synth::write_corpus(
        &SynthConfig {
            per_category,
            seed: seed_value,
            ..SynthConfig::default()
        },
        &root,
    )?;
    run.log("dataset-build")?
        .write(&serde_json::json!({"event": "synthesized", "images": n, "per_category": per_category}))?;
    Ok(root)
}

/// Scan `root`, materialize degraded pairs and assign splits.
pub fn dataset_build(run: &RunDir, root: &Path) -> Result<DatasetSummary> {
    let cfg = run.config()?;
    let mut log = run.log("dataset-build")?;
    let (m, skips) = build_manifest(root, &cfg.taxonomy, cfg.naming, cfg.model.factor, cfg.seed)?;
    let (m, pair_skips) = materialize(&m, cfg.model.hr_side, &cfg.degradation, run.root())?;
    let m = split_manifest(&m, cfg.splits.fractions, cfg.seed, cfg.splits.test_count)?;
    for s in skips.iter().chain(&pair_skips) {
        log.write(&serde_json::json!({"event": "skip", "path": s.path, "reason": s.reason}))?;
    }
    m.write(run.root())?;
    let summary = DatasetSummary {
        records: m.records.len(),
        skipped: skips.len() + pair_skips.len(),
        per_split: m.meta.counts.per_split.clone(),
        config_fingerprint: cfg.fingerprint()?,
    };
    log.write(&serde_json::json!({"event": "done", "summary": summary}))?;
    Ok(summary)
}

fn labelled<'a>(m: &Manifest, recs: &[&ShipRecord], images: &'a [Image]) -> Result<Vec<(&'a Image, usize)>> {
    recs.iter().zip(images).map(|(r, im)| Ok((im, m.label(r)?))).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub report: ClassifierReport,
    pub finetune_losses: Vec<f64>,
    pub test_accuracy_hr: f64,
    pub test_accuracy_reference: f64,
}

/// Pre-train the classifier on HR training images, optionally fine-tune on
/// HR plus bicubic references, then freeze and save.
pub fn train_classifier_stage(run: &RunDir) -> Result<ClassifierSummary> {
    let cfg = run.config()?;
    let m = run.manifest()?;
    let mut log = run.log("train-classifier")?;
    let train = m.split(Split::Train);
    let val = m.split(Split::Val);
    let test = m.split(Split::Test);
    let tp = load_pairs(run.root(), &train)?;
    let vp = load_pairs(run.root(), &val)?;
    let thr: Vec<Image> = tp.iter().map(|p| p.hr.clone()).collect();
    let vhr: Vec<Image> = vp.iter().map(|p| p.hr.clone()).collect();
    let (mut model, report) = train_classifier(
        &labelled(&m, &train, &thr)?,
        &labelled(&m, &val, &vhr)?,
        &cfg.taxonomy,
        &cfg.classifier,
    )?;
    log.write(&serde_json::json!({"event": "pretrain", "report": report}))?;
    let finetune_losses = if cfg.classifier.finetune_degraded {
        // HR images stay in the mix so accuracy on sharp inputs is kept.
        let refs: Vec<Image> = tp.iter().map(|p| p.reference.clone()).collect();
        let mut data = labelled(&m, &train, &thr)?;
        data.extend(labelled(&m, &train, &refs)?);
        let l = model.fine_tune(&data, cfg.classifier.finetune_epochs)?;
        log.write(&serde_json::json!({"event": "finetune_degraded", "losses": l}))?;
        l
    } else {
        Vec::new()
    };
    let (acc_hr, acc_ref) = if test.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let pairs = load_pairs(run.root(), &test)?;
        let labels: Vec<usize> = test.iter().map(|r| m.label(r)).collect::<Result<_>>()?;
        let hr: Vec<&Image> = pairs.iter().map(|p| &p.hr).collect();
        let rf: Vec<&Image> = pairs.iter().map(|p| &p.reference).collect();
        (model.accuracy(&hr, &labels)?, model.accuracy(&rf, &labels)?)
    };
    model.save(&run.classifier_path())?;
    let summary = ClassifierSummary {
        report,
        finetune_losses,
        test_accuracy_hr: acc_hr,
        test_accuracy_reference: acc_ref,
    };
    log.write(&serde_json::json!({"event": "done", "summary": summary}))?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SrSummary {
    pub autoencoder_mae: f64,
    pub train: TrainReport,
    pub trainable_params: usize,
}

/// Pre-train and freeze the autoencoder, then train the conditional denoiser.
/// Requires the classifier checkpoint.
pub fn train_sr_stage(run: &RunDir, strict_paper: Option<bool>) -> Result<SrSummary> {
    let cfg = run.config()?;
    let classifier = run.classifier()?;
    let m = run.manifest()?;
    let mut log = run.log("train-sr")?;
    let train = m.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let pairs = load_pairs(run.root(), &train)?;
    let mut model = SrModel::new(&cfg.model)?;
    let hr: Vec<&Image> = pairs.iter().map(|p| &p.hr).collect();
    let stats = model.pretrain_autoencoder(&hr, &cfg.autoencoder_pretrain)?;
    log.write(&serde_json::json!({"event": "autoencoder", "stats": stats}))?;
    let examples: Vec<TrainingExample> = train
        .iter()
        .zip(&pairs)
        .map(|(r, p)| TrainingExample {
            hr: &p.hr,
            reference: &p.reference,
            name: &r.name,
            category: &r.category,
        })
        .collect();
    let set = model.prepare(&examples, &classifier)?;
    let mut opts = cfg.training.clone();
    if let Some(s) = strict_paper {
        opts.strict_paper = s;
    }
    let trainable_params = model.trainable_params();
    let mut log_err = None;
    let report = model.train(&set, &examples[0], &classifier, &opts, &mut |e: &TrainEvent| {
        if let Err(err) = log.write(e) {
            log_err.get_or_insert(err);
        }
        if let TrainEvent::Epoch { phase, epoch, mean_loss, .. } = e {
            log::info!("{phase} epoch {epoch}: loss {mean_loss:.5}");
        }
    })?;
    if let Some(err) = log_err {
        return Err(err);
    }
    model.save(&run.sr_path())?;
    let summary = SrSummary {
        autoencoder_mae: stats.reconstruction_mae,
        train: report,
        trainable_params,
    };
    log.write(&serde_json::json!({"event": "done", "summary": summary}))?;
    Ok(summary)
}

/// Sampling overrides; `None` falls back to the run configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleArgs {
    pub steps: Option<usize>,
    pub eta: Option<f64>,
    pub seed: Option<u64>,
}

/// Super-resolve one LR image into `<run>/<output>`.
pub fn upsample_file(run: &RunDir, input: &Path, output: &Path, args: SampleArgs) -> Result<PathBuf> {
    if output.is_absolute() || output.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Argument(format!(
            "output {} must be a relative path inside the run directory",
            output.display()
        )));
    }
    let cfg = run.config()?;
    let classifier = run.classifier()?;
    let model = run.sr_model()?;
    let lr = Image::load_png(input)?;
    let out = model.upsample(
        &[&lr],
        &classifier,
        args.steps.unwrap_or(cfg.sampling.steps),
        args.eta.unwrap_or(cfg.sampling.eta),
        args.seed.unwrap_or(cfg.sampling.seed),
        1,
    )?;
    let path = run.root().join(output);
    if let Some(p) = path.parent() {
        create_dir(p)?;
    }
    out[0].save_png(&path)?;
    run.log("upsample")?.write(&serde_json::json!({
        "event": "done",
        "input": input,
        "output": output,
        "steps": args.steps.unwrap_or(cfg.sampling.steps),
        "eta": args.eta.unwrap_or(cfg.sampling.eta),
        "seed": args.seed.unwrap_or(cfg.sampling.seed),
    }))?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerImage {
    pub id: String,
    pub file: String,
    pub label: usize,
    pub psnr_model: f64,
    pub psnr_reference: f64,
    pub ssim_model: f64,
    pub ssim_reference: f64,
}

fn output_name(r: &ShipRecord) -> String {
    let safe: String = r
        .id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.png")
}

/// Super-resolve the test split and record per-image metrics.
pub fn evaluate_stage(run: &RunDir, args: SampleArgs) -> Result<Vec<PerImage>> {
    let cfg = run.config()?;
    let classifier = run.classifier()?;
    let model = run.sr_model()?;
    let m = run.manifest()?;
    let test = m.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let pairs = load_pairs(run.root(), &test)?;
    let lr: Vec<&Image> = pairs.iter().map(|p| &p.lr).collect();
    let steps = args.steps.unwrap_or(cfg.sampling.steps);
    let eta = args.eta.unwrap_or(cfg.sampling.eta);
    let seed_value = args.seed.unwrap_or(cfg.sampling.seed);
    let sr = model.upsample(&lr, &classifier, steps, eta, seed_value, cfg.sampling.chunk)?;
    let dir = run.eval_dir().join("sr");
    create_dir(&dir)?;
    let per_path = run.eval_dir().join("per_image.jsonl");
    // A fresh evaluation replaces the previous one.
    if per_path.exists() {
        fs::remove_file(&per_path).at(&per_path)?;
    }
    let mut per = JsonlLog::open(&per_path)?;
    let mut rows = Vec::with_capacity(test.len());
    for ((r, p), out) in test.iter().zip(&pairs).zip(&sr) {
        let file = output_name(r);
        out.save_png(&dir.join(&file))?;
        let row = PerImage {
            id: r.id.clone(),
            file: format!("eval/sr/{file}"),
            label: m.label(r)?,
            psnr_model: psnr(out, &p.hr)?,
            psnr_reference: psnr(&p.reference, &p.hr)?,
            ssim_model: ssim(out, &p.hr)?,
            ssim_reference: ssim(&p.reference, &p.hr)?,
        };
        per.write(&row)?;
        rows.push(row);
    }
    run.log("evaluate")?.write(&serde_json::json!({
        "event": "done", "images": rows.len(), "steps": steps, "eta": eta, "seed": seed_value,
    }))?;
    Ok(rows)
}

/// Aggregate the evaluation into `report.json`, `grid.png` and `report.md`.
pub fn report_stage(run: &RunDir) -> Result<MetricsReport> {
    let cfg = run.config()?;
    let classifier = run.classifier()?;
    let m = run.manifest()?;
    let per_path = run.eval_dir().join("per_image.jsonl");
    let text = fs::read_to_string(&per_path).map_err(|_| Error::Dependency {
        what: "evaluation outputs (run evaluate first)".into(),
        path: per_path.clone(),
    })?;
    let rows: Vec<PerImage> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let by_id: BTreeMap<&str, &ShipRecord> = m.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let recs: Vec<&ShipRecord> = rows
        .iter()
        .map(|row| {
            by_id
                .get(row.id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("evaluated record {} not in manifest", row.id)))
        })
        .collect::<Result<_>>()?;
    let pairs = load_pairs(run.root(), &recs)?;
    let sr: Vec<Image> = rows
        .iter()
        .map(|row| Image::load_png(&run.root().join(&row.file)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let gt: Vec<Image> = pairs.iter().map(|p| p.hr.clone()).collect();
    let mut methods = BTreeMap::new();
    methods.insert(LR_REFERENCE.to_string(), pairs.iter().map(|p| p.reference.clone()).collect());
    methods.insert(MODEL.to_string(), sr);
    let (report, grid) = comparison_report(
        &methods,
        &gt,
        &labels,
        &classifier,
        &classifier,
        &cfg.fingerprint()?,
        cfg.eval.grid_rows,
    )?;
    write_json(&run.root().join("report.json"), &report)?;
    grid.save_png(&run.root().join("grid.png"))?;
    let mut md = String::from("| method | PSNR | SSIM | FID | accuracy |\n|---|---|---|---|---|\n");
    for (name, v) in &report.methods {
        md.push_str(&format!(
            "| {name} | {:.3} | {:.4} | {:.3} | {:.3} |\n",
            v.psnr, v.ssim, v.fid, v.accuracy
        ));
    }
    md.push_str(&format!(
        "\nembedder: `{}`\nconfig: `{}`\nimages: {}\n",
        report.embedder_id,
        report.config_fingerprint,
        rows.len()
    ));
    let md_path = run.root().join("report.md");
    fs::write(&md_path, &md).at(&md_path)?;
    run.log("report")?.write(&serde_json::json!({"event": "done", "report": report}))?;
    Ok(report)
}

pub fn read_report(run: &RunDir) -> Result<MetricsReport> {
    read_json(&run.root().join("report.json"), "report")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_report_missing_prerequisites() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path().join("r"));
        assert!(matches!(run.config(), Err(Error::Dependency { .. })));
        run.init(&RunConfig::desk()).unwrap();
        assert!(matches!(train_classifier_stage(&run), Err(Error::Dependency { .. })));
        assert!(matches!(evaluate_stage(&run, SampleArgs::default()), Err(Error::Dependency { .. })));
        assert!(matches!(report_stage(&run), Err(Error::Dependency { .. })));
        let other = RunConfig::desk().with_seed(99);
        assert!(matches!(run.init(&other), Err(Error::Config(_))));
        run.init(&RunConfig::desk()).unwrap();
    }

    #[test]
    fn log_appends_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path());
        run.log("x").unwrap().write(&serde_json::json!({"a": 1})).unwrap();
        run.log("x").unwrap().write(&serde_json::json!({"a": 2})).unwrap();
        let text = fs::read_to_string(tmp.path().join("logs/x.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}

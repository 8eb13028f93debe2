//! Corpus ingestion from a local `root/<category>/<image>` tree, HR/LR/reference
//! pair materialization and stratified train/val/test splits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::CategoryTaxonomy;
use crate::degradation::{center_crop, make_image_pair, DegradationConfig, DegradationSpec, ImagePair};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::{par, seed};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "corpus_meta.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line. Before materialization `hr_path` points at the source
/// image and the LR/reference paths are empty; afterwards all three are
/// relative to the run directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShipRecord {
    pub id: String,
    pub name: String,
    pub category: String,
    pub hr_path: String,
    pub lr_path: String,
    pub ref_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub skipped: usize,
    pub per_category: BTreeMap<String, usize>,
    pub per_split: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub taxonomy: CategoryTaxonomy,
    pub factor: usize,
    pub seed: u64,
    pub hr_side: usize,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ShipRecord>,
    pub meta: CorpusMeta,
}

/// A file left out of the corpus, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub path: String,
    pub reason: String,
}

/// How a ship name is derived from the file stem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingRule {
    /// The stem verbatim.
    Stem,
    /// `_` and `-` become spaces: `MV_Nordic-Star` → `MV Nordic Star`.
    #[default]
    Words,
}

impl NamingRule {
    pub fn apply(self, stem: &str) -> String {
        match self {
            NamingRule::Stem => stem.to_string(),
            NamingRule::Words => stem
                .split(['_', '-'])
                .filter(|w| !w.is_empty())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_hidden(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_none_or(|n| n.starts_with('.'))
}

impl Manifest {
    pub fn recount(&mut self) {
        let mut c = Counts {
            total: self.records.len(),
            skipped: self.meta.counts.skipped,
            ..Default::default()
        };
        for name in self.meta.taxonomy.names() {
            c.per_category.insert(name.clone(), 0);
        }
        for s in Split::ALL {
            c.per_split.insert(s.as_str().into(), 0);
        }
        for r in &self.records {
            *c.per_category.entry(r.category.clone()).or_default() += 1;
            *c.per_split.entry(r.split.as_str().into()).or_default() += 1;
        }
        self.meta.counts = c;
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate record id {}", r.id)));
            }
            if self.meta.taxonomy.index_of(&r.category).is_none() {
                return Err(Error::Data(format!("record {} has unknown category {}", r.id, r.category)));
            }
        }
        if self.meta.counts.total != self.records.len() {
            return Err(Error::Data("corpus counts disagree with the record list".into()));
        }
        Ok(())
    }

    pub fn split(&self, s: Split) -> Vec<&ShipRecord> {
        self.records.iter().filter(|r| r.split == s).collect()
    }

    pub fn label(&self, r: &ShipRecord) -> Result<usize> {
        self.meta
            .taxonomy
            .index_of(&r.category)
            .ok_or_else(|| Error::Data(format!("unknown category {}", r.category)))
    }

    /// `manifest.jsonl` (sorted by id) and `corpus_meta.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut recs: Vec<&ShipRecord> = self.records.iter().collect();
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut buf = Vec::new();
        for r in recs {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mp = dir.join(MANIFEST_FILE);
        fs::write(&mp, buf).map_err(io_err(&mp))?;
        let meta = dir.join(META_FILE);
        let mut f = fs::File::create(&meta).map_err(io_err(&meta))?;
        serde_json::to_writer_pretty(&mut f, &self.meta)?;
        f.write_all(b"\n").map_err(io_err(&meta))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let f = fs::File::open(&mp).map_err(|_| Error::Dependency {
            what: "dataset manifest".into(),
            path: mp.clone(),
        })?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&mp))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let meta_path = dir.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path).map_err(|_| Error::Dependency {
            what: "corpus metadata".into(),
            path: meta_path.clone(),
        })?;
        let m = Manifest {
            records,
            meta: serde_json::from_str(&meta_text)?,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Scan `root/<category>/*` in lexicographic path order. Subdirectories not
/// in the taxonomy and unreadable images are skipped and reported.
pub fn build_manifest(
    root: &Path,
    taxonomy: &CategoryTaxonomy,
    naming: NamingRule,
    factor: usize,
    seed_value: u64,
) -> Result<(Manifest, Vec<Skip>)> {
    if !root.is_dir() {
        return Err(Error::Data(format!("corpus root {} is not a directory", root.display())));
    }
    let mut records = Vec::new();
    let mut skips = Vec::new();
    let mut skip = |path: &Path, reason: String| {
        log::warn!("skipping {}: {reason}", path.display());
        skips.push(Skip {
            path: path.display().to_string(),
            reason,
        });
    };
    for dir in sorted_entries(root)? {
        if is_hidden(&dir) || !dir.is_dir() {
            continue;
        }
        let category = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if taxonomy.index_of(&category).is_none() {
            skip(&dir, "directory is not a taxonomy category".into());
            continue;
        }
        for file in sorted_entries(&dir)? {
            if is_hidden(&file) || !file.is_file() {
                continue;
            }
            let len = fs::metadata(&file).map_err(io_err(&file))?.len();
            if len == 0 {
                skip(&file, "zero-byte file".into());
                continue;
            }
            if let Err(e) = image::image_dimensions(&file) {
                skip(&file, format!("unreadable image: {e}"));
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            records.push(ShipRecord {
                id: format!("{category}/{stem}"),
                name: naming.apply(stem),
                category: category.clone(),
                hr_path: file.display().to_string(),
                lr_path: String::new(),
                ref_path: String::new(),
                split: Split::Train,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no readable images under {}", root.display())));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut m = Manifest {
        records,
        meta: CorpusMeta {
            taxonomy: taxonomy.clone(),
            factor,
            seed: seed_value,
            hr_side: 0,
            counts: Counts {
                skipped: skips.len(),
                ..Default::default()
            },
        },
    };
    m.recount();
    m.validate()?;
    Ok((m, skips))
}

fn file_stem_for(id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    let h = Sha256::digest(id.as_bytes());
    format!("{clean}-{}", hex::encode(&h[..4]))
}

/// Crop, degrade and write one record's HR/LR/reference PNGs under
/// `run_dir/pairs/`, updating the record's paths. Undersized sources yield
/// `Ok(None)` after a log line.
pub fn make_pair(
    rec: &mut ShipRecord,
    hr_side: usize,
    cfg: &DegradationConfig,
    run_dir: &Path,
) -> Result<Option<ImagePair>> {
    if hr_side == 0 || hr_side % cfg.downscale_factor != 0 {
        return Err(Error::Dimension(format!(
            "hr side {hr_side} is not a positive multiple of factor {}",
            cfg.downscale_factor
        )));
    }
    let src = Image::load_png(Path::new(&rec.hr_path))?;
    let (w, h) = src.dims();
    if w.min(h) < hr_side {
        log::warn!("skipping {}: {w}x{h} is smaller than {hr_side}", rec.id);
        return Ok(None);
    }
    let pair = make_image_pair(center_crop(&src, hr_side)?, cfg)?;
    let stem = file_stem_for(&rec.id);
    let mut paths = Vec::new();
    for (kind, img) in [("hr", &pair.hr), ("lr", &pair.lr), ("ref", &pair.reference)] {
        let rel = format!("pairs/{kind}/{stem}.png");
        let abs = run_dir.join(&rel);
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        img.save_png(&abs)?;
        paths.push(rel);
    }
    rec.hr_path = paths[0].clone();
    rec.lr_path = paths[1].clone();
    rec.ref_path = paths[2].clone();
    Ok(Some(pair))
}

/// Materialize every record in parallel; each record's degradation depends
/// only on `(manifest seed, record id)`.
pub fn materialize(m: &Manifest, hr_side: usize, spec: &DegradationSpec, run_dir: &Path) -> Result<(Manifest, Vec<Skip>)> {
    let factor = m.meta.factor;
    let results: Vec<Result<(ShipRecord, bool)>> = par::map(&m.records, |r| {
        let cfg = spec.for_record(factor, m.meta.seed, &r.id)?;
        let mut rec = r.clone();
        let kept = make_pair(&mut rec, hr_side, &cfg, run_dir)?.is_some();
        Ok((rec, kept))
    });
    let mut records = Vec::new();
    let mut skips = Vec::new();
    for res in results {
        let (rec, kept) = res?;
        if kept {
            records.push(rec);
        } else {
            skips.push(Skip {
                path: rec.hr_path,
                reason: format!("source smaller than {hr_side}"),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Data("no record survived pair materialization".into()));
    }
    let mut out = Manifest {
        records,
        meta: m.meta.clone(),
    };
    out.meta.hr_side = hr_side;
    out.meta.counts.skipped += skips.len();
    out.recount();
    Ok((out, skips))
}

/// Integer apportionment of `total` by `weights`: floors first, then the
/// leftover units go to the largest fractional parts (earlier index on ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        let mut v = vec![0; weights.len()];
        if let Some(first) = v.first_mut() {
            *first = total;
        }
        return v;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified split. With `test_count`, exactly that many test records are
/// apportioned across categories and the rest split train/val by the
/// remaining fractions.
pub fn split_manifest(m: &Manifest, fractions: [f64; 3], seed_value: u64, test_count: Option<usize>) -> Result<Manifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Argument(format!("split fractions must be >= 0, got {fractions:?}")));
    }
    let n = m.records.len();
    if let Some(tc) = test_count {
        if tc > n {
            return Err(Error::Argument(format!("test count {tc} exceeds {n} records")));
        }
    } else if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        by_cat.entry(r.category.as_str()).or_default().push(i);
    }
    let tests: Vec<usize> = match test_count {
        Some(tc) => {
            let sizes: Vec<f64> = by_cat.values().map(|v| v.len() as f64).collect();
            largest_remainder(tc, &sizes)
        }
        None => vec![0; by_cat.len()],
    };
    let mut out = m.clone();
    for ((cat, idx), n_test) in by_cat.iter().zip(tests) {
        let counts = match test_count {
            Some(_) => {
                let tv = largest_remainder(idx.len() - n_test, &fractions[..2]);
                [tv[0], tv[1], n_test]
            }
            None => {
                let c = largest_remainder(idx.len(), &fractions);
                [c[0], c[1], c[2]]
            }
        };
        let mut order = idx.clone();
        order.sort_by(|&a, &b| m.records[a].id.cmp(&m.records[b].id));
        let mut rng = seed::derived_rng(seed_value, &format!("split/{cat}"));
        order.shuffle(&mut rng);
        let mut pos = 0;
        for (s, c) in Split::ALL.iter().zip(counts) {
            for &i in &order[pos..pos + c] {
                out.records[i].split = *s;
            }
            pos += c;
        }
    }
    out.recount();
    Ok(out)
}

/// Load the HR, LR and reference images of the given records.
pub fn load_pairs(run_dir: &Path, recs: &[&ShipRecord]) -> Result<Vec<ImagePair>> {
    par::map(recs, |r| {
        Ok(ImagePair {
            hr: Image::load_png(&run_dir.join(&r.hr_path))?,
            lr: Image::load_png(&run_dir.join(&r.lr_path))?,
            reference: Image::load_png(&run_dir.join(&r.ref_path))?,
        })
    })
    .into_iter()
    .collect()
}

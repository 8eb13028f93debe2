//! PSNR, SSIM, Fréchet/FID with a pluggable embedder, downstream accuracy and
//! the per-method comparison report.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
const PSD_TOL: f64 = -1e-8;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images; identical inputs give
/// [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over Gaussian-weighted windows of the BT.601 luma planes.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

pub fn ssim_with(a: &Image, b: &Image, window: usize, c1: f64, c2: f64) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if window == 0 || w < window || h < window {
        return Err(Error::Dimension(format!("{w}x{h} is smaller than the {window}-pixel window")));
    }
    let k = gaussian_window(window, SSIM_SIGMA);
    let la = a.luma();
    let lb = b.luma();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let e_aa = filter_valid(&prod(&la, &la), w, h, &k);
    let e_bb = filter_valid(&prod(&lb, &lb), w, h, &k);
    let e_ab = filter_valid(&prod(&la, &lb), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean and covariance of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Two-pass estimate with the unbiased `N − 1` denominator, accumulated
    /// in row order.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 feature rows, got {n}")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("feature rows must share a positive width".into()));
        }
        let mut mean = DVector::zeros(d);
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c: Vec<f64> = r.iter().zip(mean.iter()).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Self::new(mean, cov)
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!("covariance {}x{} for mean of {d}", cov.nrows(), cov.ncols())));
        }
        if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian statistics".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-8 {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m.clone());
    for v in e.eigenvalues.iter_mut() {
        if *v < PSD_TOL {
            return Err(Error::Numeric(format!("{what} has eigenvalue {v:e} below tolerance")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, with the trace of the matrix root
/// taken as `Tr((Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2})`.
pub fn frechet_distance(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Dimension(format!("feature dims {} vs {}", g1.dim(), g2.dim())));
    }
    let e1 = psd_eigen(&g1.cov, "first covariance")?;
    psd_eigen(&g2.cov, "second covariance")?;
    let root1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let mut inner = &root1 * &g2.cov * &root1;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_eigen(&inner, "covariance product")?;
    let tr_root: f64 = cross.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = &g1.mean - &g2.mean;
    let d = diff.norm_squared() + g1.cov.trace() + g2.cov.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Image → feature vector map used for FID.
pub trait Embedder: Sync {
    /// Stamped into every report so numbers from different embedders are
    /// never compared.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;
}

impl Embedder for ClassifierModel {
    fn id(&self) -> String {
        let mut fp = 0xcbf29ce484222325u64;
        for (_, p) in self.params().iter() {
            for v in p.value.data() {
                fp = (fp ^ v.to_bits() as u64).wrapping_mul(0x100000001b3);
            }
        }
        format!("ship-classifier-penultimate-d{}-{fp:016x}", self.feature_dim())
    }

    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.features(images)
    }
}

pub fn fid(a: &[&Image], b: &[&Image], embedder: &dyn Embedder) -> Result<f64> {
    let d = embedder.dim();
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Data(format!(
            "FID needs at least {} images per set, got {} and {}",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let ga = GaussianStats::from_features(&embedder.embed(a)?)?;
    let gb = GaussianStats::from_features(&embedder.embed(b)?)?;
    frechet_distance(&ga, &gb)
}

/// Anything that assigns a category index to an image.
pub trait LabelPredictor: Sync {
    fn predict(&self, images: &[&Image]) -> Result<Vec<usize>>;
}

impl LabelPredictor for ClassifierModel {
    fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        ClassifierModel::predict(self, images)
    }
}

/// Top-1 accuracy of `m` on `images`.
pub fn downstream_eval(images: &[&Image], labels: &[usize], m: &dyn LabelPredictor) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Data("downstream evaluation on an empty set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Data(format!("{} images vs {} labels", images.len(), labels.len())));
    }
    let pred = m.predict(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub fid: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    pub embedder_id: String,
    pub methods: BTreeMap<String, MethodMetrics>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in &self.methods {
            if ![m.psnr, m.ssim, m.fid, m.accuracy].iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite metric for {name}")));
            }
        }
        Ok(())
    }
}

/// Mean PSNR and SSIM against ground truth, per-image work in parallel and
/// summed in input order.
pub fn mean_psnr_ssim(images: &[&Image], gt: &[&Image]) -> Result<(f64, f64)> {
    if images.is_empty() || images.len() != gt.len() {
        return Err(Error::Data(format!("{} images vs {} references", images.len(), gt.len())));
    }
    let pairs: Vec<(&Image, &Image)> = images.iter().copied().zip(gt.iter().copied()).collect();
    let per: Vec<Result<(f64, f64)>> = par::map(&pairs, |(a, b)| Ok((psnr(a, b)?, ssim(a, b)?)));
    let mut sp = 0.0;
    let mut ss = 0.0;
    for r in per {
        let (p, s) = r?;
        sp += p;
        ss += s;
    }
    let n = images.len() as f64;
    Ok((sp / n, ss / n))
}

/// Per-method PSNR/SSIM/FID/accuracy against `gt`, plus a comparison grid
/// with one row per sample (first `grid_rows`) and one column per method
/// followed by ground truth.
pub fn comparison_report(
    methods: &BTreeMap<String, Vec<Image>>,
    gt: &[Image],
    labels: &[usize],
    predictor: &dyn LabelPredictor,
    embedder: &dyn Embedder,
    config_fingerprint: &str,
    grid_rows: usize,
) -> Result<(MetricsReport, Image)> {
    if methods.is_empty() {
        return Err(Error::Data("comparison needs at least one method".into()));
    }
    if labels.len() != gt.len() {
        return Err(Error::Data(format!("{} labels for {} ground-truth images", labels.len(), gt.len())));
    }
    let gt_refs: Vec<&Image> = gt.iter().collect();
    let mut out = BTreeMap::new();
    for (name, imgs) in methods {
        if imgs.len() != gt.len() {
            return Err(Error::Data(format!("method {name} has {} images, ground truth {}", imgs.len(), gt.len())));
        }
        let refs: Vec<&Image> = imgs.iter().collect();
        let (p, s) = mean_psnr_ssim(&refs, &gt_refs)?;
        out.insert(
            name.clone(),
            MethodMetrics {
                psnr: p,
                ssim: s,
                fid: fid(&refs, &gt_refs, embedder)?,
                accuracy: downstream_eval(&refs, labels, predictor)?,
            },
        );
    }
    let report = MetricsReport {
        config_fingerprint: config_fingerprint.to_string(),
        embedder_id: embedder.id(),
        methods: out,
    };
    report.validate()?;
    let rows: Vec<Vec<&Image>> = (0..grid_rows.min(gt.len()))
        .map(|i| {
            let mut row: Vec<&Image> = methods.values().map(|v| &v[i]).collect();
            row.push(&gt[i]);
            row
        })
        .collect();
    Ok((report, image_grid(&rows, 2)?))
}

/// Tile rows of equally sized images with a white gutter of `gap` pixels.
pub fn image_grid(rows: &[Vec<&Image>], gap: usize) -> Result<Image> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Data("empty image grid".into()))?;
    let (w, h) = first.dims();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|im| im.dims() != (w, h))) {
        return Err(Error::Dimension("grid cells must share a size and column count".into()));
    }
    let gw = cols * w + (cols + 1) * gap;
    let gh = rows.len() * h + (rows.len() + 1) * gap;
    let mut grid = Image::filled(gw, gh, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            let (x0, y0) = (gap + c * (w + gap), gap + r * (h + gap));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        grid.set(x0 + x, y0 + y, ch, im.get(x, y, ch));
                    }
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noisy(im: &Image, sigma: f64, s: u64) -> Image {
        let mut rng = seed::rng(s);
        let data = im
            .data()
            .iter()
            .map(|&v| {
                let n: f64 = StandardNormal.sample(&mut rng);
                (v as f64 + sigma * n) as f32
            })
            .collect();
        Image::new(im.width(), im.height(), data).unwrap()
    }

    fn random_image(w: usize, h: usize, s: u64) -> Image {
        let mut rng = seed::rng(s);
        let data = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(16, 16, 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 16.0 / 255.0);
        let want = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-3);
        assert_eq!(psnr(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0)).unwrap(), 0.0);
        assert!(matches!(psnr(&a, &Image::filled(8, 8, 0.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = Image::from_fn(64, 64, |x, y| [x as f32 / 64.0, y as f32 / 64.0, 0.5]);
        let p: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| psnr(&base, &noisy(&base, s, 9)).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(24, 24, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let z = Image::filled(16, 16, 0.0);
        let o = Image::filled(16, 16, 1.0);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&z, &o).unwrap() - want).abs() < 1e-6);
        assert!((want - 9.999e-5).abs() < 1e-6);
        assert!(matches!(ssim(&Image::filled(10, 10, 0.0), &Image::filled(10, 10, 0.0)), Err(Error::Dimension(_))));
    }

    /// Direct per-window evaluation without separable filtering.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (w, h) = a.dims();
        let (la, lb) = (a.luma(), b.luma());
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let gs: f64 = g.iter().sum::<f64>().powi(2);
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dy] * g[dx] / gs;
                        let (p, q) = (la[(y0 + dy) * w + x0 + dx], lb[(y0 + dy) * w + x0 + dx]);
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cv) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + 1e-4) * (2.0 * cv + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let a = random_image(20, 17, 3);
        let b = noisy(&a, 0.1, 4);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-10);
    }

    fn identity_stats(mean: Vec<f64>) -> GaussianStats {
        let d = mean.len();
        GaussianStats::new(DVector::from_vec(mean), DMatrix::identity(d, d)).unwrap()
    }

    #[test]
    fn frechet_closed_forms() {
        let a = identity_stats(vec![0.0; 8]);
        let mut m = vec![0.0; 8];
        m[0] = 2.0;
        let b = identity_stats(m);
        assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() < 1e-8);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        // Σ1 = diag(1,4), Σ2 = diag(4,1): Tr = 10 - 2*(2+2) = 2
        let c = GaussianStats::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))).unwrap();
        let d = GaussianStats::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).unwrap();
        assert!((frechet_distance(&c, &d).unwrap() - 2.0).abs() < 1e-10);
        let bad = GaussianStats {
            mean: DVector::zeros(2),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5])),
        };
        assert!(matches!(frechet_distance(&bad, &c), Err(Error::Numeric(_))));
    }

    fn gaussian_rows(n: usize, d: usize, shift: f64, s: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(s);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + if j == 0 { shift } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn sampled_frechet_near_closed_form() {
        let a = GaussianStats::from_features(&gaussian_rows(10_000, 8, 0.0, 1)).unwrap();
        let b = GaussianStats::from_features(&gaussian_rows(10_000, 8, 2.0, 2)).unwrap();
        let f = frechet_distance(&a, &b).unwrap();
        assert!((f - 4.0).abs() < 0.4, "{f}");
    }

    /// Flattened pixels of a tiny image.
    struct Pixels;

    impl Embedder for Pixels {
        fn id(&self) -> String {
            "pixels".into()
        }
        fn dim(&self) -> usize {
            12
        }
        fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
            Ok(images.iter().map(|im| im.data().iter().map(|&v| v as f64).collect()).collect())
        }
    }

    fn tiny_set(n: usize, shift: f32, s: u64) -> Vec<Image> {
        let mut rng = seed::rng(s);
        (0..n)
            .map(|_| {
                let data = (0..12)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        0.5 + 0.1 * z + shift
                    })
                    .collect();
                Image::new(2, 2, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn fid_basic_properties() {
        let a = tiny_set(200, 0.0, 1);
        let ra: Vec<&Image> = a.iter().collect();
        assert!(fid(&ra, &ra, &Pixels).unwrap().abs() < 1e-6);
        let heavy: Vec<Image> = a.iter().enumerate().map(|(i, im)| noisy(im, 0.2, i as u64)).collect();
        let light: Vec<Image> = a.iter().enumerate().map(|(i, im)| noisy(im, 0.05, i as u64)).collect();
        let rh: Vec<&Image> = heavy.iter().collect();
        let rl: Vec<&Image> = light.iter().collect();
        assert!(fid(&ra, &rh, &Pixels).unwrap() > fid(&ra, &rl, &Pixels).unwrap());
        assert!(matches!(fid(&ra[..12], &ra, &Pixels), Err(Error::Data(_))));
    }

    #[test]
    fn fid_bias_shrinks_with_n() {
        let a = tiny_set(10_000, 0.0, 5);
        let b = tiny_set(10_000, 0.02, 6);
        let at = |n: usize| {
            let ra: Vec<&Image> = a[..n].iter().collect();
            let rb: Vec<&Image> = b[..n].iter().collect();
            fid(&ra, &rb, &Pixels).unwrap()
        };
        let (f500, f5k, f10k) = (at(500), at(5000), at(10_000));
        assert!((f5k - f10k).abs() < (f500 - f10k).abs(), "{f500} {f5k} {f10k}");
    }

    struct Stub(Vec<usize>);

    impl LabelPredictor for Stub {
        fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(self.0[..images.len()].to_vec())
        }
    }

    #[test]
    fn downstream_accuracy_cases() {
        let n = 4000;
        let imgs = vec![Image::filled(2, 2, 0.0); n];
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut rng = seed::rng(3);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let perfect = Stub(truth.clone());
        assert_eq!(downstream_eval(&refs, &truth, &perfect).unwrap(), 1.0);
        let mut shuffled = truth.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let acc = downstream_eval(&refs, &shuffled, &perfect).unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
        assert!(matches!(downstream_eval(&[], &[], &perfect), Err(Error::Data(_))));
    }

    #[test]
    fn report_shape_and_roundtrip() {
        let gt: Vec<Image> = (0..20).map(|i| random_image(12, 12, i)).collect();
        let lr: Vec<Image> = gt.iter().enumerate().map(|(i, im)| noisy(im, 0.05, 100 + i as u64)).collect();
        let labels = vec![0usize; 20];
        struct Means;
        impl Embedder for Means {
            fn id(&self) -> String {
                "means".into()
            }
            fn dim(&self) -> usize {
                3
            }
            fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
                Ok(images
                    .iter()
                    .map(|im| {
                        (0..3)
                            .map(|c| im.data().iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>())
                            .collect()
                    })
                    .collect())
            }
        }
        let mut methods = BTreeMap::new();
        methods.insert("lr_reference".to_string(), lr);
        let (rep, grid) =
            comparison_report(&methods, &gt, &labels, &Stub(vec![0; 20]), &Means, "abc", 3).unwrap();
        assert_eq!(rep.methods.len(), 1);
        assert_eq!(rep.embedder_id, "means");
        assert_eq!(grid.dims(), (2 * 12 + 3 * 2, 3 * 12 + 4 * 2));
        let text = serde_json::to_string(&rep).unwrap();
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let m = &v["methods"]["lr_reference"];
        for k in ["psnr", "ssim", "fid", "accuracy"] {
            assert!(m[k].is_number());
        }
        let mut bad = methods.clone();
        bad.insert("short".into(), vec![Image::filled(12, 12, 0.0)]);
        assert!(matches!(
            comparison_report(&bad, &gt, &labels, &Stub(vec![0; 20]), &Means, "abc", 3),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_image(14, 13, s1);
            let b = random_image(14, 13, s2);
            let x = ssim(&a, &b).unwrap();
            prop_assert!((x - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
        }

        #[test]
        fn frechet_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = GaussianStats::from_features(&gaussian_rows(40, 4, 0.5, s1)).unwrap();
            let b = GaussianStats::from_features(&gaussian_rows(40, 4, 0.0, s2)).unwrap();
            let f = frechet_distance(&a, &b).unwrap();
            prop_assert!((f - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
            prop_assert!(f > 0.0);
        }
    }
}

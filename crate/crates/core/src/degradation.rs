//! HR → LR degradation: blur with a normalized kernel, decimate, add sensor
//! noise on the LR grid, optionally quantize block-DCT coefficients to mimic
//! compression. Also the bicubic reference upscaler.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::seed;

/// Square 2-D blur kernel with odd side length.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    data: Vec<f64>,
    /// 1-D factor when the kernel is an outer product of it with itself.
    separable: Option<Vec<f64>>,
}

impl Kernel {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Argument(format!("kernel side must be odd, got {size}")));
        }
        if data.len() != size * size {
            return Err(Error::Dimension(format!(
                "kernel of side {size} needs {} entries, got {}",
                size * size,
                data.len()
            )));
        }
        let k = Self {
            size,
            data,
            separable: None,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Self {
            size: 1,
            data: vec![1.0],
            separable: Some(vec![1.0]),
        }
    }

    /// Isotropic Gaussian of the given side and standard deviation (HR pixels).
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Argument(format!("kernel side must be odd, got {size}")));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::Argument(format!("gaussian sigma must be > 0, got {sigma}")));
        }
        let r = (size / 2) as f64;
        let mut g: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        let data = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        Ok(Self {
            size,
            data,
            separable: Some(g),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.data.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("kernel entries must sum to 1, got {s}")));
        }
        Ok(())
    }
}

/// Configuration-level description of the blur kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Identity,
    Gaussian { size: usize, sigma: f64 },
    /// Per-image isotropic Gaussian with sigma drawn uniformly in `[sigma_min, sigma_max]`.
    RandomGaussian {
        size: usize,
        sigma_min: f64,
        sigma_max: f64,
    },
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::RandomGaussian {
            size: 21,
            sigma_min: 0.2,
            sigma_max: 3.0,
        }
    }
}

impl KernelSpec {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<Kernel> {
        match *self {
            Self::Identity => Ok(Kernel::identity()),
            Self::Gaussian { size, sigma } => Kernel::gaussian(size, sigma),
            Self::RandomGaussian {
                size,
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0 && sigma_min <= sigma_max) {
                    return Err(Error::Argument(format!(
                        "invalid sigma range [{sigma_min}, {sigma_max}]"
                    )));
                }
                let s = if sigma_max > sigma_min {
                    rng.random_range(sigma_min..=sigma_max)
                } else {
                    sigma_min
                };
                Kernel::gaussian(size, s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationConfig {
    pub kernel: Kernel,
    pub downscale_factor: usize,
    /// Standard deviation of additive Gaussian noise on the `[0, 1]` scale.
    pub noise_sigma: f64,
    pub compression_quality: Option<u8>,
    pub seed: u64,
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.downscale_factor < 1 {
            return Err(Error::Argument("downscale factor must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if let Some(q) = self.compression_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::Argument(format!("compression quality {q} outside [1, 100]")));
            }
        }
        Ok(())
    }
}

/// Corpus-level degradation recipe; per-image configs are derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kernel: KernelSpec,
    pub noise_sigma: f64,
    pub compression_quality: Option<u8>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            noise_sigma: 0.02,
            compression_quality: None,
        }
    }
}

impl DegradationSpec {
    /// Per-record configuration; depends only on `(global_seed, record_id)`.
    pub fn for_record(&self, factor: usize, global_seed: u64, record_id: &str) -> Result<DegradationConfig> {
        let s = seed::derive_seed(global_seed, record_id);
        let mut rng = seed::rng(s);
        let kernel = self.kernel.sample(&mut rng)?;
        let cfg = DegradationConfig {
            kernel,
            downscale_factor: factor,
            noise_sigma: self.noise_sigma,
            compression_quality: self.compression_quality,
            seed: rng.random(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// HR / LR / bicubic-reference triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub hr: Image,
    pub lr: Image,
    pub reference: Image,
}

pub fn center_crop(x: &Image, side: usize) -> Result<Image> {
    let (w, h) = x.dims();
    if side == 0 || side > w.min(h) {
        return Err(Error::Dimension(format!(
            "crop side {side} does not fit a {w}x{h} image"
        )));
    }
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    Ok(Image::from_fn(side, side, |x_, y_| {
        [
            x.get(x0 + x_, y0 + y_, 0),
            x.get(x0 + x_, y0 + y_, 1),
            x.get(x0 + x_, y0 + y_, 2),
        ]
    }))
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Convolve with `k` using reflect padding; output has the input's size.
pub fn blur(x: &Image, k: &Kernel) -> Image {
    if k.size == 1 {
        return x.map(|v| v * k.data[0] as f32);
    }
    let (w, h) = x.dims();
    let r = (k.size / 2) as isize;
    if let Some(g) = &k.separable {
        let mut tmp = vec![0f64; w * h * 3];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = [0f64; 3];
                for (j, &kv) in g.iter().enumerate() {
                    let sx = reflect(xx as isize + j as isize - r, w);
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += kv * x.get(sx, y, c) as f64;
                    }
                }
                tmp[(y * w + xx) * 3..(y * w + xx) * 3 + 3].copy_from_slice(&acc);
            }
        }
        return Image::from_fn(w, h, |xx, y| {
            let mut acc = [0f64; 3];
            for (i, &kv) in g.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - r, h);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * tmp[(sy * w + xx) * 3 + c];
                }
            }
            [acc[0] as f32, acc[1] as f32, acc[2] as f32]
        });
    }
    Image::from_fn(w, h, |xx, y| {
        let mut acc = [0f64; 3];
        for i in 0..k.size {
            let sy = reflect(y as isize + i as isize - r, h);
            for j in 0..k.size {
                let sx = reflect(xx as isize + j as isize - r, w);
                let kv = k.data[i * k.size + j];
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * x.get(sx, sy, c) as f64;
                }
            }
        }
        [acc[0] as f32, acc[1] as f32, acc[2] as f32]
    })
}

/// Keep one sample per `f×f` block, taken at the block centre. For even `f`
/// the centre falls between pixels and the four nearest samples are averaged.
pub fn decimate(x: &Image, f: usize) -> Result<Image> {
    let (w, h) = x.dims();
    if f == 0 || w % f != 0 || h % f != 0 {
        return Err(Error::Dimension(format!(
            "{w}x{h} image is not divisible by factor {f}"
        )));
    }
    let taps: Vec<usize> = if f % 2 == 1 { vec![f / 2] } else { vec![f / 2 - 1, f / 2] };
    let inv = 1.0 / (taps.len() * taps.len()) as f64;
    Ok(Image::from_fn(w / f, h / f, |xx, y| {
        let mut acc = [0f64; 3];
        for &ty in &taps {
            for &tx in &taps {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += x.get(xx * f + tx, y * f + ty, c) as f64;
                }
            }
        }
        [(acc[0] * inv) as f32, (acc[1] * inv) as f32, (acc[2] * inv) as f32]
    }))
}

/// The degradation without the final clamp (used to check noise statistics).
pub fn degrade_unclamped(x: &Image, cfg: &DegradationConfig) -> Result<Image> {
    cfg.validate()?;
    let f = cfg.downscale_factor;
    let (w, h) = x.dims();
    if w % f != 0 || h % f != 0 {
        return Err(Error::Dimension(format!(
            "{w}x{h} image is not divisible by factor {f}"
        )));
    }
    let blurred = blur(x, &cfg.kernel);
    let mut lr = decimate(&blurred, f)?;
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::Argument(format!("noise sigma: {e}")))?;
        let mut rng = seed::rng(cfg.seed);
        for v in lr.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    if let Some(q) = cfg.compression_quality {
        lr.clamp01();
        lr = dct_quantize(&lr, q);
    }
    Ok(lr)
}

pub fn apply_degradation(x: &Image, cfg: &DegradationConfig) -> Result<Image> {
    Ok(degrade_unclamped(x, cfg)?.clamped())
}

/// Degrade many images; `cfgs[i]` applies to `images[i]`.
pub fn degrade_batch(images: &[Image], cfgs: &[DegradationConfig]) -> Result<Vec<Image>> {
    if images.len() != cfgs.len() {
        return Err(Error::Argument("one degradation config per image is required".into()));
    }
    let pairs: Vec<(&Image, &DegradationConfig)> = images.iter().zip(cfgs).collect();
    par::map(&pairs, |(im, cfg)| apply_degradation(im, cfg))
        .into_iter()
        .collect()
}

/// HR crop → LR → bicubic reference.
pub fn make_image_pair(hr: Image, cfg: &DegradationConfig) -> Result<ImagePair> {
    let lr = apply_degradation(&hr, cfg)?;
    let reference = bicubic_upsample(&lr, cfg.downscale_factor)?;
    Ok(ImagePair { hr, lr, reference })
}

#[inline]
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-coordinate source indices and weights along one axis.
fn cubic_taps(n_in: usize, factor: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_in * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, n_in as isize - 1) as usize;
                wts[k] = cubic(t - (k as f64 - 1.0));
            }
            let s: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= s);
            (idx, wts)
        })
        .collect()
}

/// Keys bicubic (a = −0.5) upscaling with edge clamping.
pub fn bicubic_upsample(lr: &Image, factor: usize) -> Result<Image> {
    if factor < 1 {
        return Err(Error::Argument("upsampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(lr.clone().clamped());
    }
    let (w, h) = lr.dims();
    let tx = cubic_taps(w, factor);
    let ty = cubic_taps(h, factor);
    let ow = w * factor;
    let mut rows = vec![0f64; ow * h * 3];
    for y in 0..h {
        for (ox, (idx, wts)) in tx.iter().enumerate() {
            for c in 0..3 {
                rows[(y * ow + ox) * 3 + c] =
                    (0..4).map(|k| wts[k] * lr.get(idx[k], y, c) as f64).sum();
            }
        }
    }
    let out = Image::from_fn(ow, h * factor, |ox, oy| {
        let (idx, wts) = &ty[oy];
        let mut px = [0f32; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v: f64 = (0..4).map(|k| wts[k] * rows[(idx[k] * ow + ox) * 3 + c]).sum();
            *p = v as f32;
        }
        px
    });
    Ok(out.clamped())
}

const JPEG_LUMA_Q50: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0f64; 64];
    for (o, &b) in t.iter_mut().zip(JPEG_LUMA_Q50.iter()) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0f64; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Quantize 8×8 block-DCT coefficients of each channel with the IJG-scaled
/// luminance table. Partial edge blocks are padded by edge replication.
pub fn dct_quantize(x: &Image, quality: u8) -> Image {
    let (w, h) = x.dims();
    let qt = quant_table(quality);
    let d = dct_basis();
    let mut out = x.clone();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for c in 0..3 {
                let mut blk = [[0f64; 8]; 8];
                for (i, row) in blk.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let sy = (by + i).min(h - 1);
                        let sx = (bx + j).min(w - 1);
                        *v = x.get(sx, sy, c) as f64 * 255.0 - 128.0;
                    }
                }
                // coef = D · blk · Dᵀ
                let mut tmp = [[0f64; 8]; 8];
                for u in 0..8 {
                    for j in 0..8 {
                        tmp[u][j] = (0..8).map(|i| d[u][i] * blk[i][j]).sum();
                    }
                }
                let mut coef = [[0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let cval: f64 = (0..8).map(|j| tmp[u][j] * d[v][j]).sum();
                        let q = qt[u * 8 + v];
                        coef[u][v] = (cval / q).round() * q;
                    }
                }
                // blk = Dᵀ · coef · D
                for i in 0..8 {
                    for v in 0..8 {
                        tmp[i][v] = (0..8).map(|u| d[u][i] * coef[u][v]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        if by + i < h && bx + j < w {
                            let val: f64 = (0..8).map(|v| tmp[i][v] * d[v][j]).sum();
                            out.set(bx + j, by + i, c, ((val + 128.0) / 255.0) as f32);
                        }
                    }
                }
            }
        }
    }
    out
}

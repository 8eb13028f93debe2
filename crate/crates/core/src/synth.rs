//! Procedural four-category ship corpus for desk-scale runs.
//!
//! Categories differ in coarse cues that survive 8× decimation (hull length,
//! colour, silhouette height) and in fine deck texture (window rows, container
//! blocks, pipe rails) that does not.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::CategoryTaxonomy;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

pub const DESK_CATEGORIES: [&str; 4] = ["Containerships", "Passenger Vessels", "Tankers", "Tugs"];

pub fn desk_taxonomy() -> CategoryTaxonomy {
    CategoryTaxonomy::new(DESK_CATEGORIES.iter().map(|s| s.to_string()).collect())
        .expect("static taxonomy is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_category: usize,
    /// Canvas side; the HR crop is taken from its centre.
    pub side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_category: 500,
            side: 72,
            seed: 0,
        }
    }
}

type Rgb = [f32; 3];

struct Canvas {
    img: Image,
}

impl Canvas {
    fn rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, c: Rgb) {
        let (w, h) = self.img.dims();
        for y in y0.max(0)..y1.min(h as i32) {
            for x in x0.max(0)..x1.min(w as i32) {
                for (ch, v) in c.iter().enumerate() {
                    self.img.set(x as usize, y as usize, ch, *v);
                }
            }
        }
    }

    /// Hull: a trapezoid whose bottom edge is inset by `rake` at the bow (left).
    fn hull(&mut self, x0: i32, x1: i32, top: i32, bottom: i32, rake: i32, c: Rgb) {
        let span = (bottom - top).max(1);
        for y in top..bottom {
            let inset = rake * (y - top) / span;
            self.rect(x0 + inset, y, x1 - inset / 2, y + 1, c);
        }
    }
}

fn jitter<R: Rng + ?Sized>(c: Rgb, amount: f32, rng: &mut R) -> Rgb {
    let d: f32 = rng.random_range(-amount..amount);
    c.map(|v| (v + d).clamp(0.0, 1.0))
}

const SYLLABLES: [&str; 12] = [
    "nor", "dic", "sta", "ra", "bel", "ma", "ri", "on", "ve", "ga", "lux", "tor",
];

fn ship_name<R: Rng + ?Sized>(rng: &mut R) -> String {
    let prefix = ["MV", "MS", "SS", "MT"][rng.random_range(0..4)];
    let mut word = String::new();
    for _ in 0..rng.random_range(2..4) {
        word.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
    }
    let mut cs = word.chars();
    let word = match cs.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + cs.as_str(),
        None => word,
    };
    format!("{prefix}_{word}")
}

/// Render one ship of category `k` (index into [`DESK_CATEGORIES`]).
pub fn render_ship<R: Rng + ?Sized>(k: usize, side: usize, rng: &mut R) -> Result<Image> {
    if k >= DESK_CATEGORIES.len() {
        return Err(Error::Index(format!("synthetic category {k} out of range")));
    }
    if side < 48 {
        return Err(Error::Dimension(format!("synthetic canvas side {side} below 48")));
    }
    let s = side as i32;
    let horizon = s / 2 + rng.random_range(2..9);
    let sky_top = jitter([0.52, 0.68, 0.88], 0.05, rng);
    let sky_low = jitter([0.80, 0.86, 0.92], 0.03, rng);
    let sea = jitter([0.12, 0.28, 0.42], 0.04, rng);
    let img = Image::from_fn(side, side, |x, y| {
        let y = y as i32;
        if y < horizon {
            let t = y as f32 / horizon as f32;
            std::array::from_fn(|c| sky_top[c] * (1.0 - t) + sky_low[c] * t)
        } else {
            let wave = 0.012 * ((x as f32 * 0.9 + y as f32 * 2.1).sin());
            sea.map(|v| v + wave)
        }
    });
    let mut cv = Canvas { img };
    let centre = s / 2 + rng.random_range(-6..7);
    let white = jitter([0.93, 0.93, 0.91], 0.03, rng);
    let dark: Rgb = [0.08, 0.08, 0.1];
    match k {
        // Containerships: long dark hull under a tall block of stacked boxes.
        0 => {
            let len = rng.random_range(46..55);
            let (x0, x1) = (centre - len / 2, centre + len / 2);
            let hull_top = horizon - 5;
            cv.hull(x0, x1, hull_top, horizon + 2, 4, jitter([0.14, 0.2, 0.32], 0.04, rng));
            let tiers = rng.random_range(2..4);
            let palette: [Rgb; 4] = [[0.7, 0.22, 0.16], [0.2, 0.38, 0.62], [0.78, 0.56, 0.18], [0.28, 0.55, 0.3]];
            let shift = rng.random_range(0..4);
            let mut bx = x0 + 4;
            let mut col = 0;
            while bx + 4 <= x1 - 10 {
                for t in 0..tiers {
                    let c = palette[(col + t as usize * 3 + shift) % 4];
                    let y = hull_top - 3 * (t + 1);
                    cv.rect(bx, y, bx + 3, y + 2, c);
                    cv.rect(bx + 3, y, bx + 4, y + 3, dark);
                    cv.rect(bx, y + 2, bx + 3, y + 3, dark);
                }
                bx += 4;
                col += 1;
            }
            let bridge_x = x1 - 9;
            cv.rect(bridge_x, hull_top - 3 * tiers - 4, bridge_x + 5, hull_top, white);
            cv.rect(bridge_x, hull_top - 3 * tiers - 2, bridge_x + 5, hull_top - 3 * tiers - 1, dark);
        }
        // Passenger vessels: white hull and stepped decks lined with windows.
        1 => {
            let len = rng.random_range(34..43);
            let (x0, x1) = (centre - len / 2, centre + len / 2);
            let hull_top = horizon - 5;
            cv.hull(x0, x1, hull_top, horizon + 2, 3, white);
            cv.rect(x0 + 2, hull_top + 2, x1 - 1, hull_top + 3, jitter([0.1, 0.2, 0.5], 0.05, rng));
            let decks = rng.random_range(2..4);
            for d in 0..decks {
                let (dx0, dx1) = (x0 + 4 + 3 * d, x1 - 3 - 2 * d);
                let y = hull_top - 3 * (d + 1);
                cv.rect(dx0, y, dx1, y + 3, white);
                let mut wx = dx0 + 1;
                while wx < dx1 - 1 {
                    cv.rect(wx, y + 1, wx + 1, y + 2, dark);
                    wx += 2;
                }
            }
            let fx = centre + rng.random_range(-3..4);
            cv.rect(fx, hull_top - 3 * decks - 3, fx + 3, hull_top - 3 * decks, jitter([0.75, 0.15, 0.12], 0.05, rng));
        }
        // Tankers: long low red hull, pipe rail along the deck, aft superstructure.
        2 => {
            let len = rng.random_range(44..53);
            let (x0, x1) = (centre - len / 2, centre + len / 2);
            let hull_top = horizon - 5;
            cv.hull(x0, x1, hull_top, horizon + 2, 4, jitter([0.5, 0.15, 0.12], 0.05, rng));
            cv.rect(x0 + 1, hull_top - 1, x1 - 8, hull_top, [0.55, 0.55, 0.52]);
            let mut px = x0 + 3;
            while px < x1 - 9 {
                cv.rect(px, hull_top - 2, px + 1, hull_top - 1, [0.85, 0.85, 0.8]);
                px += 3;
            }
            let sx = x1 - 8;
            cv.rect(sx, hull_top - 7, sx + 6, hull_top, white);
            cv.rect(sx + 1, hull_top - 5, sx + 5, hull_top - 4, dark);
            cv.rect(sx + 2, hull_top - 10, sx + 4, hull_top - 7, dark);
        }
        // Tugs: short orange hull, tall wheelhouse and mast.
        _ => {
            let len = rng.random_range(16..23);
            let (x0, x1) = (centre - len / 2, centre + len / 2);
            let hull_top = horizon - 4;
            cv.hull(x0, x1, hull_top, horizon + 2, 3, jitter([0.85, 0.36, 0.1], 0.05, rng));
            cv.rect(x0, hull_top, x1, hull_top + 1, dark);
            let wx = centre - 3 + rng.random_range(-2..3);
            cv.rect(wx, hull_top - 7, wx + 7, hull_top, white);
            cv.rect(wx, hull_top - 5, wx + 7, hull_top - 4, dark);
            cv.rect(wx + 3, hull_top - 12, wx + 4, hull_top - 7, dark);
        }
    }
    Ok(cv.img.clamped())
}

/// One generated sample: category index, ship name and image.
pub struct SynthSample {
    pub category: usize,
    pub name: String,
    pub image: Image,
}

/// Deterministic corpus; sample `i` of category `k` depends only on
/// `(seed, k, i)`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let mut out = Vec::with_capacity(cfg.per_category * DESK_CATEGORIES.len());
    for k in 0..DESK_CATEGORIES.len() {
        for i in 0..cfg.per_category {
            let mut rng = seed::derived_rng(cfg.seed, &format!("synth/{k}/{i}"));
            let name = ship_name(&mut rng);
            let image = render_ship(k, cfg.side, &mut rng)?;
            out.push(SynthSample { category: k, name, image });
        }
    }
    Ok(out)
}

/// Write the corpus as `root/<category>/<name>_<index>.png`.
pub fn write_corpus(cfg: &SynthConfig, root: &Path) -> Result<usize> {
    let samples = generate(cfg)?;
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(DESK_CATEGORIES[s.category]);
        fs::create_dir_all(&dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        s.image.save_png(&dir.join(format!("{}_{:05}.png", s.name, i)))?;
    }
    Ok(samples.len())
}

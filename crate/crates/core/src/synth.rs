//! Procedural dark-field and bright-field cell images.
//!
//! Both domains share the same ellipse morphology but are drawn from
//! independent seeds, so the sets are unpaired.
//!
//! Dark-field images are built from a latent field (bright cell bodies,
//! scattered-light glow around them, sensor noise) that is then tone-mapped
//! by rank onto a fixed intensity profile: non-cell pixels spread evenly over
//! `[0, a]` and cell pixels over a brighter band. This keeps the aggregate
//! histogram free of tall spikes while every image stays a dark-field image.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, ImageF, UnpairedDataset};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Side of the square images; a multiple of 4.
    pub image_size: usize,
    /// Images per domain.
    pub n_images: usize,
    /// Inclusive range of cells per image.
    pub cells_per_image: [usize; 2],
    /// Range of ellipse semi-axes, in pixels.
    pub cell_radius: [f64; 2],
    pub background_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            n_images: 64,
            cells_per_image: [4, 10],
            cell_radius: [10.0, 22.0],
            background_noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A configuration for small images with cell sizes scaled to match.
    pub fn desk(image_size: usize, n_images: usize, seed: u64) -> Self {
        let s = image_size as f64 / 256.0;
        Self {
            image_size,
            n_images,
            cells_per_image: [3, 7],
            cell_radius: [(10.0 * s).max(2.5), (22.0 * s).max(4.0)],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || s % 4 != 0 {
            return Err(Error::Config(format!("image_size must be a multiple of 4 and at least 16, got {s}")));
        }
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be positive".into()));
        }
        let [c0, c1] = self.cells_per_image;
        if c0 == 0 || c0 > c1 {
            return Err(Error::Config(format!("cells_per_image must satisfy 1 <= min <= max, got {c0}..{c1}")));
        }
        let [r0, r1] = self.cell_radius;
        if !(r0.is_finite() && r1.is_finite() && r0 >= 1.0 && r0 <= r1 && r1 <= s as f64 / 4.0) {
            return Err(Error::Config(format!(
                "cell_radius must satisfy 1 <= min <= max <= image_size/4, got {r0}..{r1}"
            )));
        }
        let sigma = self.background_noise_sigma;
        if !(sigma.is_finite() && (0.0..=0.2).contains(&sigma)) {
            return Err(Error::Config(format!("background_noise_sigma must be in [0, 0.2], got {sigma}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    pub fn rho(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Approximate distance in pixels outside the boundary (0 inside).
    pub fn outside_distance(&self, y: f64, x: f64) -> f64 {
        (self.rho(y, x) - 1.0).max(0.0) * self.rx.min(self.ry)
    }
}

/// A generated image with the masks used to measure it.
#[derive(Clone, Debug)]
pub struct SynthSample<T> {
    pub image: ImageF<T>,
    pub cells: Vec<Ellipse>,
    /// Pixels inside a cell body.
    pub cell_mask: Vec<bool>,
    /// Pixels clear of every cell and its surroundings.
    pub background_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Dark,
    Bright,
}

impl Domain {
    fn salt(self) -> u64 {
        match self {
            Domain::Dark => 0xd4a2_c0de_0000_0001,
            Domain::Bright => 0xb215_c0de_0000_0002,
        }
    }
}

/// Seed of image `index` in `domain`.
pub fn image_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ domain.salt() ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn place_cells(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let s = cfg.image_size as f64;
    let [c0, c1] = cfg.cells_per_image;
    let [r0, r1] = cfg.cell_radius;
    let n = rng.random_range(c0..=c1);
    let mut cells: Vec<Ellipse> = Vec::with_capacity(n);
    let mut attempts = 0;
    while cells.len() < n && attempts < 200 * n {
        attempts += 1;
        let r = rng.random_range(r0..=r1);
        let ecc = rng.random_range(0.6..=1.0);
        let e = Ellipse {
            cy: rng.random_range(r..=s - r),
            cx: rng.random_range(r..=s - r),
            ry: r,
            rx: (r * ecc).max(1.0),
            theta: rng.random_range(0.0..PI),
        };
        // keep cells apart so each keeps its own outline
        let clear = cells.iter().all(|o| {
            let d = ((o.cy - e.cy).powi(2) + (o.cx - e.cx).powi(2)).sqrt();
            d > 1.1 * (o.ry + e.ry)
        });
        if clear {
            cells.push(e);
        }
    }
    cells
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Maps the pixels `idx` onto `[lo, hi]` by the rank of `latent`.
fn rank_map(latent: &[f64], idx: &mut [usize], lo: f64, hi: f64, out: &mut [f64]) {
    idx.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));
    let n = idx.len() as f64;
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = lo + (hi - lo) * (rank as f64 + 0.5) / n;
    }
}

const DARK_MEAN_CAP: f64 = 0.14;
const BACKGROUND_GLOW: f64 = 0.1;

fn dark_sample<T: Scalar>(cfg: &SynthConfig, index: usize) -> SynthSample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, Domain::Dark, index));
    let size = cfg.image_size;
    let cells = place_cells(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.background_noise_sigma.max(1e-4)).expect("valid sigma");
    let glints: Vec<(f64, f64)> = cells.iter().map(|_| (rng.random_range(0.0..PI), rng.random_range(0.1..0.3))).collect();

    let n = size * size;
    let mut body = vec![f64::NAN; n];
    let mut dist = vec![f64::INFINITY; n];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * size + x;
            for (e, &(phase, amp)) in cells.iter().zip(&glints) {
                let rho = e.rho(fy, fx);
                if rho < 1.0 {
                    // scattering is strongest at the membrane
                    let ang = (fy - e.cy).atan2(fx - e.cx);
                    let b = 1.0 + 0.6 * rho * rho + amp * (3.0 * ang + phase).sin();
                    body[i] = if body[i].is_nan() { b } else { body[i].max(b) };
                } else {
                    dist[i] = dist[i].min(e.outside_distance(fy, fx));
                }
            }
        }
    }
    let cell_mask: Vec<bool> = body.iter().map(|b| !b.is_nan()).collect();

    // glow fades to the background level at a fixed quantile of the
    // distance to the nearest cell, so the clear background is a similar
    // share of every image
    let mut outside: Vec<f64> = dist.iter().zip(&cell_mask).filter(|(_, &c)| !c).map(|(&d, _)| d).collect();
    outside.sort_by(f64::total_cmp);
    let q = rng.random_range(0.68..0.74);
    let reach = outside.get((q * outside.len() as f64) as usize).copied().unwrap_or(1.0).max(1.0);
    let halo = reach / (1.0 / BACKGROUND_GLOW).ln();

    let mut latent = vec![0.0; n];
    let mut background_mask = vec![false; n];
    for i in 0..n {
        let v = if cell_mask[i] {
            body[i]
        } else {
            let glow = (-dist[i] / halo).exp();
            background_mask[i] = glow < BACKGROUND_GLOW;
            glow
        };
        latent[i] = v + noise.sample(&mut rng);
    }

    let cell_frac = cell_mask.iter().filter(|&&m| m).count() as f64 / n as f64;
    let cell_lo = rng.random_range(0.27..0.31);
    let cell_hi = rng.random_range(0.5..0.62);
    let cell_mean = (cell_lo + cell_hi) / 2.0;
    let mut top: f64 = rng.random_range(0.2..0.25);
    // cap the image mean: (1 - f) * top / 2 + f * cell_mean
    let cap = 2.0 * (DARK_MEAN_CAP - cell_frac * cell_mean) / (1.0 - cell_frac).max(1e-9);
    top = top.min(cap).max(0.02);

    let mut values = vec![0.0; n];
    let (mut inner, mut outer): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| cell_mask[i]);
    if !inner.is_empty() {
        rank_map(&latent, &mut inner, cell_lo, cell_hi, &mut values);
    }
    rank_map(&latent, &mut outer, 0.0, top, &mut values);

    let data: Vec<T> = (0..3).flat_map(|_| values.iter().map(|&v| T::lit(v))).collect();
    SynthSample {
        image: ImageF::from_clamped(size, size, 3, data).expect("valid size"),
        cells,
        cell_mask,
        background_mask,
    }
}

/// H&E-like color for stain density `t` in `[0, 1]` over a background of level `w`.
fn stain_color(t: f64, w: f64, pink: [f64; 3], purple: [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = if t < 0.5 {
            let u = t * 2.0;
            (1.0 - u) * w + u * pink[k]
        } else {
            let u = (t - 0.5) * 2.0;
            (1.0 - u) * pink[k] + u * purple[k]
        };
    }
    c
}

fn bright_sample<T: Scalar>(cfg: &SynthConfig, index: usize) -> SynthSample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, Domain::Bright, index));
    let size = cfg.image_size;
    let cells = place_cells(cfg, &mut rng);
    let w = rng.random_range(0.86..0.94);
    let tone = rng.random_range(-0.03..0.03);
    let pink = [0.92, 0.60 + tone, 0.79];
    let purple = [0.45 + tone, 0.22, 0.60];
    let nuclei: Vec<(Ellipse, f64)> = cells
        .iter()
        .map(|e| {
            let k = rng.random_range(0.35..0.55);
            let off = rng.random_range(0.0..0.3);
            let a = rng.random_range(0.0..2.0 * PI);
            let n = Ellipse {
                cy: e.cy + off * e.ry * a.sin() * 0.5,
                cx: e.cx + off * e.rx * a.cos() * 0.5,
                ry: (e.ry * k).max(1.0),
                rx: (e.rx * k).max(1.0),
                theta: e.theta,
            };
            (n, rng.random_range(0.4..0.5))
        })
        .collect();
    let sigma = cfg.background_noise_sigma;
    let noise = Normal::new(0.0, sigma.max(1e-6)).expect("valid sigma");
    let bound = 2.5 * sigma;

    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    let mut cell_mask = vec![false; n];
    let mut background_mask = vec![false; n];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * size + x;
            let mut t: f64 = 0.0;
            let mut near = false;
            for (e, (nuc, cyto)) in cells.iter().zip(&nuclei) {
                let rho = e.rho(fy, fx);
                near |= rho < 1.3;
                if rho < 1.0 {
                    cell_mask[i] = true;
                    let edge = 1.0 - smoothstep(0.8, 1.0, rho);
                    let mut v = (0.1 + 0.9 * edge) * cyto;
                    let nr = nuc.rho(fy, fx);
                    v = v.max(0.5 + 0.45 * (1.0 - smoothstep(0.7, 1.0, nr)) * (1.0 - 0.3 * nr * nr) * (nr < 1.0) as u8 as f64);
                    t = t.max(v);
                }
            }
            background_mask[i] = !near;
            let c = stain_color(t, w, pink, purple);
            let g = 1.0 + noise.sample(&mut rng).clamp(-bound, bound);
            for k in 0..3 {
                data[k * n + i] = c[k] * g;
            }
        }
    }
    SynthSample {
        image: ImageF::from_clamped(size, size, 3, data.into_iter().map(T::lit).collect()).expect("valid size"),
        cells,
        cell_mask,
        background_mask,
    }
}

/// Dark-field images with their masks.
pub fn dark_samples<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<SynthSample<T>>> {
    cfg.validate()?;
    Ok((0..cfg.n_images).into_par_iter().map(|i| dark_sample(cfg, i)).collect())
}

/// Bright-field images with their masks.
pub fn bright_samples<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<SynthSample<T>>> {
    cfg.validate()?;
    Ok((0..cfg.n_images).into_par_iter().map(|i| bright_sample(cfg, i)).collect())
}

/// Bright cells on a near-black background, stored as three equal channels.
pub fn gen_dark_field<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<ImageF<T>>> {
    Ok(dark_samples(cfg)?.into_iter().map(|s| s.image).collect())
}

/// Pink and purple cells with dark nuclei on a near-white background.
pub fn gen_bright_field<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<ImageF<T>>> {
    Ok(bright_samples(cfg)?.into_iter().map(|s| s.image).collect())
}

/// Writes `dark/` and `bright/` PNG sets plus `manifest.txt` under `out`.
pub fn write_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<UnpairedDataset> {
    let out = out.as_ref();
    let mut paths = Vec::new();
    for (name, images) in [
        ("dark", gen_dark_field::<f32>(cfg)?),
        ("bright", gen_bright_field::<f32>(cfg)?),
    ] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files: Vec<_> = (0..images.len()).map(|i| dir.join(format!("{name}_{i:04}.png"))).collect();
        images
            .par_iter()
            .zip(&files)
            .try_for_each(|(img, path)| save_image(img, path))?;
        paths.push(files);
    }
    let bright = paths.pop().expect("two domains");
    let dark = paths.pop().expect("two domains");
    let ds = UnpairedDataset::new(dark, bright)?;
    ds.write_manifest(out.join("manifest.txt"))?;
    Ok(ds)
}

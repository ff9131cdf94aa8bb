//! Natural-scene-statistics quality score: MSCN coefficients, GGD/AGGD
//! fits per patch, and a Mahalanobis-type distance between Gaussian fits.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::features::mean_cov;
use crate::error::{Error, Result};
use crate::image::{to_luma, ImageF};
use crate::networks::Checkpoint;
use crate::nn::{Shape, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_PATCH_SIZE: usize = 96;
pub const NIQE_FEATURES: usize = 36;
const VARIANCE_FLOOR: f64 = 1.0 / (255.0 * 255.0);

/// Row-major single-channel f64 plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_image<T: Scalar>(img: &ImageF<T>) -> Self {
        let l = if img.channels() == 1 { img.cast::<f64>() } else { to_luma(img).cast::<f64>() };
        Self {
            h: l.height(),
            w: l.width(),
            data: l.data().to_vec(),
        }
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// 2x2 box average.
    pub fn half(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                data.push(0.25 * (self.data[i] + self.data[i + 1] + self.data[i + self.w] + self.data[i + self.w + 1]));
            }
        }
        Self { h, w, data }
    }
}

fn gaussian_window() -> [f64; 7] {
    let sigma = 7.0 / 6.0;
    let mut k = [0.0; 7];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 3.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn blur(p: &Plane) -> Plane {
    let k = gaussian_window();
    let mut tmp = Plane { data: vec![0.0; p.data.len()], ..*p };
    for y in 0..p.h {
        for x in 0..p.w {
            tmp.data[y * p.w + x] = (0..7).map(|i| k[i] * p.at(y as isize, x as isize + i as isize - 3)).sum();
        }
    }
    let mut out = Plane { data: vec![0.0; p.data.len()], ..*p };
    for y in 0..p.h {
        for x in 0..p.w {
            out.data[y * p.w + x] = (0..7).map(|i| k[i] * tmp.at(y as isize + i as isize - 3, x as isize)).sum();
        }
    }
    out
}

/// `(I - mu) / sqrt(max(sigma^2, 1/255^2))` with a 7x7 Gaussian window
/// (sigma 7/6) and replicated borders.
pub fn mscn(p: &Plane) -> Plane {
    let mu = blur(p);
    let sq = Plane {
        data: p.data.iter().map(|v| v * v).collect(),
        ..*p
    };
    let mu_sq = blur(&sq);
    let data = p
        .data
        .iter()
        .zip(&mu.data)
        .zip(&mu_sq.data)
        .map(|((&v, &m), &m2)| (v - m) / (m2 - m * m).max(VARIANCE_FLOOR).sqrt())
        .collect();
    Plane { data, ..*p }
}

const ALPHA_MIN: f64 = 0.2;
const ALPHA_STEP: f64 = 0.001;
const ALPHA_COUNT: usize = 9801;

fn alpha_grid() -> &'static (Vec<f64>, Vec<f64>) {
    static GRID: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GRID.get_or_init(|| {
        let alphas: Vec<f64> = (0..ALPHA_COUNT).map(|i| ALPHA_MIN + i as f64 * ALPHA_STEP).collect();
        // Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a))
        let ratios = alphas
            .iter()
            .map(|&a| (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp())
            .collect();
        (alphas, ratios)
    })
}

fn nearest_alpha(target: f64) -> f64 {
    let (alphas, ratios) = alpha_grid();
    let mut best = (f64::INFINITY, alphas[ALPHA_COUNT - 1]);
    for (&a, &r) in alphas.iter().zip(ratios) {
        let d = (r - target).abs();
        if d < best.0 {
            best = (d, a);
        }
    }
    best.1
}

/// Moment-matching GGD fit: (shape, variance).
pub fn ggd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let e_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var < 1e-12 {
        return (ALPHA_MIN + (ALPHA_COUNT - 1) as f64 * ALPHA_STEP, 0.0);
    }
    (nearest_alpha(e_abs * e_abs / var), var)
}

/// Moment-matching AGGD fit: (shape, mean, left variance, right variance).
pub fn aggd_fit(x: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let n = x.len() as f64;
    let second = x.iter().map(|v| v * v).sum::<f64>() / n;
    if second < 1e-12 {
        return [ALPHA_MIN + (ALPHA_COUNT - 1) as f64 * ALPHA_STEP, 0.0, 0.0, 0.0];
    }
    let lstd = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let rstd = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let gamma = lstd.max(1e-6) / rstd.max(1e-6);
    let e_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let r = e_abs * e_abs / second;
    let rnorm = r * (gamma.powi(3) + 1.0) * (gamma + 1.0) / (gamma * gamma + 1.0).powi(2);
    let a = nearest_alpha(rnorm);
    let g1 = ln_gamma(1.0 / a);
    let g2 = ln_gamma(2.0 / a);
    let g3 = ln_gamma(3.0 / a);
    let scale = ((g1 - g3) * 0.5).exp();
    let (bl, br) = (lstd * scale, rstd * scale);
    let mean = (br - bl) * (g2 - g1).exp();
    [a, mean, lstd * lstd, rstd * rstd]
}

/// 18 features of one MSCN patch.
fn patch_features(m: &Plane, y0: usize, x0: usize, size: usize, out: &mut Vec<f64>) {
    let mut vals = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        vals.extend_from_slice(&m.data[y * m.w + x0..y * m.w + x0 + size]);
    }
    let (a, var) = ggd_fit(&vals);
    out.push(a);
    out.push(var);
    // horizontal, vertical, main diagonal, anti-diagonal neighbours
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prods = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < y0 as isize || ny >= (y0 + size) as isize || nx < x0 as isize || nx >= (x0 + size) as isize {
                    continue;
                }
                prods.push(m.data[y * m.w + x] * m.data[ny as usize * m.w + nx as usize]);
            }
        }
        out.extend_from_slice(&aggd_fit(&prods));
    }
}

/// One 36-feature row per non-overlapping `patch_size` patch, from the
/// image and its half-resolution copy.
pub fn niqe_patch_features<T: Scalar>(img: &ImageF<T>, patch_size: usize) -> Result<Vec<Vec<f64>>> {
    if patch_size < 8 || patch_size % 2 != 0 {
        return Err(Error::Config(format!("NIQE patch size must be even and >= 8, got {patch_size}")));
    }
    if img.height() < patch_size || img.width() < patch_size {
        return Err(Error::Geometry(format!(
            "NIQE needs at least {patch_size}x{patch_size}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let full = Plane::from_image(img);
    let m1 = mscn(&full);
    let m2 = mscn(&full.half());
    let (ny, nx) = (full.h / patch_size, full.w / patch_size);
    let half = patch_size / 2;
    let mut rows = Vec::with_capacity(ny * nx);
    for py in 0..ny {
        for px in 0..nx {
            let mut f = Vec::with_capacity(NIQE_FEATURES);
            patch_features(&m1, py * patch_size, px * patch_size, patch_size, &mut f);
            patch_features(&m2, py * half, px * half, half, &mut f);
            rows.push(f);
        }
    }
    Ok(rows)
}

/// Multivariate Gaussian fit of pristine patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct NiqeModel {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub patch_size: usize,
}

impl NiqeModel {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, patch_size: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::ShapeMismatch(format!("covariance {:?} for mean of length {d}", covariance.shape())));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("NIQE model".into()));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        Ok(Self {
            mean,
            covariance,
            patch_size,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f64> {
        let d = self.mean.len();
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "niqe-model");
        ck.set_meta("patch_size", self.patch_size);
        ck.insert_tensor("mean", Tensor::from_vec(Shape::new(1, 1, 1, d), self.mean.iter().copied().collect()).expect("length"));
        // row-major
        let cov: Vec<f64> = self.covariance.transpose().iter().copied().collect();
        ck.insert_tensor("covariance", Tensor::from_vec(Shape::new(1, 1, d, d), cov).expect("length"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<f64>) -> Result<Self> {
        if ck.meta("kind") != Some("niqe-model") {
            return Err(Error::Config("checkpoint is not a NIQE model".into()));
        }
        let patch_size = ck
            .require_meta("patch_size")?
            .parse()
            .map_err(|_| Error::Config("bad NIQE patch_size".into()))?;
        let mean = ck.tensor("mean").ok_or_else(|| Error::Missing("NIQE mean".into()))?;
        let cov = ck.tensor("covariance").ok_or_else(|| Error::Missing("NIQE covariance".into()))?;
        let d = mean.numel();
        if cov.numel() != d * d {
            return Err(Error::ShapeMismatch("NIQE covariance size".into()));
        }
        Self::new(
            DVector::from_column_slice(mean.data()),
            DMatrix::from_row_slice(d, d, cov.data()),
            patch_size,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// Fits the pristine model on all patches of `images`.
pub fn fit_niqe<T: Scalar>(images: &[ImageF<T>], patch_size: usize) -> Result<NiqeModel> {
    let mut rows = Vec::new();
    for img in images {
        rows.extend(niqe_patch_features(img, patch_size)?);
    }
    if rows.len() < 2 {
        return Err(Error::Empty(format!("NIQE fit needs at least 2 patches, got {}", rows.len())));
    }
    let (mu, cov) = mean_cov(&rows_to_matrix(&rows));
    NiqeModel::new(mu, cov, patch_size)
}

/// `sqrt(d^T ((S + S_m)/2)^+ d)` between the image's patch fit and the model.
pub fn niqe<T: Scalar>(img: &ImageF<T>, model: &NiqeModel) -> Result<f64> {
    let rows = niqe_patch_features(img, model.patch_size)?;
    if rows[0].len() != model.mean.len() {
        return Err(Error::ShapeMismatch(format!("model has {} features", model.mean.len())));
    }
    let x = rows_to_matrix(&rows);
    let (mu, cov) = if rows.len() > 1 {
        mean_cov(&x)
    } else {
        (x.row(0).transpose(), DMatrix::zeros(x.ncols(), x.ncols()))
    };
    let d = &mu - &model.mean;
    let s = (cov + &model.covariance) * 0.5;
    let eps = 1e-10 * s.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let pinv = s.pseudo_inverse(eps).map_err(|e| Error::Numerical(e.to_string()))?;
    let q = (d.transpose() * pinv * &d)[(0, 0)];
    if !q.is_finite() {
        return Err(Error::NonFinite("NIQE distance".into()));
    }
    Ok(q.max(0.0).sqrt())
}

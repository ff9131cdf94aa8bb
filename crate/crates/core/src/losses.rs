//! Distillation, content-consistency, adversarial and perceptual losses.
//!
//! Every term comes in two forms: a plain function on images returning an
//! `f64`, and a graph builder on a [`Tape`] used for training.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{luma, GrayImage, ImageF};
use crate::networks::{DiscriminatorPair, Network, PerceptualEmbedder};
use crate::nn::{Bound, PatchCoord, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the distillation term.
    pub lambda1: f64,
    /// Weight of the content term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv: f64,
    pub kd: f64,
    pub con: f64,
    pub total: f64,
    pub con_perceptual: Option<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv, self.kd, self.con, self.total].iter().all(|v| v.is_finite())
            && self.con_perceptual.is_none_or(f64::is_finite)
    }
}

fn mean_abs<T: Scalar>(a: impl Iterator<Item = T>, b: impl Iterator<Item = T>, n: usize) -> f64 {
    let sum: f64 = a.zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    sum / n as f64
}

/// Mean absolute difference between two color images.
pub fn kd_loss<T: Scalar>(y: &ImageF<T>, y_t: &ImageF<T>) -> Result<f64> {
    if !y.same_shape(y_t) || y.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "kd_loss needs equal 3-channel images, got {}x{}x{} and {}x{}x{}",
            y.channels(),
            y.height(),
            y.width(),
            y_t.channels(),
            y_t.height(),
            y_t.width()
        )));
    }
    Ok(mean_abs(y.data().iter().copied(), y_t.data().iter().copied(), y.data().len()))
}

/// Mean absolute difference between `z` and the luma of `y`.
pub fn content_loss<T: Scalar>(z: &GrayImage<T>, y: &ImageF<T>) -> Result<f64> {
    if y.channels() != 3 || !z.same_size(y) {
        return Err(Error::ShapeMismatch(format!(
            "content_loss needs a gray and a color image of one size, got {}x{} and {}x{}x{}",
            z.height(),
            z.width(),
            y.channels(),
            y.height(),
            y.width()
        )));
    }
    let (r, g, b) = (y.channel(0), y.channel(1), y.channel(2));
    let lum = (0..z.pixel_count()).map(|i| luma(r[i], g[i], b[i]));
    Ok(mean_abs(z.data().iter().copied(), lum, z.pixel_count()))
}

/// `adv + lambda1 * kd + lambda2 * con`.
pub fn total_loss(adv: f64, kd: f64, con: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("adv", adv), ("kd", kd), ("con", con), ("lambda1", w.lambda1), ("lambda2", w.lambda2)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(adv + w.lambda1 * kd + w.lambda2 * con)
}

/// Crop positions for the local critic: one set for real, one for fake images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub real: Vec<PatchCoord>,
    pub fake: Vec<PatchCoord>,
}

impl CropPlan {
    pub fn sample<T: Scalar>(
        d: &DiscriminatorPair<T>,
        n_real: usize,
        n_fake: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            real: d.sample_crops(n_real, height, width, seed)?,
            fake: d.sample_crops(n_fake, height, width, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        })
    }
}

struct CriticScores {
    global_real: Var,
    global_fake: Var,
    local_real: Var,
    local_fake: Var,
}

fn critic_scores<T: Scalar>(
    t: &mut Tape<'_, T>,
    d: &DiscriminatorPair<T>,
    p: &Bound,
    real: Var,
    fake: Var,
    crops: &CropPlan,
) -> Result<CriticScores> {
    let (sr, sf) = (t.shape(real), t.shape(fake));
    if sr.n == 0 || sf.n == 0 {
        return Err(Error::Empty("adversarial loss on an empty batch".into()));
    }
    Ok(CriticScores {
        global_real: d.forward_global(t, p, real)?,
        global_fake: d.forward_global(t, p, fake)?,
        local_real: d.forward_local(t, p, real, &crops.real)?,
        local_fake: d.forward_local(t, p, fake, &crops.fake)?,
    })
}

/// Generator-side adversarial objective.
///
/// Global critic, relativistic least squares:
/// `(mean((Dr - mean Df)^2) + mean((Df - mean Dr - 1)^2)) / 2`.
/// Local critic, plain least squares: `mean((Dl(fake) - 1)^2)`.
pub fn generator_adv_term<T: Scalar>(
    t: &mut Tape<'_, T>,
    d: &DiscriminatorPair<T>,
    p: &Bound,
    real: Var,
    fake: Var,
    crops: &CropPlan,
) -> Result<Var> {
    let s = critic_scores(t, d, p, real, fake, crops)?;
    let rf = t.sub_mean(s.global_real, s.global_fake);
    let fr = t.sub_mean(s.global_fake, s.global_real);
    let a = t.mean_square_to(rf, 0.0);
    let b = t.mean_square_to(fr, 1.0);
    let local = t.mean_square_to(s.local_fake, 1.0);
    t.weighted_sum(&[(a, 0.5), (b, 0.5), (local, 1.0)])
}

/// Critic-side adversarial objective, the mirror of [`generator_adv_term`]
/// with real and fake targets swapped; the local part is
/// `(mean((Dl(real) - 1)^2) + mean(Dl(fake)^2)) / 2`.
pub fn critic_adv_term<T: Scalar>(
    t: &mut Tape<'_, T>,
    d: &DiscriminatorPair<T>,
    p: &Bound,
    real: Var,
    fake: Var,
    crops: &CropPlan,
) -> Result<Var> {
    let s = critic_scores(t, d, p, real, fake, crops)?;
    let rf = t.sub_mean(s.global_real, s.global_fake);
    let fr = t.sub_mean(s.global_fake, s.global_real);
    let a = t.mean_square_to(rf, 1.0);
    let b = t.mean_square_to(fr, 0.0);
    let lr = t.mean_square_to(s.local_real, 1.0);
    let lf = t.mean_square_to(s.local_fake, 0.0);
    t.weighted_sum(&[(a, 0.5), (b, 0.5), (lr, 0.5), (lf, 0.5)])
}

/// Generator and critic adversarial losses for image batches.
pub fn adv_losses<T: Scalar>(
    d: &DiscriminatorPair<T>,
    real: &[ImageF<T>],
    fake: &[ImageF<T>],
    crop_seed: u64,
) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Empty("adversarial loss on an empty batch".into()));
    }
    let real = Tensor::from_images(real)?;
    let fake = Tensor::from_images(fake)?;
    let (sr, sf) = (real.shape(), fake.shape());
    if (sr.h, sr.w) != (sf.h, sf.w) {
        return Err(Error::ShapeMismatch(format!("real {sr} vs fake {sf}")));
    }
    let crops = CropPlan::sample(d, sr.n, sf.n, sr.h, sr.w, crop_seed)?;
    let mut t = Tape::new();
    let p = d.params().bind_frozen(&mut t);
    let rv = t.constant(real);
    let fv = t.constant(fake);
    let g = generator_adv_term(&mut t, d, &p, rv, fv, &crops)?;
    let dd = critic_adv_term(&mut t, d, &p, rv, fv, &crops)?;
    let (g, dd) = (t.value(g).item().as_f64(), t.value(dd).item().as_f64());
    if !(g.is_finite() && dd.is_finite()) {
        return Err(Error::NonFinite(format!("adversarial losses g={g} d={dd}")));
    }
    Ok((g, dd))
}

/// Distillation term on the tape.
pub fn kd_term<T: Scalar>(t: &mut Tape<'_, T>, y: Var, y_t: Var) -> Result<Var> {
    t.mean_abs_diff(y, y_t)
}

/// Content term on the tape; `z` is `N x 1`, `y` is `N x 3`.
pub fn content_term<T: Scalar>(t: &mut Tape<'_, T>, z: Var, y: Var) -> Result<Var> {
    let g = t.luma(y)?;
    t.mean_abs_diff(z, g)
}

/// Perceptual content term: L1 between embeddings of `z` and the luma of `y`.
pub fn perceptual_term<T: Scalar>(
    t: &mut Tape<'_, T>,
    phi: &PerceptualEmbedder<T>,
    p: &Bound,
    z: Var,
    y: Var,
) -> Result<Var> {
    let g = t.luma(y)?;
    let fz = phi.forward(t, p, z)?;
    let fg = phi.forward(t, p, g)?;
    t.mean_abs_diff(fz, fg)
}

/// Mean absolute difference between perceptual features of `z` and the luma of `y`.
pub fn perceptual_content_loss<T: Scalar>(phi: &PerceptualEmbedder<T>, z: &GrayImage<T>, y: &ImageF<T>) -> Result<f64> {
    if y.channels() != 3 || !z.same_size(y) {
        return Err(Error::ShapeMismatch("perceptual_content_loss needs gray z and color y of one size".into()));
    }
    let fz = phi.embed(z)?;
    let fy = phi.embed(&crate::image::to_luma(y))?;
    Ok(mean_abs(fz.data().iter().copied(), fy.data().iter().copied(), fz.numel()))
}

/// Append-only `step,adv,kd,con,total` log.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    pub const HEADER: &'static str = "step,adv,kd,con,total";

    /// Creates (truncating) a new log with a header.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(Self { out })
    }

    /// Opens an existing log for appending, keeping only rows before `step`.
    pub fn resume(path: impl AsRef<Path>, step: u64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kept = String::new();
        for (i, line) in text.lines().enumerate() {
            if i > 0 {
                let s: u64 = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad row {line:?}")))?;
                if s >= step {
                    break;
                }
            }
            kept.push_str(line);
            kept.push('\n');
        }
        std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn append(&mut self, step: u64, r: &LossReport) -> Result<()> {
        writeln!(self.out, "{step},{:?},{:?},{:?},{:?}", r.adv, r.kd, r.con, r.total)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("loss log", e))
    }
}

/// Parses a loss log back into `(step, report)` rows.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(u64, LossReport)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LossLog::HEADER) {
        return Err(Error::format(path, "missing loss log header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad row {line:?}")))
            };
            let step = f
                .first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad row {line:?}")))?;
            Ok((
                step,
                LossReport {
                    adv: num(1)?,
                    kd: num(2)?,
                    con: num(3)?,
                    total: num(4)?,
                    con_perceptual: None,
                },
            ))
        })
        .collect()
}

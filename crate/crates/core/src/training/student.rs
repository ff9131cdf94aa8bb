use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::artifacts::{ensure_dir, flip, save_grid, write_json};
use super::config::{lr_schedule, Objective, TrainConfig, UpdateOrder};
use super::mix_seed;
use super::teacher::batch_indices;
use crate::enhance::{enhance, LutMapping};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::losses::{
    content_term, critic_adv_term, generator_adv_term, kd_term, perceptual_term, CropPlan, LossLog, LossReport,
};
use crate::networks::{
    Checkpoint, DiscriminatorPair, Generator, GeneratorConfig, Network, PerceptualEmbedder, Teacher,
};
use crate::nn::{Adam, Bound, Tape, Tensor, Var};
use crate::scalar::Scalar;

const STREAM_PERM: u64 = 11;
const STREAM_REAL: u64 = 12;
const STREAM_CROP: u64 = 13;
const STREAM_FLIP: u64 = 14;
const STREAM_G_INIT: u64 = 15;
const STREAM_D_INIT: u64 = 16;

/// Graph nodes of the generator objective.
pub struct ObjectiveVars {
    pub adv: Var,
    pub kd: Var,
    pub con: Var,
    pub perceptual: Option<Var>,
    pub total: Var,
}

/// Records the generator objective for output `y` of input `z`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Scalar>(
    t: &mut Tape<'_, T>,
    y: Var,
    z: Var,
    y_t: Var,
    real: Var,
    critics: (&DiscriminatorPair<T>, &Bound),
    embedder: Option<(&PerceptualEmbedder<T>, &Bound)>,
    objective: &Objective,
    crops: &CropPlan,
) -> Result<ObjectiveVars> {
    let adv = generator_adv_term(t, critics.0, critics.1, real, y, crops)?;
    let kd = kd_term(t, y, y_t)?;
    let con = content_term(t, z, y)?;
    let mut terms = vec![(adv, 1.0), (kd, objective.kd), (con, objective.con)];
    let perceptual = if objective.perceptual > 0.0 {
        let (phi, p) = embedder.ok_or_else(|| Error::Missing("perceptual embedder".into()))?;
        let v = perceptual_term(t, phi, p, z, y)?;
        terms.push((v, objective.perceptual));
        Some(v)
    } else {
        None
    };
    let total = t.weighted_sum(&terms)?;
    Ok(ObjectiveVars {
        adv,
        kd,
        con,
        perceptual,
        total,
    })
}

fn report_of<T: Scalar>(t: &Tape<'_, T>, v: &ObjectiveVars) -> LossReport {
    let get = |x: Var| t.value(x).item().as_f64();
    LossReport {
        adv: get(v.adv),
        kd: get(v.kd),
        con: get(v.con),
        total: get(v.total),
        con_perceptual: v.perceptual.map(get),
    }
}

fn stack<T: Scalar>(images: &[ImageF<T>], idx: &[usize], flips: &[(bool, bool)]) -> Result<Tensor<T>> {
    let picked: Vec<ImageF<T>> = idx
        .iter()
        .zip(flips)
        .map(|(&i, &(h, v))| flip(&images[i], h, v))
        .collect();
    Tensor::from_images(&picked)
}

/// Teacher colorizations of a batch of images, computed in chunks.
pub fn teacher_outputs<T: Scalar>(teacher: &Teacher<T>, z: &[ImageF<T>]) -> Result<Vec<ImageF<T>>> {
    let mut out = Vec::with_capacity(z.len());
    for chunk in z.chunks(8) {
        out.extend(teacher.infer(&Tensor::from_images(chunk)?)?.to_images()?);
    }
    Ok(out)
}

/// Mean distillation loss of `generator` against `teacher` on enhanced inputs `z`.
pub fn mean_kd<T: Scalar>(generator: &Generator<T>, teacher: &Teacher<T>, z: &[ImageF<T>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in z.chunks(8) {
        let x = Tensor::from_images(chunk)?;
        let y = generator.infer(&x)?;
        let yt = teacher.infer(&x)?;
        sum += y.data().iter().zip(yt.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>();
        n += y.numel();
    }
    Ok(sum / n as f64)
}

fn lut_digest(lut: &LutMapping) -> String {
    hex::encode(Sha256::digest(lut.to_text().as_bytes()))
}

/// Alternating critic/generator training of the student.
pub struct StudentTrainer<'a, T: Scalar> {
    cfg: TrainConfig,
    objective: Objective,
    generator: Generator<T>,
    critics: DiscriminatorPair<T>,
    g_opt: Adam<T>,
    d_opt: Adam<T>,
    embedder: Option<PerceptualEmbedder<T>>,
    z: Vec<ImageF<T>>,
    y_t: Vec<ImageF<T>>,
    bright: &'a [ImageF<T>],
    step: u64,
    steps_per_epoch: usize,
    total_steps: u64,
    teacher_checksum: String,
    lut_digest: String,
}

/// Values produced by one training step.
pub struct StepOutput<T> {
    pub report: LossReport,
    pub critic_loss: f64,
    /// Sample-grid tiles (`z | y_t | y | real` per row) when due.
    pub grid: Option<Vec<ImageF<T>>>,
}

impl<'a, T: Scalar> StudentTrainer<'a, T> {
    /// Enhances the dark set with `lut`, runs the frozen teacher once on the
    /// results, and initializes student and critics from `cfg.seed`.
    pub fn new(
        dark: &[ImageF<T>],
        bright: &'a [ImageF<T>],
        teacher: &Teacher<T>,
        lut: &LutMapping,
        cfg: &TrainConfig,
        embedder: Option<PerceptualEmbedder<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if dark.is_empty() {
            return Err(Error::Empty("dark-field set".into()));
        }
        if bright.is_empty() {
            return Err(Error::Empty("bright-field set".into()));
        }
        let (h, w) = (dark[0].height(), dark[0].width());
        if let Some(bad) = dark.iter().chain(bright).find(|i| i.height() != h || i.width() != w) {
            return Err(Error::ShapeMismatch(format!(
                "training images must share one size: {h}x{w} vs {}x{}",
                bad.height(),
                bad.width()
            )));
        }
        if bright.iter().any(|b| b.channels() != 3) {
            return Err(Error::ShapeMismatch("bright-field images must be RGB".into()));
        }
        cfg.discriminator.validate(h, w)?;
        let generator = Generator::<T>::build(&cfg.generator_config(), mix_seed(cfg.seed, STREAM_G_INIT, 0))?;
        let critics = DiscriminatorPair::<T>::build(&cfg.discriminator, mix_seed(cfg.seed, STREAM_D_INIT, 0))?;
        for m in [generator.size_multiple(), teacher.size_multiple()] {
            if h % m != 0 || w % m != 0 {
                return Err(Error::Geometry(format!("{h}x{w} images are not divisible by {m}")));
            }
        }
        let objective = cfg.objective();
        let embedder = if objective.perceptual > 0.0 {
            Some(embedder.unwrap_or_else(PerceptualEmbedder::default_embedder))
        } else {
            None
        };
        let z: Vec<ImageF<T>> = dark.iter().map(|x| enhance(x, lut).into_inner()).collect();
        let y_t = teacher_outputs(teacher, &z)?;
        let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| dark.len().div_ceil(cfg.batch_size));
        let full = (cfg.total_epochs() * steps_per_epoch) as u64;
        let total_steps = cfg.max_steps.map_or(full, |m| m.min(full));
        Ok(Self {
            g_opt: Adam::new(generator.params(), cfg.adam()),
            d_opt: Adam::new(critics.params(), cfg.adam()),
            cfg: cfg.clone(),
            objective,
            generator,
            critics,
            embedder,
            z,
            y_t,
            bright,
            step: 0,
            steps_per_epoch,
            total_steps,
            teacher_checksum: teacher.params().checksum(),
            lut_digest: lut_digest(lut),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn epoch(&self) -> usize {
        self.step as usize / self.steps_per_epoch
    }

    pub fn generator(&self) -> &Generator<T> {
        &self.generator
    }

    pub fn critics(&self) -> &DiscriminatorPair<T> {
        &self.critics
    }

    pub fn into_generator(self) -> Generator<T> {
        self.generator
    }

    /// Enhanced inputs of the dark set.
    pub fn enhanced(&self) -> &[ImageF<T>] {
        &self.z
    }

    fn dark_indices(&self, step: u64) -> Vec<usize> {
        let n = self.z.len();
        let epoch = step / self.steps_per_epoch as u64;
        let j = (step % self.steps_per_epoch as u64) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, STREAM_PERM, epoch)));
        (0..self.cfg.batch_size).map(|b| perm[(j * self.cfg.batch_size + b) % n]).collect()
    }

    fn flips(&self, step: u64, n: usize) -> (Vec<(bool, bool)>, Vec<(bool, bool)>) {
        if !self.cfg.flips {
            return (vec![(false, false); n], vec![(false, false); n]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, STREAM_FLIP, step));
        let mut draw = || (0..n).map(|_| (rng.random(), rng.random())).collect();
        (draw(), draw())
    }

    /// Runs one critic update and one generator update.
    pub fn train_step(&mut self, want_grid: bool) -> Result<StepOutput<T>> {
        if self.is_done() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let step = self.step;
        let lr = lr_schedule(self.epoch(), &self.cfg)?;
        let b = self.cfg.batch_size;
        let dark_idx = self.dark_indices(step);
        let real_idx = batch_indices(self.cfg.seed, STREAM_REAL, step, self.bright.len(), b);
        let (flip_dark, flip_real) = self.flips(step, b);
        let z = stack(&self.z, &dark_idx, &flip_dark)?;
        let y_t = stack(&self.y_t, &dark_idx, &flip_dark)?;
        let real = stack(self.bright, &real_idx, &flip_real)?;
        let s = z.shape();
        let crops = CropPlan::sample(&self.critics, b, b, s.h, s.w, mix_seed(self.cfg.seed, STREAM_CROP, step))?;

        let critic_first = self.cfg.update_order == UpdateOrder::CriticFirst;
        let mut critic_loss = f64::NAN;
        let (report, g_grads, fake) = {
            let mut t = Tape::new();
            let pg = self.generator.params().bind(&mut t);
            let zv = t.constant_ref(&z);
            let y = self.generator.forward(&mut t, &pg, zv)?;
            if critic_first {
                // the critic sees this step's output before the generator moves
                let fake = t.value(y).clone();
                critic_loss = critic_update(&mut self.critics, &mut self.d_opt, &real, &fake, &crops, lr, step)?;
            }
            let pd = self.critics.params().bind_frozen(&mut t);
            let pe = self.embedder.as_ref().map(|e| (e, e.params().bind_frozen(&mut t)));
            let ytv = t.constant_ref(&y_t);
            let rv = t.constant_ref(&real);
            let vars = generator_objective(
                &mut t,
                y,
                zv,
                ytv,
                rv,
                (&self.critics, &pd),
                pe.as_ref().map(|(e, p)| (*e, p)),
                &self.objective,
                &crops,
            )?;
            let report = report_of(&t, &vars);
            if !report.is_finite() {
                return Err(Error::NonFinite(format!("generator losses at step {step}: {report:?}")));
            }
            let mut grads = t.backward(vars.total);
            let g = pg.gradients(self.generator.params(), &mut grads);
            let fake = (!critic_first || want_grid).then(|| t.value(y).clone());
            (report, g, fake)
        };
        self.g_opt.update(self.generator.params_mut(), &g_grads, lr);

        if !critic_first {
            let f = fake.as_ref().expect("kept for the critic step");
            critic_loss = critic_update(&mut self.critics, &mut self.d_opt, &real, f, &crops, lr, step)?;
        }
        let grid = if want_grid {
            Some(grid_tiles(&z, &y_t, fake.as_ref().expect("generator output"), &real)?)
        } else {
            None
        };
        self.step += 1;
        Ok(StepOutput {
            report,
            critic_loss,
            grid,
        })
    }

    /// Full training state at the current step.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.insert_params("generator", self.generator.params());
        ck.insert_params("critics", self.critics.params());
        ck.insert_adam("generator", self.generator.params(), &self.g_opt);
        ck.insert_adam("critics", self.critics.params(), &self.d_opt);
        ck.set_meta("kind", "student");
        ck.set_meta("dtype", T::NAME);
        ck.set_meta("step", self.step);
        ck.set_meta("epoch", self.epoch());
        ck.set_meta("seed", self.cfg.seed);
        ck.set_meta("variant", self.cfg.variant.name());
        ck.set_meta("train_config", serde_json::to_string(&self.cfg).expect("plain struct"));
        ck.set_meta("config_hash", self.cfg.hash());
        ck.set_meta("generator_arch", self.generator.arch_tag());
        ck.set_meta("generator_config", serde_json::to_string(self.generator.config()).expect("plain struct"));
        ck.set_meta("generator_seed", self.generator.seed());
        ck.set_meta("teacher_checksum", &self.teacher_checksum);
        ck.set_meta("lut_digest", &self.lut_digest);
        ck
    }

    /// Restores networks, optimizer moments and the step counter.
    pub fn resume(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        if ck.meta("kind") != Some("student") {
            return Err(Error::Missing("checkpoint does not hold a student".into()));
        }
        let gcfg: GeneratorConfig = serde_json::from_str(ck.require_meta("generator_config")?)
            .map_err(|e| Error::Config(e.to_string()))?;
        if &gcfg != self.generator.config() || ck.meta("variant") != Some(self.cfg.variant.name()) {
            return Err(Error::Config("checkpoint was trained with a different student or variant".into()));
        }
        if ck.meta("seed") != Some(self.cfg.seed.to_string().as_str()) {
            return Err(Error::Config("checkpoint was trained with a different seed".into()));
        }
        ck.restore_params("generator", self.generator.params_mut())?;
        ck.restore_params("critics", self.critics.params_mut())?;
        self.g_opt = ck.restore_adam("generator", self.generator.params())?;
        self.d_opt = ck.restore_adam("critics", self.critics.params())?;
        self.step = ck
            .require_meta("step")?
            .parse()
            .map_err(|_| Error::Config("bad step in checkpoint".into()))?;
        Ok(())
    }
}

fn critic_update<T: Scalar>(
    critics: &mut DiscriminatorPair<T>,
    opt: &mut Adam<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    crops: &CropPlan,
    lr: f64,
    step: u64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut t = Tape::new();
        let pd = critics.params().bind(&mut t);
        let rv = t.constant_ref(real);
        let fv = t.constant_ref(fake);
        let l = critic_adv_term(&mut t, critics, &pd, rv, fv, crops)?;
        let loss = t.value(l).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at step {step}: {loss}")));
        }
        let mut g = t.backward(l);
        (loss, pd.gradients(critics.params(), &mut g))
    };
    opt.update(critics.params_mut(), &grads, lr);
    Ok(loss)
}

fn grid_tiles<T: Scalar>(z: &Tensor<T>, y_t: &Tensor<T>, y: &Tensor<T>, real: &Tensor<T>) -> Result<Vec<ImageF<T>>> {
    let rows = z.shape().n.min(4);
    let (z, y_t, y, real) = (z.to_images()?, y_t.to_images()?, y.to_images()?, real.to_images()?);
    let mut tiles = Vec::with_capacity(rows * 4);
    for i in 0..rows {
        tiles.extend([z[i].clone(), y_t[i].clone(), y[i].clone(), real[i].clone()]);
    }
    Ok(tiles)
}

/// Where and how a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

pub struct StudentRun<T: Scalar> {
    pub generator: Generator<T>,
    pub losses: Vec<(u64, LossReport)>,
    pub checkpoint: Checkpoint<T>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    kind: &'a str,
    config: &'a TrainConfig,
    config_hash: String,
    dark_images: usize,
    bright_images: usize,
    steps: u64,
    final_losses: Option<LossReport>,
    checkpoint_hash: String,
    teacher_checksum: &'a str,
    lut_digest: &'a str,
}

/// Trains the student to completion (or `max_steps`), writing logs,
/// checkpoints and sample grids under `opts.out_dir` when set.
pub fn train_student<T: Scalar>(
    dark: &[ImageF<T>],
    bright: &[ImageF<T>],
    teacher: &Teacher<T>,
    lut: &LutMapping,
    cfg: &TrainConfig,
    embedder: Option<PerceptualEmbedder<T>>,
    opts: &RunOptions,
) -> Result<StudentRun<T>> {
    let mut trainer = StudentTrainer::new(dark, bright, teacher, lut, cfg, embedder)?;
    let out = opts.out_dir.as_deref();
    if let Some(dir) = out {
        ensure_dir(dir)?;
        if cfg.checkpoint_every > 0 {
            ensure_dir(&dir.join("checkpoints"))?;
        }
        if cfg.sample_every > 0 {
            ensure_dir(&dir.join("samples"))?;
        }
    }
    if let Some(path) = &opts.resume_from {
        trainer.resume(&Checkpoint::load(path)?)?;
    }
    let mut log = match out {
        Some(dir) if opts.resume_from.is_some() && dir.join("loss.csv").exists() => {
            Some(LossLog::resume(dir.join("loss.csv"), trainer.step())?)
        }
        Some(dir) => Some(LossLog::create(dir.join("loss.csv"))?),
        None => None,
    };
    let mut losses = Vec::new();
    while !trainer.is_done() {
        let step = trainer.step();
        let want_grid = out.is_some() && cfg.sample_every > 0 && step % cfg.sample_every == 0;
        let o = trainer.train_step(want_grid)?;
        if let Some(log) = log.as_mut() {
            log.append(step, &o.report)?;
        }
        if let (Some(dir), Some(tiles)) = (out, o.grid) {
            save_grid(&tiles, 4, &dir.join("samples").join(format!("step_{step:06}.png")))?;
        }
        losses.push((step, o.report));
        if let Some(dir) = out {
            let done = trainer.step();
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.is_done() {
                trainer
                    .checkpoint()
                    .save(dir.join("checkpoints").join(format!("step_{done:06}.safetensors")))?;
            }
        }
    }
    if teacher.params().checksum() != trainer.teacher_checksum {
        return Err(Error::Numerical("teacher parameters changed during student training".into()));
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(dir.join("student.safetensors"))?;
        write_json(
            &dir.join("run.json"),
            &TrainSummary {
                kind: "train",
                config: cfg,
                config_hash: cfg.hash(),
                dark_images: dark.len(),
                bright_images: bright.len(),
                steps: trainer.step(),
                final_losses: losses.last().map(|l| l.1),
                checkpoint_hash: checkpoint.content_hash(),
                teacher_checksum: &trainer.teacher_checksum,
                lut_digest: &trainer.lut_digest,
            },
        )?;
    }
    Ok(StudentRun {
        generator: trainer.into_generator(),
        losses,
        checkpoint,
    })
}

/// Rebuilds the student generator from a student checkpoint.
pub fn load_student<T: Scalar>(ck: &Checkpoint<T>) -> Result<Generator<T>> {
    if ck.meta("kind") != Some("student") {
        return Err(Error::Missing("checkpoint does not hold a student".into()));
    }
    let cfg: GeneratorConfig =
        serde_json::from_str(ck.require_meta("generator_config")?).map_err(|e| Error::Config(e.to_string()))?;
    let seed = ck
        .require_meta("generator_seed")?
        .parse()
        .map_err(|_| Error::Config("bad generator seed".into()))?;
    let mut g = Generator::build(&cfg, seed)?;
    ck.restore_params("generator", g.params_mut())?;
    Ok(g)
}

/// Checkpoints written by a run, in step order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = dir.join("checkpoints");
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "safetensors"))
        .collect();
    out.sort();
    Ok(out)
}

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::artifacts::{ensure_dir, write_json};
use super::config::TeacherTrainConfig;
use super::mix_seed;
use crate::error::{Error, Result};
use crate::image::{gray_pair_from_stained, ImageF};
use crate::networks::{Checkpoint, Network, Teacher, TeacherConfig};
use crate::nn::{Adam, Tape, Tensor};
use crate::scalar::Scalar;

const STREAM_BATCH: u64 = 1;

pub struct TeacherRun<T> {
    pub teacher: Teacher<T>,
    /// Batch L1 per step, before the update of that step.
    pub losses: Vec<f64>,
    /// Mean L1 over the training set before and after training.
    pub initial_l1: f64,
    pub final_l1: f64,
    pub checkpoint: Checkpoint<T>,
}

#[derive(Serialize)]
struct TeacherSummary<'a> {
    kind: &'a str,
    config: &'a TeacherTrainConfig,
    config_hash: String,
    images: usize,
    initial_l1: f64,
    final_l1: f64,
    epoch_mean_l1: Vec<f64>,
    checkpoint_hash: String,
}

/// Mean L1 between the teacher's colorization of each gray image and its color original.
pub fn teacher_l1<T: Scalar>(teacher: &Teacher<T>, gray: &[ImageF<T>], color: &[ImageF<T>]) -> Result<f64> {
    let mut total = 0.0;
    for (g, c) in gray.chunks(8).zip(color.chunks(8)) {
        let y = teacher.infer(&Tensor::from_images(g)?)?;
        let t = Tensor::from_images(c)?;
        total += y
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>();
    }
    let n: usize = color.iter().map(|c| c.data().len()).sum();
    Ok(total / n as f64)
}

/// Batch indices of `step`: distinct where possible, reproducible from the seed.
pub(crate) fn batch_indices(seed: u64, stream: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, step));
    if batch <= n {
        sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|i| i % n).collect()
    }
}

/// Fits the teacher colorizer on (luma, color) pairs made from bright-field images.
pub fn pretrain_teacher<T: Scalar>(bright: &[ImageF<T>], cfg: &TeacherTrainConfig, out: Option<&Path>) -> Result<TeacherRun<T>> {
    cfg.validate()?;
    if bright.is_empty() {
        return Err(Error::Empty("bright-field set".into()));
    }
    let (gray, color): (Vec<ImageF<T>>, Vec<ImageF<T>>) = bright
        .iter()
        .map(|b| gray_pair_from_stained(b).map(|(g, c)| (g.into_inner(), c)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let mut teacher = Teacher::<T>::build(&cfg.network, cfg.seed)?;
    let m = teacher.size_multiple();
    if let Some(bad) = gray.iter().find(|g| g.height() % m != 0 || g.width() % m != 0 || !g.same_size(&gray[0])) {
        return Err(Error::Geometry(format!(
            "teacher needs equal image sizes divisible by {m}, got {}x{}",
            bad.height(),
            bad.width()
        )));
    }
    let initial_l1 = teacher_l1(&teacher, &gray, &color)?;
    let mut adam = Adam::new(teacher.params(), cfg.adam());
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let idx = batch_indices(cfg.seed, STREAM_BATCH, step, gray.len(), cfg.batch_size);
        let x = Tensor::from_images(&idx.iter().map(|&i| gray[i].clone()).collect::<Vec<_>>())?;
        let target = Tensor::from_images(&idx.iter().map(|&i| color[i].clone()).collect::<Vec<_>>())?;
        let (loss, grads) = {
            let mut t = Tape::new();
            let p = teacher.params().bind(&mut t);
            let xv = t.constant(x);
            let tv = t.constant(target);
            let y = teacher.forward(&mut t, &p, xv)?;
            let l = t.mean_abs_diff(y, tv)?;
            let loss = t.value(l).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("teacher L1 at step {step}: {loss}")));
            }
            let mut g = t.backward(l);
            (loss, p.gradients(teacher.params(), &mut g))
        };
        adam.update(teacher.params_mut(), &grads, cfg.lr);
        losses.push(loss);
    }
    let final_l1 = teacher_l1(&teacher, &gray, &color)?;
    if !final_l1.is_finite() {
        return Err(Error::NonFinite(format!("teacher L1 after training: {final_l1}")));
    }

    let mut ck = Checkpoint::new();
    ck.insert_params("teacher", teacher.params());
    ck.set_meta("kind", "teacher");
    ck.set_meta("dtype", T::NAME);
    ck.set_meta("arch", teacher.arch_tag());
    ck.set_meta("teacher_config", serde_json::to_string(&cfg.network).expect("plain struct"));
    ck.set_meta("seed", cfg.seed);
    ck.set_meta("step", cfg.steps);
    ck.set_meta("config_hash", cfg.hash());

    if let Some(dir) = out {
        ensure_dir(dir)?;
        ck.save(dir.join("teacher.safetensors"))?;
        let mut csv = String::from("step,l1\n");
        for (s, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{s},{l:?}\n"));
        }
        let path = dir.join("teacher_loss.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let per_epoch = gray.len().div_ceil(cfg.batch_size).max(1);
        let epoch_mean_l1 = losses
            .chunks(per_epoch)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        write_json(
            &dir.join("run.json"),
            &TeacherSummary {
                kind: "pretrain-teacher",
                config: cfg,
                config_hash: cfg.hash(),
                images: gray.len(),
                initial_l1,
                final_l1,
                epoch_mean_l1,
                checkpoint_hash: ck.content_hash(),
            },
        )?;
    }
    Ok(TeacherRun {
        teacher,
        losses,
        initial_l1,
        final_l1,
        checkpoint: ck,
    })
}

/// Rebuilds a teacher from its checkpoint.
pub fn load_teacher<T: Scalar>(ck: &Checkpoint<T>) -> Result<Teacher<T>> {
    if ck.meta("kind") != Some("teacher") {
        return Err(Error::Missing("checkpoint does not hold a teacher".into()));
    }
    let cfg: TeacherConfig =
        serde_json::from_str(ck.require_meta("teacher_config")?).map_err(|e| Error::Config(e.to_string()))?;
    let seed = ck.require_meta("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?;
    let mut teacher = Teacher::build(&cfg, seed)?;
    ck.restore_params("teacher", teacher.params_mut())?;
    Ok(teacher)
}

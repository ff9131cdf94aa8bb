use stainkit::enhance::LutMapping;
use stainkit::image::{to_luma, ImageF};
use stainkit::losses::{content_loss, LossWeights};
use stainkit::networks::{Checkpoint, DiscriminatorConfig, Generator, GeneratorConfig, Network, Teacher, TeacherConfig};
use stainkit::synth::{gen_bright_field, gen_dark_field, SynthConfig};
use stainkit::training::*;

fn lr_cfg() -> TrainConfig {
    TrainConfig::default()
}

#[test]
fn lr_schedule_examples() {
    let cfg = lr_cfg();
    assert_eq!(lr_schedule(0, &cfg).unwrap(), 1e-4);
    assert_eq!(lr_schedule(199, &cfg).unwrap(), 1e-4);
    assert!(lr_schedule(299, &cfg).unwrap().abs() < 1e-12);
    // 1e-4 * (1 - (250 - 200 + 1) / 100)
    assert!((lr_schedule(250, &cfg).unwrap() - 1e-4 * 0.49).abs() < 1e-15);
    assert!(lr_schedule(300, &cfg).is_err());
}

#[test]
fn lr_schedule_is_non_increasing_with_small_steps() {
    let cfg = lr_cfg();
    let lrs: Vec<f64> = (0..300).map(|e| lr_schedule(e, &cfg).unwrap()).collect();
    for w in lrs.windows(2) {
        assert!(w[1] <= w[0]);
        assert!(w[0] - w[1] <= 1e-4 / 100.0 + 1e-18);
    }
    let no_decay = TrainConfig { epochs_decay: 0, ..lr_cfg() };
    assert_eq!(lr_schedule(199, &no_decay).unwrap(), 1e-4);
}

#[test]
fn config_validation() {
    for bad in [
        TrainConfig { lr_initial: 0.0, ..lr_cfg() },
        TrainConfig { batch_size: 0, ..lr_cfg() },
        TrainConfig {
            weights: LossWeights { lambda1: -1.0, lambda2: 10.0 },
            ..lr_cfg()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let cfg = TrainConfig { variant: Variant::Ablation3, ..lr_cfg() };
    assert_eq!(cfg.generator_config().arch, stainkit::networks::GeneratorArch::EgUnet);
    assert_eq!(TrainConfig { variant: Variant::Ablation2, ..lr_cfg() }.objective().kd, 0.0);
    let a1 = TrainConfig { variant: Variant::Ablation1, ..lr_cfg() }.objective();
    assert_eq!((a1.kd, a1.con, a1.perceptual), (0.0, 0.0, 1.0));
}

fn teacher_cfg(steps: u64, lr: f64, batch: usize) -> TeacherTrainConfig {
    TeacherTrainConfig {
        lr,
        steps,
        batch_size: batch,
        seed: 1,
        network: TeacherConfig { base_width: 8, depth: 3 },
        ..TeacherTrainConfig::default()
    }
}

#[test]
fn teacher_pretraining_halves_l1_and_replays() {
    let bright = gen_bright_field::<f32>(&SynthConfig::desk(32, 32, 11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = pretrain_teacher(&bright, &teacher_cfg(200, 2e-3, 4), Some(dir.path())).unwrap();
    assert!(run.final_l1 <= 0.5 * run.initial_l1, "{} -> {}", run.initial_l1, run.final_l1);
    assert_eq!(run.losses.len(), 200);
    let csv = std::fs::read_to_string(dir.path().join("teacher_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    let back = load_teacher::<f32>(&Checkpoint::load(dir.path().join("teacher.safetensors")).unwrap()).unwrap();
    assert_eq!(back.params().checksum(), run.teacher.params().checksum());

    let short = teacher_cfg(15, 2e-3, 4);
    let a = pretrain_teacher(&bright, &short, None).unwrap();
    let b = pretrain_teacher(&bright, &short, None).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint.content_hash(), b.checkpoint.content_hash());
}

#[test]
fn teacher_memorizes_one_image() {
    let bright = gen_bright_field::<f32>(&SynthConfig::desk(32, 1, 12)).unwrap();
    let run = pretrain_teacher(&bright, &teacher_cfg(300, 5e-3, 1), None).unwrap();
    assert!(run.final_l1 < 0.01, "{}", run.final_l1);
}

#[test]
fn teacher_rejects_empty_and_odd_sizes() {
    assert!(pretrain_teacher::<f32>(&[], &teacher_cfg(1, 1e-3, 1), None).is_err());
    let odd = gen_bright_field::<f32>(&SynthConfig::desk(36, 1, 1)).unwrap();
    assert!(pretrain_teacher(&odd, &teacher_cfg(1, 1e-3, 1), None).is_err());
}

struct Desk {
    dark: Vec<ImageF<f32>>,
    bright: Vec<ImageF<f32>>,
    held_out: Vec<ImageF<f32>>,
    teacher: Teacher<f32>,
    lut: LutMapping,
}

fn desk() -> Desk {
    let dark = gen_dark_field::<f32>(&SynthConfig::desk(32, 16, 21)).unwrap();
    let bright = gen_bright_field::<f32>(&SynthConfig::desk(32, 16, 22)).unwrap();
    let held_out = gen_dark_field::<f32>(&SynthConfig::desk(32, 6, 23)).unwrap();
    let teacher = pretrain_teacher(&bright, &teacher_cfg(60, 2e-3, 4), None).unwrap().teacher;
    let lut = LutMapping::fit(&dark, &bright).unwrap();
    Desk {
        dark,
        bright,
        held_out,
        teacher,
        lut,
    }
}

fn student_cfg(max_steps: u64) -> TrainConfig {
    TrainConfig {
        lr_initial: 5e-4,
        epochs_flat: 20,
        epochs_decay: 10,
        batch_size: 4,
        seed: 3,
        max_steps: Some(max_steps),
        generator: GeneratorConfig {
            base_width: 8,
            n_blocks: 3,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            base_width: 8,
            global_layers: 3,
            local_layers: 2,
            patch_count: 2,
            patch_size: 16,
        },
        ..TrainConfig::default()
    }
}

fn held_out_content(g: &Generator<f32>, d: &Desk) -> f64 {
    d.held_out
        .iter()
        .map(|x| {
            let y = stain(x, &d.lut, g).unwrap();
            content_loss(&stainkit::enhance::enhance(x, &d.lut), &y).unwrap()
        })
        .sum::<f64>()
        / d.held_out.len() as f64
}

#[test]
fn student_training_progress_and_frozen_teacher() {
    let d = desk();
    let before = d.teacher.params().checksum();
    let cfg = student_cfg(100);
    let untrained = Generator::<f32>::build(&cfg.generator_config(), mix_seed(cfg.seed, 15, 0)).unwrap();
    let run = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &RunOptions::default()).unwrap();
    assert_eq!(d.teacher.params().checksum(), before);
    assert_eq!(run.losses.len(), 100);
    let kd = |r: std::ops::Range<usize>| run.losses[r.clone()].iter().map(|l| l.1.kd).sum::<f64>() / r.len() as f64;
    assert!(kd(90..100) < kd(0..10), "{} vs {}", kd(90..100), kd(0..10));
    let (trained, fresh) = (held_out_content(&run.generator, &d), held_out_content(&untrained, &d));
    assert!(trained < fresh, "{trained} vs {fresh}");

    let loaded = load_student::<f32>(&run.checkpoint).unwrap();
    assert_eq!(loaded.params().checksum(), run.generator.params().checksum());
}

#[test]
fn zero_weights_leave_only_the_adversarial_term() {
    let d = desk();
    let cfg = TrainConfig {
        weights: LossWeights { lambda1: 0.0, lambda2: 0.0 },
        ..student_cfg(3)
    };
    let run = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &RunOptions::default()).unwrap();
    for (_, r) in &run.losses {
        assert!(r.kd > 0.0 && r.con > 0.0);
        assert_eq!(r.total, r.adv);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let d = desk();
    let cfg = TrainConfig { flips: true, ..student_cfg(12) };
    let opts = RunOptions::default();
    let a = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &opts).unwrap();
    let b = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &opts).unwrap();
    assert_eq!(a.checkpoint.content_hash(), b.checkpoint.content_hash());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let other = TrainConfig { seed: 4, ..cfg };
    let c = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &other, None, &opts).unwrap();
    assert_ne!(a.checkpoint.weights_hash(), c.checkpoint.weights_hash());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = desk();
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    // steps_per_epoch 4 puts the split at an epoch boundary with lr decay active
    let cfg = TrainConfig {
        epochs_flat: 2,
        epochs_decay: 6,
        steps_per_epoch: Some(4),
        checkpoint_every: 8,
        sample_every: 8,
        flips: true,
        ..student_cfg(24)
    };
    let opts = |dir: &std::path::Path, resume: Option<std::path::PathBuf>| RunOptions {
        out_dir: Some(dir.to_path_buf()),
        resume_from: resume,
    };
    let a = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &opts(full.path(), None)).unwrap();
    let first = TrainConfig { max_steps: Some(12), ..cfg.clone() };
    train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &first, None, &opts(split.path(), None)).unwrap();
    let ck = split.path().join("student.safetensors");
    let b = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &opts(split.path(), Some(ck))).unwrap();

    let read = |p: &std::path::Path| std::fs::read_to_string(p.join("loss.csv")).unwrap();
    assert_eq!(read(full.path()), read(split.path()));
    assert_eq!(a.checkpoint.content_hash(), b.checkpoint.content_hash());
    assert_eq!(b.losses.first().map(|l| l.0), Some(12));

    let cks = list_checkpoints(full.path()).unwrap();
    assert_eq!(cks.len(), 2);
    assert!(full.path().join("samples/step_000016.png").exists());
    assert!(full.path().join("run.json").exists());
    // resuming from the mid-run checkpoint of the uninterrupted run also replays
    let again = tempfile::tempdir().unwrap();
    std::fs::copy(full.path().join("loss.csv"), again.path().join("loss.csv")).unwrap();
    train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &cfg, None, &opts(again.path(), Some(cks[0].clone()))).unwrap();
    assert_eq!(read(full.path()), read(again.path()));
}

#[test]
fn resume_rejects_mismatched_runs() {
    let d = desk();
    let run = train_student(&d.dark, &d.bright, &d.teacher, &d.lut, &student_cfg(1), None, &RunOptions::default()).unwrap();
    let mut other = StudentTrainer::new(
        &d.dark,
        &d.bright,
        &d.teacher,
        &d.lut,
        &TrainConfig { seed: 99, ..student_cfg(1) },
        None,
    )
    .unwrap();
    assert!(other.resume(&run.checkpoint).is_err());
}

#[test]
fn stain_keeps_size_and_is_deterministic() {
    let d = desk();
    let g = Generator::<f32>::build(&student_cfg(1).generator_config(), 5).unwrap();
    let odd = gen_dark_field::<f32>(&SynthConfig { image_size: 32, ..SynthConfig::desk(32, 1, 8) })
        .unwrap()
        .remove(0)
        .crop(1, 2, 29, 27)
        .unwrap();
    let y = stain(&odd, &d.lut, &g).unwrap();
    assert_eq!((y.height(), y.width(), y.channels()), (29, 27, 3));
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(stain(&odd, &d.lut, &g).unwrap(), y);
    let batch = stain_batch(&d.held_out[..2], &d.lut, &g).unwrap();
    assert_eq!(batch[0], stain(&d.held_out[0], &d.lut, &g).unwrap());
    let _ = to_luma(&batch[1]);
}

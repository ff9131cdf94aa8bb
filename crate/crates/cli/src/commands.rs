use std::path::{Path, PathBuf};

use stainkit::enhance::{accumulate_histogram, enhance, histogram_to_cdf, EnhanceMode, LutMapping};
use stainkit::image::{list_pngs, load_all, load_image, save_image, GrayImage, ImageF, UnpairedDataset};
use stainkit::metrics::{evaluate_with, fit_niqe, MetricsReport, NiqeModel};
use stainkit::networks::{Checkpoint, PerceptualEmbedder};
use stainkit::synth::write_dataset;
use stainkit::training::{load_student, load_teacher, pretrain_teacher, stain, train_student, RunOptions};
use stainkit::{Error, Result};

use crate::config::PipelineConfig;

pub const LUT_FILE: &str = "lut.txt";
pub const TEACHER_FILE: &str = "teacher.safetensors";
pub const STUDENT_FILE: &str = "student.safetensors";
pub const NIQE_FILE: &str = "niqe.safetensors";
pub const EMBEDDER_FILE: &str = "embedder.safetensors";
pub const RESULTS_FILE: &str = "results.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} {}", path.display())))
    }
}

/// A dataset directory (with manifest.txt or dark/ and bright/) or a manifest file.
pub fn open_dataset(path: &Path) -> Result<UnpairedDataset> {
    require(path, "dataset")?;
    if path.is_file() {
        return UnpairedDataset::from_manifest(path);
    }
    let manifest = path.join("manifest.txt");
    if manifest.exists() {
        UnpairedDataset::from_manifest(manifest)
    } else {
        UnpairedDataset::from_dirs(path.join("dark"), path.join("bright"))
    }
}

/// PNGs of a directory, a single PNG, or the bright split of a dataset directory.
pub fn image_paths(path: &Path) -> Result<Vec<PathBuf>> {
    require(path, "input")?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if path.join("manifest.txt").exists() {
        return Ok(open_dataset(path)?.bright_paths);
    }
    let paths = list_pngs(path)?;
    if paths.is_empty() {
        return Err(Error::Empty(format!("no PNG files in {}", path.display())));
    }
    Ok(paths)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_embedder(cfg: &PipelineConfig) -> Result<PerceptualEmbedder<f32>> {
    match &cfg.evaluate.embedder {
        Some(p) => {
            require(p, "embedder weights")?;
            PerceptualEmbedder::load(p)
        }
        None => Ok(PerceptualEmbedder::default_embedder()),
    }
}

pub fn synth_data(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = write_dataset(&cfg.synth, out)?;
    eprintln!("wrote {} dark and {} bright images", ds.dark_paths.len(), ds.bright_paths.len());
    Ok(vec![out.join("dark"), out.join("bright"), out.join("manifest.txt")])
}

pub fn enhance_cmd(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = open_dataset(data)?;
    ds.check_trainable()?;
    let dark = load_all::<f32>(&ds.dark_paths)?;
    let bright = load_all::<f32>(&ds.bright_paths)?;
    let lut = LutMapping::fit(&dark, &bright)?;
    ensure_dir(out)?;
    lut.save(out.join(LUT_FILE))?;
    let enhanced_dir = out.join("enhanced");
    ensure_dir(&enhanced_dir)?;
    let bright_cdf = histogram_to_cdf(&accumulate_histogram(&bright)?)?;
    for (x, p) in dark.iter().zip(&ds.dark_paths) {
        let z = match cfg.enhance.mode {
            EnhanceMode::Aggregate => enhance(x, &lut),
            EnhanceMode::PerImage => enhance(x, &LutMapping::fit_single(x, &bright_cdf)?),
        };
        save_image(&z, enhanced_dir.join(file_name(p)))?;
    }
    eprintln!("enhanced {} images", dark.len());
    Ok(vec![out.join(LUT_FILE), enhanced_dir])
}

pub fn pretrain_teacher_cmd(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let bright = load_all::<f32>(&image_paths(data)?)?;
    let run = pretrain_teacher(&bright, &cfg.teacher, Some(out))?;
    eprintln!("teacher L1 {:.5} -> {:.5}", run.initial_l1, run.final_l1);
    Ok(vec![out.join(TEACHER_FILE), out.join("teacher_loss.csv"), out.join("run.json")])
}

pub fn train_cmd(
    cfg: &PipelineConfig,
    data: &Path,
    teacher: &Path,
    lut: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    require(teacher, "teacher checkpoint")?;
    require(lut, "LUT file")?;
    if let Some(r) = resume {
        require(r, "resume checkpoint")?;
    }
    let ds = open_dataset(data)?;
    ds.check_trainable()?;
    let dark = load_all::<f32>(&ds.dark_paths)?;
    let bright = load_all::<f32>(&ds.bright_paths)?;
    let teacher = load_teacher::<f32>(&Checkpoint::load(teacher)?)?;
    let lut = LutMapping::load(lut)?;
    let embedder = if cfg.train.objective().perceptual > 0.0 {
        Some(load_embedder(cfg)?)
    } else {
        None
    };
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume_from: resume.map(Path::to_path_buf),
    };
    let run = train_student(&dark, &bright, &teacher, &lut, &cfg.train, embedder, &opts)?;
    if let Some((step, r)) = run.losses.last() {
        eprintln!("step {step}: adv {:.4} kd {:.4} con {:.4} total {:.4}", r.adv, r.kd, r.con, r.total);
    }
    Ok(vec![out.join(STUDENT_FILE), out.join("loss.csv"), out.join("run.json")])
}

pub fn stain_cmd(input: &Path, lut: &Path, student: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    require(lut, "LUT file")?;
    require(student, "student checkpoint")?;
    let paths = image_paths(input)?;
    let lut = LutMapping::load(lut)?;
    let g = load_student::<f32>(&Checkpoint::load(student)?)?;
    let (stained, enhanced) = (out.join("stained"), out.join("enhanced"));
    ensure_dir(&stained)?;
    ensure_dir(&enhanced)?;
    for p in &paths {
        let x = load_image::<f32>(p)?;
        let y = stain(&x, &lut, &g)?;
        save_image(&y, stained.join(file_name(p)))?;
        save_image(&enhance(&x, &lut), enhanced.join(file_name(p)))?;
    }
    eprintln!("stained {} images", paths.len());
    Ok(vec![stained, enhanced])
}

pub struct EvaluateArgs<'a> {
    pub outputs: &'a Path,
    pub references: &'a Path,
    pub enhanced: &'a Path,
    pub niqe_model: &'a Path,
    pub method: &'a str,
    pub results: Option<&'a Path>,
}

pub fn evaluate_cmd(cfg: &PipelineConfig, a: &EvaluateArgs<'_>, out: &Path) -> Result<(MetricsReport, Vec<PathBuf>)> {
    require(a.niqe_model, "NIQE model")?;
    let output_paths = image_paths(a.outputs)?;
    let outputs = load_all::<f32>(&output_paths)?;
    let references = load_all::<f32>(&image_paths(a.references)?)?;
    require(a.enhanced, "enhanced inputs")?;
    let enhanced = output_paths
        .iter()
        .map(|p| {
            let e = a.enhanced.join(file_name(p));
            if !e.exists() {
                return Err(Error::ShapeMismatch(format!("no enhanced input matching {}", file_name(p))));
            }
            let img: ImageF<f32> = load_image(&e)?;
            let gray = if img.channels() == 1 { img } else { stainkit::image::to_luma(&img).into_inner() };
            GrayImage::try_from(gray)
        })
        .collect::<Result<Vec<_>>>()?;
    let embedder = load_embedder(cfg)?;
    let model = NiqeModel::load(a.niqe_model)?;
    let report = evaluate_with(&outputs, &references, &enhanced, &embedder, &model, &cfg.evaluate.kid_options())?;
    ensure_dir(out)?;
    let results = a.results.map(Path::to_path_buf).unwrap_or_else(|| out.join(RESULTS_FILE));
    report.append_csv(&results, a.method)?;
    let json = serde_json::json!({
        "method": a.method,
        "fid": report.fid,
        "kid": report.kid,
        "niqe": report.niqe,
        "lpips": report.lpips,
        "outputs": outputs.len(),
        "references": references.len(),
    });
    let metrics = out.join("metrics.json");
    std::fs::write(&metrics, serde_json::to_string_pretty(&json).expect("json")).map_err(|e| Error::Io {
        path: metrics.clone(),
        source: e,
    })?;
    println!("{}", report.csv_row(a.method));
    Ok((report, vec![results, metrics]))
}

pub fn fit_niqe_cmd(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let images = load_all::<f32>(&image_paths(data)?)?;
    let model = fit_niqe(&images, cfg.evaluate.niqe_patch_size)?;
    ensure_dir(out)?;
    model.save(out.join(NIQE_FILE))?;
    eprintln!("fitted NIQE model on {} images", images.len());
    Ok(vec![out.join(NIQE_FILE)])
}

pub fn export_embedder_cmd(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    load_embedder(cfg)?.save(out.join(EMBEDDER_FILE))?;
    Ok(vec![out.join(EMBEDDER_FILE)])
}

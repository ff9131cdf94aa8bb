//! FID, KID, NIQE and LPIPS-style content distance.

mod features;
mod lpips;
mod niqe;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

pub use features::{extract_features, extractor_id, fid, image_features, kid, kid_with, mean_cov, mmd2_unbiased, psd_sqrt, FeatureSet, KidOptions};
pub use lpips::{lpips_content, lpips_distance};
pub use niqe::{aggd_fit, fit_niqe, ggd_fit, mscn, niqe, niqe_patch_features, NiqeModel, Plane, DEFAULT_PATCH_SIZE, NIQE_FEATURES};

use crate::error::{Error, Result};
use crate::image::{GrayImage, ImageF};
use crate::networks::PerceptualEmbedder;
use crate::scalar::Scalar;

pub const RESULTS_HEADER: &str = "method,fid,kid,niqe,lpips";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub fid: f64,
    pub kid: f64,
    pub niqe: f64,
    pub lpips: f64,
}

impl MetricsReport {
    pub fn csv_row(&self, method: &str) -> String {
        format!("{method},{},{},{},{}", self.fid, self.kid, self.niqe, self.lpips)
    }

    /// Appends one row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: impl AsRef<Path>, method: &str) -> Result<()> {
        let path = path.as_ref();
        if method.contains(',') || method.contains('\n') {
            return Err(Error::InvalidArgument(format!("method name {method:?}")));
        }
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(RESULTS_HEADER);
            text.push('\n');
        }
        text.push_str(&self.csv_row(method));
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a results table into (method, report) rows.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<(String, MetricsReport)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::format(path, "missing results header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
            if f.len() != 5 {
                return Err(Error::format(path, format!("expected 5 fields: {l}")));
            }
            Ok((
                f[0].to_string(),
                MetricsReport {
                    fid: num(f[1])?,
                    kid: num(f[2])?,
                    niqe: num(f[3])?,
                    lpips: num(f[4])?,
                },
            ))
        })
        .collect()
}

/// FID/KID of outputs against the reference set, mean NIQE of outputs and
/// mean content distance between each output and its enhanced input.
pub fn evaluate<T: Scalar>(
    outputs: &[ImageF<T>],
    references: &[ImageF<T>],
    enhanced: &[GrayImage<T>],
    embedder: &PerceptualEmbedder<T>,
    niqe_model: &NiqeModel,
) -> Result<MetricsReport> {
    evaluate_with(outputs, references, enhanced, embedder, niqe_model, &KidOptions::default())
}

pub fn evaluate_with<T: Scalar>(
    outputs: &[ImageF<T>],
    references: &[ImageF<T>],
    enhanced: &[GrayImage<T>],
    embedder: &PerceptualEmbedder<T>,
    niqe_model: &NiqeModel,
    kid_options: &KidOptions,
) -> Result<MetricsReport> {
    if outputs.is_empty() {
        return Err(Error::Empty("no outputs to evaluate".into()));
    }
    if outputs.len() != enhanced.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} outputs but {} enhanced inputs",
            outputs.len(),
            enhanced.len()
        )));
    }
    let fa = extract_features(outputs, embedder)?;
    let fb = extract_features(references, embedder)?;
    let fid = fid(&fa, &fb)?;
    let kid = kid_with(&fa, &fb, kid_options)?;
    let mut niqe_sum = 0.0;
    let mut lpips_sum = 0.0;
    for (y, z) in outputs.iter().zip(enhanced) {
        niqe_sum += niqe(y, niqe_model)?;
        lpips_sum += lpips_content(y, z, embedder)?;
    }
    let n = outputs.len() as f64;
    Ok(MetricsReport {
        fid,
        kid,
        niqe: niqe_sum / n,
        lpips: lpips_sum / n,
    })
}

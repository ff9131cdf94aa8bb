use crate::error::{Error, Result};
use crate::image::{to_luma, GrayImage, ImageF};
use crate::networks::PerceptualEmbedder;
use crate::nn::Tensor;
use crate::scalar::Scalar;

fn gray<T: Scalar>(img: &ImageF<T>) -> Result<ImageF<T>> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => Ok(to_luma(img).into_inner()),
        c => Err(Error::ShapeMismatch(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Per block: unit-normalize each location's channel vector, take the
/// squared difference summed over channels, average over space. The block
/// scores are averaged. Both inputs are compared as luma.
pub fn lpips_distance<T: Scalar>(a: &ImageF<T>, b: &ImageF<T>, embedder: &PerceptualEmbedder<T>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let batch = Tensor::from_images(&[gray(a)?, gray(b)?])?;
    let blocks = embedder.block_features(&batch)?;
    let mut total = 0.0;
    for f in &blocks {
        let s = f.shape();
        let plane = s.plane();
        let (fa, fb) = (f.sample(0), f.sample(1));
        let mut acc = 0.0;
        for i in 0..plane {
            let norm = |x: &[T]| (0..s.c).map(|c| x[c * plane + i].as_f64().powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(fa), norm(fb));
            acc += (0..s.c)
                .map(|c| (fa[c * plane + i].as_f64() / na - fb[c * plane + i].as_f64() / nb).powi(2))
                .sum::<f64>();
        }
        total += acc / plane as f64;
    }
    Ok(total / blocks.len() as f64)
}

/// Content preservation between the output's luma and the enhanced input.
pub fn lpips_content<T: Scalar>(y: &ImageF<T>, z: &GrayImage<T>, embedder: &PerceptualEmbedder<T>) -> Result<f64> {
    lpips_distance(y, z, embedder)
}

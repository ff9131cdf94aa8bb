use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::networks::{Network, PerceptualEmbedder};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// One feature vector per image, as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub vectors: DMatrix<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(vectors: DMatrix<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            vectors,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Identifies an embedder by architecture and weights.
pub fn extractor_id<T: Scalar>(embedder: &PerceptualEmbedder<T>) -> String {
    format!("{}:{}", embedder.arch_tag(), &embedder.params().checksum()[..16])
}

/// Spatially averaged block outputs of the embedder, concatenated.
pub fn image_features<T: Scalar>(img: &ImageF<T>, embedder: &PerceptualEmbedder<T>) -> Result<Vec<f64>> {
    let blocks = embedder.block_features(&Tensor::from_image(img))?;
    let mut out = Vec::new();
    for b in &blocks {
        let s = b.shape();
        let plane = s.plane();
        for c in 0..s.c {
            let ch = &b.data()[c * plane..(c + 1) * plane];
            out.push(ch.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64);
        }
    }
    Ok(out)
}

pub fn extract_features<T: Scalar>(images: &[ImageF<T>], embedder: &PerceptualEmbedder<T>) -> Result<FeatureSet> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 images for features, got {}", images.len())));
    }
    let rows: Vec<Vec<f64>> = images
        .par_iter().map(|i| image_features(i, embedder)).collect::<Result<_>>()?;
    let d = rows[0].len();
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    FeatureSet::new(m, extractor_id(embedder))
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("feature dimensions {} vs {}", a.dim(), b.dim())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 feature vectors per set".into()));
    }
    Ok(())
}

/// Column means and unbiased covariance.
pub fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0).max(1.0);
    (mu, cov)
}

const EIGEN_TOLERANCE: f64 = 1e-8;

/// Square root of a symmetric PSD matrix; eigenvalues slightly below zero
/// are clamped, clearly negative ones are an error.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -EIGEN_TOLERANCE * scale {
            return Err(Error::Numerical(format!("matrix square root of an indefinite matrix (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let (mu_a, cov_a) = mean_cov(&a.vectors);
    let (mu_b, cov_b) = mean_cov(&b.vectors);
    let diff = (&mu_a - &mu_b).norm_squared();
    // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), which is symmetric
    let ra = psd_sqrt(&cov_a)?;
    let inner = &ra * &cov_b * &ra;
    let cross = psd_sqrt(&inner)?.trace();
    Ok(diff + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KidOptions {
    pub subsets: usize,
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for KidOptions {
    fn default() -> Self {
        Self {
            subsets: 10,
            subset_size: 100,
            seed: 0x4b1d,
        }
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Rows in lexicographic order, so subset sampling ignores input order.
fn canonical_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

/// Unbiased MMD^2 of one pair of equal-size subsets:
/// `1/(m(m-1)) sum_{i!=j} k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i)`.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len();
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum += poly_kernel(x[i], x[j]) + poly_kernel(y[i], y[j]) - poly_kernel(x[i], y[j]) - poly_kernel(x[j], y[i]);
            }
        }
    }
    sum / (m * (m - 1)) as f64
}

/// Kernel inception distance: mean unbiased MMD^2 over seeded subsets.
pub fn kid_with(a: &FeatureSet, b: &FeatureSet, opts: &KidOptions) -> Result<f64> {
    check_pair(a, b)?;
    if opts.subsets == 0 || opts.subset_size < 2 {
        return Err(Error::InvalidArgument("KID needs at least one subset of size >= 2".into()));
    }
    let (ra, rb) = (canonical_rows(&a.vectors), canonical_rows(&b.vectors));
    let m = opts.subset_size.min(ra.len()).min(rb.len());
    let pick = |rows: &'_ [Vec<f64>], subset_seed: u64| -> Vec<usize> {
        if m == rows.len() {
            (0..m).collect()
        } else {
            sample(&mut ChaCha8Rng::seed_from_u64(subset_seed), rows.len(), m).into_vec()
        }
    };
    let mut seeder = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut total = 0.0;
    for _ in 0..opts.subsets {
        // both sides draw with the same seed, so equal sets pair up exactly
        let subset_seed = seeder.next_u64();
        let x: Vec<&[f64]> = pick(&ra, subset_seed).into_iter().map(|i| ra[i].as_slice()).collect();
        let y: Vec<&[f64]> = pick(&rb, subset_seed).into_iter().map(|i| rb[i].as_slice()).collect();
        total += mmd2_unbiased(&x, &y);
    }
    Ok(total / opts.subsets as f64)
}

pub fn kid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    kid_with(a, b, &KidOptions::default())
}

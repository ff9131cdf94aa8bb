//! Light enhancement by inverse histogram matching.
//!
//! Dark-field cells are bright on a dark background while stained bright-field
//! cells are dark on a bright background, so the dark-field illuminance CDF is
//! matched to the *reflected* bright-field CDF: a pixel at dark quantile `q`
//! maps to the bright-field intensity at quantile `1 - q`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{to_luma, GrayImage, ImageF};
use crate::scalar::Scalar;

pub const BINS: usize = 256;

/// Slack when comparing CDF values that are equal in exact arithmetic.
const CDF_TOLERANCE: f64 = 1e-13;

/// Bin index for an intensity: `[k/256, (k+1)/256)`, last bin closed at 1.
#[inline]
pub fn bin_of<T: Scalar>(v: T) -> usize {
    let k = (v.as_f64() * BINS as f64).floor();
    if k.is_nan() || k < 0.0 {
        0
    } else {
        (k as usize).min(BINS - 1)
    }
}

/// 256-bin illuminance histogram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram256 {
    counts: [u64; BINS],
    total: u64,
}

impl Default for Histogram256 {
    fn default() -> Self {
        Self {
            counts: [0; BINS],
            total: 0,
        }
    }
}

impl Histogram256 {
    pub fn from_counts(counts: [u64; BINS]) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn counts(&self) -> &[u64; BINS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Adds the luma of every pixel of `img`.
    pub fn add_image<T: Scalar>(&mut self, img: &ImageF<T>) {
        let luma = to_luma(img);
        for &v in luma.data() {
            self.counts[bin_of(v)] += 1;
        }
        self.total += luma.data().len() as u64;
    }

    /// Exact integer merge of a partial histogram.
    pub fn merge(&mut self, other: &Histogram256) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        self.total += other.total;
    }

    /// SHA-256 over the little-endian counts, identifying the source data.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.counts {
            h.update(c.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Luma histogram aggregated over a non-empty image sequence.
pub fn accumulate_histogram<T: Scalar>(images: &[ImageF<T>]) -> Result<Histogram256> {
    if images.is_empty() {
        return Err(Error::Empty("no images to histogram".into()));
    }
    Ok(images
        .par_iter()
        .map(|img| {
            let mut h = Histogram256::default();
            h.add_image(img);
            h
        })
        .reduce(Histogram256::default, |mut a, b| {
            a.merge(&b);
            a
        }))
}

/// Discrete cumulative distribution over the 256 bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Cdf {
    values: [f64; BINS],
}

impl Cdf {
    /// Validates a CDF: non-decreasing, within `[0, 1]`, terminal value exactly 1.
    pub fn new(values: [f64; BINS]) -> Result<Self> {
        if values[BINS - 1] != 1.0 {
            return Err(Error::InvalidArgument("CDF must end at 1.0".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("CDF value outside [0, 1]".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("CDF must be non-decreasing".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64; BINS] {
        &self.values
    }

    /// Smallest bin whose cumulative mass reaches `target`.
    pub fn quantile_bin(&self, target: f64) -> usize {
        let idx = self.values.partition_point(|&c| c < target - CDF_TOLERANCE);
        idx.min(BINS - 1)
    }

    /// Largest absolute difference between two CDFs over the bins.
    pub fn ks_distance(&self, other: &Cdf) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn histogram_to_cdf(h: &Histogram256) -> Result<Cdf> {
    if h.total == 0 {
        return Err(Error::Empty("histogram has zero total".into()));
    }
    let total = h.total as f64;
    let mut values = [0.0; BINS];
    let mut running = 0u64;
    for (v, &c) in values.iter_mut().zip(h.counts.iter()) {
        running += c;
        *v = running as f64 / total;
    }
    values[BINS - 1] = 1.0;
    Ok(Cdf { values })
}

/// Where the two reference histograms came from, as content digests.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LutSource {
    pub dark_digest: String,
    pub bright_digest: String,
}

/// Intensity lookup table realizing the enhancement: bin index in, intensity out.
#[derive(Clone, Debug, PartialEq)]
pub struct LutMapping {
    table: [f64; BINS],
    source: LutSource,
}

impl LutMapping {
    pub fn table(&self) -> &[f64; BINS] {
        &self.table
    }

    pub fn source(&self) -> &LutSource {
        &self.source
    }

    pub fn with_source(mut self, source: LutSource) -> Self {
        self.source = source;
        self
    }

    /// Builds a LUT from explicit entries, enforcing range and monotonicity.
    pub fn from_table(table: [f64; BINS]) -> Result<Self> {
        if table.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("LUT entry outside [0, 1]".into()));
        }
        if table.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("LUT must be non-increasing".into()));
        }
        Ok(Self {
            table,
            source: LutSource::default(),
        })
    }

    /// Aggregate-mode LUT from the two domains' training images.
    pub fn fit<T: Scalar>(dark: &[ImageF<T>], bright: &[ImageF<T>]) -> Result<Self> {
        let hd = accumulate_histogram(dark)?;
        let hb = accumulate_histogram(bright)?;
        let lut = build_staining_lut(&histogram_to_cdf(&hd)?, &histogram_to_cdf(&hb)?);
        Ok(lut.with_source(LutSource {
            dark_digest: hd.digest(),
            bright_digest: hb.digest(),
        }))
    }

    /// Per-image mode: the dark CDF comes from `x` alone.
    pub fn fit_single<T: Scalar>(x: &ImageF<T>, bright_cdf: &Cdf) -> Result<Self> {
        let h = accumulate_histogram(std::slice::from_ref(x))?;
        Ok(build_staining_lut(&histogram_to_cdf(&h)?, bright_cdf))
    }

    const HEADER: &'static str = "# stainkit-lut v1";

    /// Writes the LUT as `index<TAB>value`, one line per bin, after a header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} dark={} bright={}\n",
            Self::HEADER,
            or_dash(&self.source.dark_digest),
            or_dash(&self.source.bright_digest)
        );
        for (i, v) in self.table.iter().enumerate() {
            // `{:?}` prints the shortest representation that parses back exactly.
            writeln!(out, "{i}\t{v:?}").unwrap();
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::format(path, m))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty LUT file")?;
        let rest = header
            .strip_prefix(Self::HEADER)
            .ok_or_else(|| format!("bad header: {header}"))?;
        let mut source = LutSource::default();
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("dark", d)) => source.dark_digest = from_dash(d),
                Some(("bright", b)) => source.bright_digest = from_dash(b),
                _ => return Err(format!("bad header field: {field}")),
            }
        }
        let mut table = [0.0; BINS];
        let mut seen = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (i, v) = line
                .split_once('\t')
                .ok_or_else(|| format!("bad LUT line: {line}"))?;
            let i: usize = i.trim().parse().map_err(|_| format!("bad index: {i}"))?;
            if i != seen || i >= BINS {
                return Err(format!("index {i} out of order"));
            }
            table[i] = v.trim().parse().map_err(|_| format!("bad value: {v}"))?;
            seen += 1;
        }
        if seen != BINS {
            return Err(format!("expected {BINS} entries, found {seen}"));
        }
        Ok(Self::from_table(table).map_err(|e| e.to_string())?.with_source(source))
    }
}

fn or_dash(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

fn from_dash(s: &str) -> String {
    if s == "-" {
        String::new()
    } else {
        s.to_string()
    }
}

/// Inverse matching: `table[k] = j*/255` with `j*` the smallest bright bin
/// whose CDF reaches `1 - c_d[k]`.
pub fn build_staining_lut(c_d: &Cdf, c_b: &Cdf) -> LutMapping {
    let mut table = [0.0; BINS];
    for (k, t) in table.iter_mut().enumerate() {
        let j = c_b.quantile_bin(1.0 - c_d.values[k]);
        *t = j as f64 / (BINS - 1) as f64;
    }
    LutMapping {
        table,
        source: LutSource::default(),
    }
}

/// Applies the LUT to the luma of `x`, giving the enhanced grayscale image.
pub fn enhance<T: Scalar>(x: &ImageF<T>, lut: &LutMapping) -> GrayImage<T> {
    let luma = to_luma(x);
    let data = luma
        .data()
        .iter()
        .map(|&v| T::lit(lut.table[bin_of(v)]))
        .collect();
    GrayImage::new(x.height(), x.width(), data).expect("LUT values lie in [0, 1]")
}

/// How the dark-field reference CDF is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhanceMode {
    /// One CDF over the whole dark training split.
    #[default]
    Aggregate,
    /// A CDF per input image.
    PerImage,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_cdf() -> Cdf {
        histogram_to_cdf(&Histogram256::from_counts([1; BINS])).unwrap()
    }

    fn cdf_from_weights(w: &[f64]) -> Cdf {
        let total: f64 = w.iter().sum();
        let mut values = [0.0; BINS];
        let mut acc = 0.0;
        for (v, x) in values.iter_mut().zip(w) {
            acc += x;
            *v = (acc / total).min(1.0);
        }
        values[BINS - 1] = 1.0;
        Cdf::new(values).unwrap()
    }

    /// Brute-force generalized inverse using exact integer cross-multiplication.
    fn oracle_lut(hd: &Histogram256, hb: &Histogram256) -> [usize; BINS] {
        let (td, tb) = (hd.total() as u128, hb.total() as u128);
        let prefix = |h: &Histogram256, k: usize| h.counts()[..=k].iter().sum::<u64>() as u128;
        let mut out = [0; BINS];
        for (k, o) in out.iter_mut().enumerate() {
            // c_b[j] >= 1 - c_d[k]  <=>  pb_j * td >= (td - pd_k) * tb
            let need = (td - prefix(hd, k)) * tb;
            *o = (0..BINS).find(|&j| prefix(hb, j) * td >= need).unwrap();
        }
        out
    }

    #[test]
    fn histogram_edges() {
        let img = ImageF::<f64>::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let h = accumulate_histogram(&[img]).unwrap();
        assert_eq!(h.counts()[0], 1);
        assert_eq!(h.counts()[255], 1);
        assert_eq!(h.total(), 2);
        assert_eq!(h.counts().iter().sum::<u64>(), 2);

        let half = ImageF::<f32>::filled(3, 5, 1, 0.5).unwrap();
        let h = accumulate_histogram(&[half]).unwrap();
        assert_eq!(h.counts()[128], 15);
        assert!(accumulate_histogram::<f32>(&[]).is_err());
    }

    #[test]
    fn histogram_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs: Vec<ImageF<f64>> = (0..3)
            .map(|_| ImageF::from_fn(19, 23, 3, |_, _, _| rng.random::<f64>()).unwrap())
            .collect();
        let h = accumulate_histogram(&imgs).unwrap();
        let mut naive = [0u64; BINS];
        for img in &imgs {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let l = 0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x);
                    let l = l.clamp(0.0, 1.0);
                    naive[((l * 256.0).floor() as usize).min(255)] += 1;
                }
            }
        }
        assert_eq!(h.counts(), &naive);
        assert_eq!(h.total(), 3 * 19 * 23);
    }

    #[test]
    fn cdf_cases() {
        let u = uniform_cdf();
        for k in 0..BINS {
            assert!((u.values()[k] - (k + 1) as f64 / 256.0).abs() < 1e-15);
        }
        let mut counts = [0; BINS];
        counts[0] = 9;
        let c = histogram_to_cdf(&Histogram256::from_counts(counts)).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.0));
        assert!(histogram_to_cdf(&Histogram256::default()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0u64; BINS];
        counts.iter_mut().for_each(|c| *c = rng.random_range(0..1000));
        let h = Histogram256::from_counts(counts);
        let cdf = histogram_to_cdf(&h).unwrap();
        let mut acc = 0u64;
        for k in 0..BINS {
            acc += counts[k];
            assert!((cdf.values()[k] - acc as f64 / h.total() as f64).abs() < 1e-9);
        }
        assert_eq!(cdf.values()[255], 1.0);
    }

    #[test]
    fn uniform_inversion() {
        let lut = build_staining_lut(&uniform_cdf(), &uniform_cdf());
        let u = Histogram256::from_counts([1; BINS]);
        let oracle = oracle_lut(&u, &u);
        for k in 0..BINS {
            assert_eq!(lut.table()[k], oracle[k] as f64 / 255.0);
            assert!((lut.table()[k] - (1.0 - k as f64 / 255.0)).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn four_bin_toy() {
        let mut dark = [0u64; BINS];
        dark[0] = 1;
        dark[1] = 1;
        let mut bright = [0u64; BINS];
        bright[..4].fill(1);
        let (hd, hb) = (Histogram256::from_counts(dark), Histogram256::from_counts(bright));
        let lut = build_staining_lut(&histogram_to_cdf(&hd).unwrap(), &histogram_to_cdf(&hb).unwrap());
        assert_eq!(lut.table()[0], 1.0 / 255.0);
        assert_eq!(lut.table()[1], 0.0);
        let oracle = oracle_lut(&hd, &hb);
        for k in 0..BINS {
            assert_eq!(lut.table()[k], oracle[k] as f64 / 255.0);
        }
    }

    #[test]
    fn lut_matches_exact_oracle_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let mut d = [0u64; BINS];
            let mut b = [0u64; BINS];
            // sparse histograms exercise flat CDF regions
            d.iter_mut().for_each(|c| *c = if rng.random_bool(0.3) { rng.random_range(0..500) } else { 0 });
            b.iter_mut().for_each(|c| *c = if rng.random_bool(0.3) { rng.random_range(0..500) } else { 0 });
            d[rng.random_range(0..BINS)] += 1;
            b[rng.random_range(0..BINS)] += 1;
            let (hd, hb) = (Histogram256::from_counts(d), Histogram256::from_counts(b));
            let lut = build_staining_lut(&histogram_to_cdf(&hd).unwrap(), &histogram_to_cdf(&hb).unwrap());
            let oracle = oracle_lut(&hd, &hb);
            for k in 0..BINS {
                assert_eq!(lut.table()[k], oracle[k] as f64 / 255.0, "bin {k}");
            }
        }
    }

    #[test]
    fn enhance_cases() {
        let lut = build_staining_lut(&uniform_cdf(), &uniform_cdf());
        let black = ImageF::<f32>::zeros(4, 4, 1).unwrap();
        let z = enhance(&black, &lut);
        assert!(z.data().iter().all(|&v| (v - 1.0).abs() <= 1.0 / 255.0 + 1e-6));
        assert_eq!(enhance(&black, &lut), z);

        // 8-bit valued random input: output is 1 - luma within one code value
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = ImageF::<f64>::from_fn(16, 16, 1, |_, _, _| rng.random_range(0..=255u8) as f64 / 255.0).unwrap();
        let z = enhance(&x, &lut);
        for (a, b) in x.data().iter().zip(z.data()) {
            assert!(((1.0 - a) - b).abs() <= 1.0 / 255.0 + 1e-12, "{a} -> {b}");
        }
    }

    #[test]
    fn lut_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cd = cdf_from_weights(&(0..BINS).map(|i| 1.0 + (i as f64 * 0.1).sin().abs()).collect::<Vec<_>>());
        let lut = build_staining_lut(&cd, &uniform_cdf()).with_source(LutSource {
            dark_digest: "ab".into(),
            bright_digest: "cd".into(),
        });
        let p = dir.path().join("lut.tsv");
        lut.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 257);
        let back = LutMapping::load(&p).unwrap();
        assert_eq!(back, lut);
        assert!(LutMapping::parse("# stainkit-lut v1\n0\t0.5\n").is_err());
    }

    #[test]
    fn distribution_matching_continuous_sample() {
        // dark intensities ~ Beta-like continuous law, bright ~ another one
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 200_000;
        let dark: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powf(2.5)).collect();
        let bright: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>().powf(3.0) * 0.8).collect();
        let xd = ImageF::new(1, n, 1, dark).unwrap();
        let xb = ImageF::new(1, n, 1, bright).unwrap();
        let lut = LutMapping::fit(std::slice::from_ref(&xd), std::slice::from_ref(&xb)).unwrap();
        let z = enhance(&xd, &lut);
        let cz = histogram_to_cdf(&accumulate_histogram(&[z.into_inner()]).unwrap()).unwrap();
        let cb = histogram_to_cdf(&accumulate_histogram(&[xb]).unwrap()).unwrap();
        let ks = cz.ks_distance(&cb);
        assert!(ks < 0.02, "ks = {ks}");
    }

    proptest! {
        #[test]
        fn lut_non_increasing(
            wd in proptest::collection::vec(0.0f64..1.0, BINS),
            wb in proptest::collection::vec(0.0f64..1.0, BINS),
        ) {
            prop_assume!(wd.iter().sum::<f64>() > 0.0 && wb.iter().sum::<f64>() > 0.0);
            let lut = build_staining_lut(&cdf_from_weights(&wd), &cdf_from_weights(&wb));
            prop_assert!(lut.table().windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(lut.table().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn double_matching_recovers_identity(
            wd in proptest::collection::vec(0.5f64..1.5, BINS),
            wb in proptest::collection::vec(0.5f64..1.5, BINS),
        ) {
            let (cd, cb) = (cdf_from_weights(&wd), cdf_from_weights(&wb));
            let forward = build_staining_lut(&cd, &cb);
            let backward = build_staining_lut(&cb, &cd);
            for k in 0..BINS {
                let j = (forward.table()[k] * 255.0).round() as usize;
                let back = backward.table()[j];
                prop_assert!((back - k as f64 / 255.0).abs() <= 2.0 / 255.0 + 1e-12, "k={} back={}", k, back * 255.0);
            }
        }

        #[test]
        fn partial_histograms_merge_exactly(split in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(split as u64);
            let imgs: Vec<ImageF<f32>> = (0..4)
                .map(|_| ImageF::from_fn(5, 7, 1, |_, _, _| rng.random::<f32>()).unwrap())
                .collect();
            let mut merged = accumulate_histogram(&imgs[..split]).unwrap();
            merged.merge(&accumulate_histogram(&imgs[split..]).unwrap());
            prop_assert_eq!(merged, accumulate_histogram(&imgs).unwrap());
        }
    }
}

//! Float raster images, PNG I/O and the luma/grayscale primitives.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::Deref;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rec.601 luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Floating point image with intensities in `[0, 1]`, stored channel-major
/// (all of channel 0, then channel 1, ...). Three-channel images are R, G, B.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageF<T> {
    /// Builds an image, validating channel count, length and value range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} image needs {} values, got {}",
                channels,
                height,
                width,
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::InvalidArgument(format!(
                "intensity {bad:?} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Like [`ImageF::new`] but clamps every value into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let data = data.into_iter().map(clamp01).collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, T::zero())
    }

    /// Builds an image from `f(channel, row, col)`, clamping into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sets one value, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let idx = (c * self.height + y) * self.width + x;
        self.data[idx] = clamp01(v);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn cast<U: Scalar>(&self) -> ImageF<U> {
        ImageF {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Replicates a single channel three times; 3-channel images are cloned.
    pub fn to_rgb(&self) -> ImageF<T> {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImageF {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Copies a `h x w` window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Geometry(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, self.channels, |c, y, x| self.get(c, y0 + y, x0 + x)).unwrap())
    }

    pub fn mean(&self) -> T {
        let sum: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        T::lit(sum / self.data.len() as f64)
    }
}

#[inline]
pub(crate) fn clamp01<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        T::zero()
    } else {
        v.max(T::zero()).min(T::one())
    }
}

/// A single-channel [`ImageF`].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage<T>(ImageF<T>);

impl<T: Scalar> GrayImage<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        ImageF::new(height, width, 1, data).map(GrayImage)
    }

    pub fn into_inner(self) -> ImageF<T> {
        self.0
    }

    pub fn as_image(&self) -> &ImageF<T> {
        &self.0
    }
}

impl<T: Scalar> TryFrom<ImageF<T>> for GrayImage<T> {
    type Error = Error;

    fn try_from(img: ImageF<T>) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected a 1-channel image, got {} channels",
                img.channels
            )));
        }
        Ok(GrayImage(img))
    }
}

impl<T> Deref for GrayImage<T> {
    type Target = ImageF<T>;

    fn deref(&self) -> &ImageF<T> {
        &self.0
    }
}

/// Rec.601 luma of one RGB triple, clamped into `[0, 1]`.
#[inline]
pub fn luma<T: Scalar>(r: T, g: T, b: T) -> T {
    let y = T::lit(LUMA_WEIGHTS[0]) * r + T::lit(LUMA_WEIGHTS[1]) * g + T::lit(LUMA_WEIGHTS[2]) * b;
    clamp01(y)
}

/// Illuminance of an image: identity copy for gray input, Rec.601 luma for RGB.
pub fn to_luma<T: Scalar>(img: &ImageF<T>) -> GrayImage<T> {
    if img.channels == 1 {
        return GrayImage(img.clone());
    }
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| luma(r, g, b))
        .collect();
    GrayImage(ImageF {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    })
}

/// Synthetic teacher training pair `(gray input, color target)` made by
/// removing the color of a stained bright-field image.
pub fn gray_pair_from_stained<T: Scalar>(bright: &ImageF<T>) -> Result<(GrayImage<T>, ImageF<T>)> {
    if bright.channels != 3 {
        return Err(Error::InvalidArgument(
            "stained image must have 3 channels to form a colorization pair".into(),
        ));
    }
    Ok((to_luma(bright), bright.clone()))
}

/// Reads an 8- or 16-bit grayscale or RGB PNG, scaling intensities into `[0, 1]`.
///
/// Palette and sub-byte images are expanded; an alpha channel is dropped.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageF<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage);
    }
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
    };
    let bytes = &buf[..info.buffer_size()];
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => return Err(Error::UnsupportedFormat(format!("bit depth {other:?}"))),
    };
    let plane = width * height;
    let mut data = vec![T::zero(); plane * keep];
    for (p, px) in samples.chunks_exact(src_channels).enumerate().take(plane) {
        for c in 0..keep {
            data[c * plane + p] = T::lit(px[c]);
        }
    }
    ImageF::new(height, width, keep, data)
}

/// Quantizes one intensity to a byte, `round(v * 255)` with halves rounding up.
#[inline]
pub fn quantize_u8<T: Scalar>(v: T) -> u8 {
    let v = clamp01(v).as_f64();
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Writes an 8-bit grayscale or RGB PNG.
pub fn save_image<T: Scalar>(img: &ImageF<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    let plane = img.pixel_count();
    let mut bytes = Vec::with_capacity(img.data.len());
    for p in 0..plane {
        for c in 0..img.channels {
            bytes.push(quantize_u8(img.data[c * plane + p]));
        }
    }
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Two unpaired image collections: unstained dark-field and stained bright-field.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnpairedDataset {
    pub dark_paths: Vec<PathBuf>,
    pub bright_paths: Vec<PathBuf>,
}

const DARK_SECTION: &str = "[dark]";
const BRIGHT_SECTION: &str = "[bright]";

impl UnpairedDataset {
    pub fn new(dark_paths: Vec<PathBuf>, bright_paths: Vec<PathBuf>) -> Result<Self> {
        if let Some(p) = dark_paths.iter().find(|p| bright_paths.contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "{} appears in both subsets",
                p.display()
            )));
        }
        Ok(Self {
            dark_paths,
            bright_paths,
        })
    }

    /// Scans two directories non-recursively for `*.png`, in lexicographic order.
    pub fn from_dirs(dark_dir: impl AsRef<Path>, bright_dir: impl AsRef<Path>) -> Result<Self> {
        Self::new(list_pngs(dark_dir.as_ref())?, list_pngs(bright_dir.as_ref())?)
    }

    /// Reads a manifest with `[dark]` and `[bright]` sections, one path per line.
    /// Relative paths resolve against the manifest's directory.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let (mut dark, mut bright) = (Vec::new(), Vec::new());
        let mut section: Option<bool> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                DARK_SECTION => section = Some(true),
                BRIGHT_SECTION => section = Some(false),
                entry => {
                    let list = match section {
                        Some(true) => &mut dark,
                        Some(false) => &mut bright,
                        None => {
                            return Err(Error::format(
                                path,
                                format!("line {}: path before any section header", lineno + 1),
                            ))
                        }
                    };
                    let p = Path::new(entry);
                    list.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
                }
            }
        }
        Self::new(dark, bright)
    }

    /// Writes a manifest readable by [`UnpairedDataset::from_manifest`], with
    /// paths made relative to the manifest directory where possible.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &PathBuf| {
            p.strip_prefix(base)
                .map(|r| r.to_path_buf())
                .unwrap_or_else(|_| p.clone())
        };
        let mut out = String::new();
        out.push_str(DARK_SECTION);
        out.push('\n');
        for p in &self.dark_paths {
            out.push_str(&format!("{}\n", rel(p).display()));
        }
        out.push_str(BRIGHT_SECTION);
        out.push('\n');
        for p in &self.bright_paths {
            out.push_str(&format!("{}\n", rel(p).display()));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Both subsets must be non-empty to train.
    pub fn check_trainable(&self) -> Result<()> {
        if self.dark_paths.is_empty() {
            return Err(Error::Empty("dark-field subset".into()));
        }
        if self.bright_paths.is_empty() {
            return Err(Error::Empty("bright-field subset".into()));
        }
        Ok(())
    }
}

/// Lists `*.png` files of a directory, sorted lexicographically.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file()
            && p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_all<T: Scalar>(paths: &[PathBuf]) -> Result<Vec<ImageF<T>>> {
    paths.iter().map(load_image).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) {
        let f = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(f), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(data).unwrap();
        wr.finish().unwrap();
    }

    #[test]
    fn load_rgb_scales_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("px.png");
        write_png(&p, 1, 1, png::ColorType::Rgb, png::BitDepth::Eight, &[255, 0, 128]);
        let img: ImageF<f64> = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn load_black_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        write_png(&p, 4, 3, png::ColorType::Grayscale, png::BitDepth::Eight, &[0; 12]);
        let img: ImageF<f32> = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (3, 4, 1));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        write_png(&p, 2, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[0xff, 0xff, 0x80, 0x00]);
        let img: ImageF<f64> = load_image(&p).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert!((img.data()[1] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image::<f32>(dir.path().join("nope.png")),
            Err(Error::Io { .. })
        ));
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image::<f32>(&p), Err(Error::Decode { .. })));
    }

    #[test]
    fn quantization_cells() {
        assert_eq!(quantize_u8(0.0f64), 0);
        assert_eq!(quantize_u8(1.0f64), 255);
        assert_eq!(quantize_u8(0.5f64), 128);
        // Every value in cell [(b-0.5)/255, (b+0.5)/255) maps to its nearest byte b.
        for b in 0..=255u32 {
            let center = b as f64 / 255.0;
            let lo = ((b as f64 - 0.5) / 255.0 + 1e-12).max(0.0);
            let hi = ((b as f64 + 0.5) / 255.0 - 1e-12).min(1.0);
            for v in [lo, center, hi] {
                let q = quantize_u8(v);
                assert_eq!(q as u32, b, "v={v}");
                let nearest = (0..=255u32)
                    .min_by(|&i, &j| {
                        let di = (i as f64 / 255.0 - v).abs();
                        let dj = (j as f64 / 255.0 - v).abs();
                        di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
                    })
                    .unwrap();
                assert_eq!(q as u32, nearest);
            }
        }
    }

    #[test]
    fn round_trip_random_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (i, (ch, color)) in [(1usize, png::ColorType::Grayscale), (3, png::ColorType::Rgb)]
            .into_iter()
            .enumerate()
        {
            let (w, h) = (13, 9);
            let bytes: Vec<u8> = (0..w * h * ch).map(|_| rng.random()).collect();
            let src = dir.path().join(format!("src{i}.png"));
            let dst = dir.path().join(format!("dst{i}.png"));
            write_png(&src, w as u32, h as u32, color, png::BitDepth::Eight, &bytes);
            let img: ImageF<f32> = load_image(&src).unwrap();
            save_image(&img, &dst).unwrap();
            let mut dec = png::Decoder::new(BufReader::new(File::open(&dst).unwrap()))
                .read_info()
                .unwrap();
            let mut buf = vec![0u8; dec.output_buffer_size().unwrap()];
            let info = dec.next_frame(&mut buf).unwrap();
            assert_eq!(&buf[..info.buffer_size()], &bytes[..]);
        }
    }

    #[test]
    fn luma_definition() {
        let white = ImageF::<f64>::filled(2, 2, 3, 1.0).unwrap();
        assert!(to_luma(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let red = ImageF::<f64>::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_luma(&red).data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn luma_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageF::<f32>::from_fn(17, 11, 3, |_, _, _| rng.random::<f32>()).unwrap();
        let y = to_luma(&img);
        for row in 0..17 {
            for col in 0..11 {
                let oracle = 0.299 * img.get(0, row, col) as f64
                    + 0.587 * img.get(1, row, col) as f64
                    + 0.114 * img.get(2, row, col) as f64;
                assert!((y.get(0, row, col) as f64 - oracle).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gray_pair_rules() {
        let pink = ImageF::<f64>::from_fn(3, 3, 3, |c, _, _| [0.9, 0.6, 0.8][c]).unwrap();
        let (gray, target) = gray_pair_from_stained(&pink).unwrap();
        assert_eq!(target, pink);
        let expect = 0.299 * 0.9 + 0.587 * 0.6 + 0.114 * 0.8;
        assert!(gray.data().iter().all(|&v| (v - expect).abs() < 1e-12));
        assert_eq!(gray, to_luma(&pink));

        let neutral = ImageF::<f64>::filled(2, 2, 3, 0.4).unwrap();
        let (g, _) = gray_pair_from_stained(&neutral).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));

        let mono = ImageF::<f64>::zeros(2, 2, 1).unwrap();
        assert!(gray_pair_from_stained(&mono).is_err());
    }

    #[test]
    fn invalid_images_rejected() {
        assert!(ImageF::<f32>::new(0, 3, 1, vec![]).is_err());
        assert!(ImageF::<f32>::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(ImageF::<f32>::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageF::<f32>::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = UnpairedDataset::new(
            vec![dir.path().join("dark/a.png"), dir.path().join("dark/b.png")],
            vec![dir.path().join("bright/c.png")],
        )
        .unwrap();
        let m = dir.path().join("dataset.txt");
        ds.write_manifest(&m).unwrap();
        assert_eq!(UnpairedDataset::from_manifest(&m).unwrap(), ds);
        assert!(UnpairedDataset::new(vec!["x.png".into()], vec!["x.png".into()]).is_err());
        assert!(UnpairedDataset::default().check_trainable().is_err());
    }

    proptest! {
        #[test]
        fn luma_in_unit_range_and_idempotent(vals in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let img = ImageF::new(2, 2, 3, vals).unwrap();
            let y = to_luma(&img);
            prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let again = to_luma(y.as_image());
            prop_assert_eq!(again, y);
        }
    }
}

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{save_image, ImageF};
use crate::scalar::Scalar;

/// Tiles same-sized images into rows of `cols`, converting gray to RGB.
pub fn image_grid<T: Scalar>(tiles: &[ImageF<T>], cols: usize) -> Result<ImageF<T>> {
    let first = tiles.first().ok_or_else(|| Error::Empty("no grid tiles".into()))?;
    let (h, w) = (first.height(), first.width());
    if tiles.iter().any(|t| t.height() != h || t.width() != w) {
        return Err(Error::ShapeMismatch("grid tiles differ in size".into()));
    }
    let rgb: Vec<ImageF<T>> = tiles.iter().map(|t| t.to_rgb()).collect();
    let rows = tiles.len().div_ceil(cols);
    ImageF::from_fn(rows * h, cols * w, 3, |c, y, x| {
        rgb.get((y / h) * cols + x / w)
            .map(|t| t.get(c, y % h, x % w))
            .unwrap_or(T::zero())
    })
}

pub fn flip<T: Scalar>(img: &ImageF<T>, horizontal: bool, vertical: bool) -> ImageF<T> {
    if !horizontal && !vertical {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    ImageF::from_fn(h, w, img.channels(), |c, y, x| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        img.get(c, sy, sx)
    })
    .expect("same shape")
}

/// Mirror-pads the bottom and right edges up to multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(img: &ImageF<T>, m: usize) -> ImageF<T> {
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mirror = |i: usize, n: usize| {
        // reflect without repeating the edge, folding as often as needed
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    ImageF::from_fn(ph, pw, img.channels(), |c, y, x| img.get(c, mirror(y, h), mirror(x, w))).expect("valid size")
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_grid<T: Scalar>(tiles: &[ImageF<T>], cols: usize, path: &Path) -> Result<()> {
    save_image(&image_grid(tiles, cols)?, path)
}

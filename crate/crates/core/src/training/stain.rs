use super::artifacts::pad_to_multiple;
use crate::enhance::{enhance, LutMapping};
use crate::error::Result;
use crate::image::ImageF;
use crate::networks::{Generator, Network};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// `G(H(x))`: enhances `x` with the LUT and colorizes it with the student.
/// Inputs whose size is not a multiple of the generator's stride are
/// mirror-padded and the output cropped back.
pub fn stain<T: Scalar>(x: &ImageF<T>, lut: &LutMapping, student: &Generator<T>) -> Result<ImageF<T>> {
    let z = enhance(x, lut).into_inner();
    let padded = pad_to_multiple(&z, student.size_multiple());
    let y = student.infer(&Tensor::from_image(&padded))?;
    let y = y.to_images()?.pop().expect("one image");
    y.crop(0, 0, x.height(), x.width())
}

pub fn stain_batch<T: Scalar>(xs: &[ImageF<T>], lut: &LutMapping, student: &Generator<T>) -> Result<Vec<ImageF<T>>> {
    xs.iter().map(|x| stain(x, lut, student)).collect()
}

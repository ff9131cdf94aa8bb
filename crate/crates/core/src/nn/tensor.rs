use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::scalar::Scalar;

/// `N x C x H x W` extent. Scalars are `1 x 1 x 1 x 1`; convolution weights
/// use `out x in x k x k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per batch sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major 4-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::SCALAR, v)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensor needs {} values, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks same-sized images into a batch.
    pub fn from_images(images: &[ImageF<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("no images to batch".into()))?;
        if let Some(bad) = images.iter().find(|i| !i.same_shape(first)) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {}x{}x{} and {}x{}x{} images",
                first.channels(),
                first.height(),
                first.width(),
                bad.channels(),
                bad.height(),
                bad.width()
            )));
        }
        let shape = Shape::new(images.len(), first.channels(), first.height(), first.width());
        let mut data = Vec::with_capacity(shape.numel());
        for img in images {
            data.extend_from_slice(img.data());
        }
        Ok(Self { shape, data })
    }

    pub fn from_image(image: &ImageF<T>) -> Self {
        Self::from_images(std::slice::from_ref(image)).expect("single image batch")
    }

    /// Splits a batch back into images, clamping into `[0, 1]`.
    pub fn to_images(&self) -> Result<Vec<ImageF<T>>> {
        let s = self.shape;
        (0..s.n)
            .map(|n| ImageF::from_clamped(s.h, s.w, s.c, self.sample(n).to_vec()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

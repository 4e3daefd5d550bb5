use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar RGB image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::invalid(
                "image",
                format!("{}x{} RGB needs {} values, got {}", width, height, 3 * width * height, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; 3 * width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn clamped(&self) -> Self {
        Self { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..*self }
    }

    /// Window of `w×h` starting at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::invalid(
                "crop",
                format!("{w}x{h} window at ({x}, {y}) exceeds {}x{}", self.width, self.height),
            ));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for row in y..y + h {
                let start = self.index(c, row, x);
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Self::new(w, h, data)
    }

    /// Extends right and bottom edges by replication up to multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.get(c, y.min(self.height - 1), x.min(self.width - 1)));
                }
            }
        }
        Self { width: w, height: h, data }
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.iter().map(|&v| T::lit(v as f64)).collect())
            .expect("image buffer matches its extents")
    }

    /// Image `n` of an `[N, 3, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.dims4()?;
        if c != 3 || n >= batch {
            return Err(Error::invalid("image", format!("cannot take image {n} of {:?}", t.shape())));
        }
        let plane = 3 * h * w;
        let data = t.data()[n * plane..(n + 1) * plane].iter().map(|v| v.as_f64() as f32).collect();
        Self::new(w, h, data)
    }
}

/// Stacks equally sized images into `[N, 3, H, W]`.
pub fn stack<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("stack", "no images"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::ShapeMismatch { op: "stack", lhs: vec![h, w], rhs: vec![img.height, img.width] });
        }
        data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

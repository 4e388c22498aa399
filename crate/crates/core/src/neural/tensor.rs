use crate::error::{invalid, Result};
use crate::tomo::Image;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    /// Single-channel `[1, H, W]` tensor.
    pub fn from_image(img: &Image) -> Self {
        Self { shape: vec![1, img.height(), img.width()], data: img.data().to_vec() }
    }

    /// Inverse of [`Tensor::from_image`]; the tensor must be `[1, H, W]`.
    pub fn to_image(&self) -> Result<Image> {
        match self.shape[..] {
            [1, h, w] => Image::from_vec(h, w, self.data.clone()),
            _ => invalid(format!("expected a [1, H, W] tensor, got {:?}", self.shape)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

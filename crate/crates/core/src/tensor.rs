//! Dense real and complex grids used throughout the crate.
//!
//! [`Tensor`] is the untyped n-dimensional container the autodiff tape and
//! the parameter store work with. [`Field2D`], [`LatentTensor`] and
//! [`Spectrum2D`] are the validated domain views.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

/// Row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid_input(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(invalid_input(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, shapes must agree.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Real H×W grid: velocity maps, readout fields, mask planes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field2D {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Field2D {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(invalid_input(format!("field must be at least 2x2, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(invalid_input(format!(
                "{h}x{w} field needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid_input(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self::new(h, w, data)
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(h, w, vec![value; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.h, self.w], data: self.data.clone() }
    }

    /// Accepts `[H, W]` or `[1, H, W]` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] | [1, h, w] => Self::new(*h, *w, t.data().to_vec()),
            s => Err(invalid_input(format!("expected a 2D field, got shape {s:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Field2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Real C×H×W stack of feature planes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid_input(format!("latent dims must be positive, got {c}x{h}x{w}")));
        }
        if data.len() != c * h * w {
            return Err(invalid_input(format!(
                "{c}x{h}x{w} latent needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid_input("latent tensor contains non-finite values"));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_field(f: &Field2D) -> Self {
        Self { c: 1, h: f.height(), w: f.width(), data: f.data().to_vec() }
    }

    pub fn from_planes(planes: &[Field2D]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| invalid_input("no planes"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.dims() != (h, w) {
                return Err(invalid_input("planes differ in shape"));
            }
            data.extend_from_slice(p.data());
        }
        Self::new(planes.len(), h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_field(&self, c: usize) -> Result<Field2D> {
        Field2D::new(self.h, self.w, self.plane(c).to_vec())
    }

    /// Mean over channels; the linear readout used by the spectral theory.
    pub fn channel_mean(&self) -> Result<Field2D> {
        let n = self.h * self.w;
        let mut out = vec![0.0; n];
        for c in 0..self.c {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.c as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Field2D::new(self.h, self.w, out)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.c, self.h, self.w], data: self.data.clone() }
    }

    /// Accepts `[C, H, W]` or `[H, W]` (treated as one channel).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] => Self::new(*c, *h, *w, t.data().to_vec()),
            [h, w] => Self::new(1, *h, *w, t.data().to_vec()),
            s => Err(invalid_input(format!("expected a C×H×W tensor, got shape {s:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Complex H×W spectrum with the zero frequency at `(H/2, W/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2D {
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

impl Spectrum2D {
    pub fn new(h: usize, w: usize, data: Vec<Complex64>) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(invalid_input(format!("spectrum must be at least 2x2, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(invalid_input(format!(
                "{h}x{w} spectrum needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.w + j]
    }

    /// Index of the zero-frequency bin.
    pub fn center(&self) -> (usize, usize) {
        (self.h / 2, self.w / 2)
    }

    /// Power spectrum `|û|²` as a field.
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn magnitude(&self) -> Field2D {
        Field2D {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }
}

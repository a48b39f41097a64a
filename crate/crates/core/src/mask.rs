use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Binary `h×w` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return dim_err(format!("mask {h}x{w} with {} cells", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![true; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Self { h, w, data }
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn complement(&self) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|&b| !b).collect() }
    }

    /// Nearest-neighbour resampling, sampling each target cell at its centre.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        Self::from_fn(oh, ow, |y, x| {
            let sy = ((2 * y + 1) * self.h) / (2 * oh);
            let sx = ((2 * x + 1) * self.w) / (2 * ow);
            self.get(sy.min(self.h - 1), sx.min(self.w - 1))
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.h, self.w], data).expect("mask dims")
    }

    /// Mask of strictly positive entries of an `h×w` (or `1×h×w`) tensor.
    pub fn from_positive<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            ref s => return dim_err(format!("cannot threshold shape {s:?} into a mask")),
        };
        Self::new(h, w, t.data().iter().map(|&v| v > T::zero()).collect())
    }

    pub fn intersection(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn union(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count()
    }
}

//! Named flat views over model tensors. Everything that walks all parameters
//! (optimizer, checkpoints, gradient checks) goes through them.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A tensor borrowed by name together with its logical shape.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    /// Called after every optimizer update.
    fn bump_version(&mut self) {}

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// `self += other`. Both sides must have the same tensor layout.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }
}

pub(crate) fn mat_ref<'a>(name: impl Into<String>, a: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are kept in standard layout"),
    }
}

pub(crate) fn vec_ref<'a>(name: impl Into<String>, a: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.into(),
        shape: vec![a.len()],
        data: a.as_slice().expect("parameters are kept in standard layout"),
    }
}

pub(crate) fn mat_mut<'a>(name: impl Into<String>, a: &'a mut Array2<f64>) -> TensorMut<'a> {
    TensorMut {
        name: name.into(),
        data: a.as_slice_mut().expect("parameters are kept in standard layout"),
    }
}

pub(crate) fn vec_mut<'a>(name: impl Into<String>, a: &'a mut Array1<f64>) -> TensorMut<'a> {
    TensorMut {
        name: name.into(),
        data: a.as_slice_mut().expect("parameters are kept in standard layout"),
    }
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) resampled until within two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || truncated_normal(rng, INIT_STD))
}

pub fn init_vector<R: Rng>(rng: &mut R, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || truncated_normal(rng, INIT_STD))
}

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect(),
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn data(&self, idx: usize) -> &[T] {
        &self.entries[idx].1.data
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.entries[idx].1.data
    }

    /// Disjoint mutable views of several tensors; `idx` must be strictly
    /// increasing.
    pub fn many_mut<const K: usize>(&mut self, idx: [usize; K]) -> [&mut [T]; K] {
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "indices must be strictly increasing");
        let mut out: Vec<&mut [T]> = Vec::with_capacity(K);
        let mut want = idx.iter().peekable();
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            if want.peek() == Some(&&i) {
                want.next();
                out.push(&mut t.data);
            }
        }
        match out.try_into() {
            Ok(arr) => arr,
            Err(_) => panic!("parameter index out of range"),
        }
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].1
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|&v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    /// `self += other`, in order.
    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x = *x + y);
        }
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb || a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {na} {:?} vs {nb} {:?}",
                    a.shape, b.shape
                )));
            }
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    /// Flattened values in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::from_f64_lossy(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::from_f64_lossy(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for (((p, g), m), v) in params
            .entries
            .iter_mut()
            .zip(&grads.entries)
            .zip(&mut self.m.entries)
            .zip(&mut self.v.entries)
        {
            for (((pv, &gv), mv), vv) in p.1.data.iter_mut().zip(&g.1.data).zip(&mut m.1.data).zip(&mut v.1.data) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv * c1;
                let vhat = *vv * c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_norm() {
        let mut g = ParamSet::<f64>::default();
        g.push("a", Tensor { shape: vec![2], data: vec![3.0, 4.0] });
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 5.0), g.global_norm());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::<f64>::default();
        p.push("w", Tensor { shape: vec![2], data: vec![1.0, -1.0] });
        let mut g = p.zeros_like();
        g.data_mut(0).copy_from_slice(&[0.5, -2.0]);
        let mut opt = Adam::new(&p, 0.01);
        opt.update(&mut p, &g);
        assert!((p.data(0)[0] - 0.99).abs() < 1e-9);
        assert!((p.data(0)[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn copy_requires_matching_layout() {
        let mut a = ParamSet::<f32>::default();
        a.push("w", Tensor::zeros(&[2, 3]));
        let mut b = ParamSet::<f32>::default();
        b.push("w", Tensor::zeros(&[3, 2]));
        assert!(a.copy_from(&b).is_err());
    }
}

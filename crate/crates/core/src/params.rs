//! Named parameter tensors, initialization, and the AdamW optimizer.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered map from hierarchical parameter name (`img.enc.l0.attn.q.w`) to tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Array2<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<T>> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|e| U::lit(e.as_f64()))))
                .collect(),
        }
    }

    /// Errors unless both stores hold the same names with the same shapes.
    pub fn check_same_structure(&self, other: &ParamStore<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Structure(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.dim() == t.dim() => {}
                Some(o) => {
                    return Err(Error::Structure(format!(
                        "`{name}` has shape {:?} vs {:?}",
                        t.dim(),
                        o.dim()
                    )))
                }
                None => return Err(Error::Structure(format!("`{name}` missing"))),
            }
        }
        Ok(())
    }

    /// Copies tensors whose names start with `from` into names starting with `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<_> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone())))
            .collect();
        for (k, v) in copies {
            self.tensors.insert(k, v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|e| e.is_finite()))
    }
}

/// Initialization scheme for a new tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation, redrawn outside two deviations.
    TruncNormal(f64),
}

impl Init {
    pub fn build<T: Scalar, R: Rng>(self, rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
        match self {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Const(c) => Array2::from_elem((rows, cols), T::lit(c)),
            Init::TruncNormal(std) => Array2::from_shape_simple_fn((rows, cols), || {
                loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        return T::lit(z * std);
                    }
                }
            }),
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// Weight decay applies to matrices named `*.w` only.
    fn decays(name: &str) -> bool {
        name.ends_with(".w")
    }

    /// Applies one update to every parameter that has a gradient and passes
    /// `trainable`. Parameters without a gradient are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Array2<T>>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !trainable(name) {
                continue;
            }
            let m = self.m.tensors.entry(name.to_string()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.tensors.entry(name.to_string()).or_insert_with(|| Array2::zeros(g.dim()));
            if Self::decays(name) {
                p.mapv_inplace(|e| e * decay);
            }
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Array2<f64> = Init::TruncNormal(0.02).build(50, 50, &mut rng);
        assert!(w.iter().all(|e| e.abs() <= 0.04));
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("a.b", array![[1.0, -1.0]]);
        let mut grads = IndexMap::new();
        grads.insert("a.b".to_string(), array![[0.5, -2.0]]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.update(&mut ps, &grads, |_| true);
        let p = ps.get("a.b").unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("x.w", array![[1.0f32]]);
        let before = ps.clone();
        let mut grads = IndexMap::new();
        grads.insert("x.w".to_string(), array![[1.0f32]]);
        AdamW::new(0.1, 0.1).update(&mut ps, &grads, |n| !n.starts_with("x."));
        assert_eq!(ps, before);
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let mut a = ParamStore::<f64>::new();
        a.insert("w", Array2::zeros((2, 2)));
        let mut b = a.clone();
        assert!(a.check_same_structure(&b).is_ok());
        b.insert("w", Array2::zeros((2, 3)));
        assert!(a.check_same_structure(&b).is_err());
    }
}

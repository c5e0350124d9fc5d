//! Bounded FIFO feature stores and momentum parameter averaging.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Stored vectors must have unit L2 norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Ring buffer of unit-norm features with parallel record ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue<T> {
    capacity: usize,
    vectors: Array2<T>,
    ids: Vec<u64>,
    stamps: Vec<u64>,
    count: usize,
    cursor: usize,
    next_stamp: u64,
}

impl<T: Scalar> FeatureQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            vectors: Array2::zeros((capacity, dim)),
            ids: vec![0; capacity],
            stamps: vec![0; capacity],
            count: 0,
            cursor: 0,
            next_stamp: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Overwrites the oldest entries. Rejects batches larger than the queue and
    /// vectors that are not unit norm.
    pub fn enqueue(&mut self, vectors: ArrayView2<T>, ids: &[u64]) -> Result<()> {
        let n = vectors.nrows();
        if n != ids.len() {
            return Err(Error::Precondition(format!("{n} vectors but {} ids", ids.len())));
        }
        if n > self.capacity {
            return Err(Error::Precondition(format!(
                "batch of {n} exceeds queue capacity {}",
                self.capacity
            )));
        }
        if vectors.ncols() != self.dim() {
            return Err(Error::Shape(format!("feature dim {} vs queue dim {}", vectors.ncols(), self.dim())));
        }
        for (r, row) in vectors.rows().into_iter().enumerate() {
            check_unit(row).map_err(|norm| {
                Error::Precondition(format!("row {r} has norm {norm}, expected 1"))
            })?;
        }
        for (row, &id) in vectors.rows().into_iter().zip(ids) {
            self.vectors.row_mut(self.cursor).assign(&row);
            self.ids[self.cursor] = id;
            self.stamps[self.cursor] = self.next_stamp;
            self.next_stamp += 1;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.count = (self.count + n).min(self.capacity);
        Ok(())
    }

    /// Storage slots from oldest to newest.
    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.count < self.capacity { 0 } else { self.cursor };
        (0..self.count).map(move |i| (start + i) % self.capacity)
    }

    /// Ids from oldest to newest.
    pub fn ordered_ids(&self) -> Vec<u64> {
        self.slots().map(|s| self.ids[s]).collect()
    }

    /// Copy of the stored vectors, oldest first.
    pub fn snapshot(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.count, self.dim()));
        for (r, s) in self.slots().enumerate() {
            out.row_mut(r).assign(&self.vectors.row(s));
        }
        out
    }

    /// The `min(k, len)` most similar entries by dot product, ties to the older entry.
    pub fn top_k(&self, query: ArrayView1<T>, k: usize) -> Result<Vec<(u64, T)>> {
        self.top_k_excluding(query, k, |_| false)
    }

    /// [`FeatureQueue::top_k`] ignoring entries whose id satisfies `exclude`.
    pub fn top_k_excluding(
        &self,
        query: ArrayView1<T>,
        k: usize,
        exclude: impl Fn(u64) -> bool,
    ) -> Result<Vec<(u64, T)>> {
        if k == 0 {
            return Err(Error::Precondition("top_k needs k >= 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query dim {} vs queue dim {}", query.len(), self.dim())));
        }
        check_unit(query)
            .map_err(|n| Error::Precondition(format!("query has norm {n}, expected 1")))?;
        let mut scored: Vec<(T, u64, u64)> = self
            .slots()
            .filter(|&s| !exclude(self.ids[s]))
            .map(|s| (self.vectors.row(s).dot(&query), self.stamps[s], self.ids[s]))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(sim, _, id)| (id, sim)).collect())
    }

    /// Raw state for checkpointing: (vectors, ids, stamps, count, cursor, next_stamp).
    pub fn raw_parts(&self) -> (&Array2<T>, &[u64], &[u64], usize, usize, u64) {
        (&self.vectors, &self.ids, &self.stamps, self.count, self.cursor, self.next_stamp)
    }

    pub fn from_raw_parts(
        vectors: Array2<T>,
        ids: Vec<u64>,
        stamps: Vec<u64>,
        count: usize,
        cursor: usize,
        next_stamp: u64,
    ) -> Result<Self> {
        let capacity = vectors.nrows();
        if capacity == 0 || ids.len() != capacity || stamps.len() != capacity || count > capacity || cursor >= capacity {
            return Err(Error::Checkpoint("inconsistent queue state".into()));
        }
        Ok(Self { capacity, vectors, ids, stamps, count, cursor, next_stamp })
    }
}

fn check_unit<T: Scalar>(v: ArrayView1<T>) -> std::result::Result<(), f64> {
    let norm = v.dot(&v).as_f64().sqrt();
    if (norm - 1.0).abs() <= UNIT_NORM_TOL {
        Ok(())
    } else {
        Err(norm)
    }
}

/// Momentum coefficient in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumCoeff(f64);

impl MomentumCoeff {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::Precondition(format!("momentum coefficient {value} outside [0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `m ← c·m + (1−c)·θ` for every tensor.
pub fn momentum_update<T: Scalar>(
    params: &ParamStore<T>,
    momentum: &mut ParamStore<T>,
    coeff: MomentumCoeff,
) -> Result<()> {
    params.check_same_structure(momentum)?;
    let c = T::lit(coeff.0);
    let rest = T::one() - c;
    for (name, m) in momentum.iter_mut() {
        let theta = params.get(name).expect("structure checked");
        ndarray::Zip::from(m).and(theta).for_each(|m, &t| *m = c * *m + rest * t);
    }
    Ok(())
}

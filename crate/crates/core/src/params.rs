//! Named parameter storage and weight initialisers.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
}

/// Ordered collection of named learnable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| U::from_f64_lossy(x.to_f64_lossy())),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

pub fn zeros<T: Real>(rows: usize, cols: usize) -> Array2<T> {
    Array2::zeros((rows, cols))
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` projection.
pub fn glorot<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        T::from_f64_lossy(rng.gen_range(-limit..=limit))
    })
}

/// Random orthogonal `n × n` matrix (Gram-Schmidt on a Gaussian draw).
pub fn orthogonal<T: Real, R: Rng>(n: usize, rng: &mut R) -> Array2<T> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Array2::from_shape_fn((n, n), |(i, j)| T::from_f64_lossy(cols[j][i]))
}

/// `n × 3n` recurrent matrix made of three orthogonal gate blocks.
pub fn orthogonal_gates<T: Real, R: Rng>(n: usize, rng: &mut R) -> Array2<T> {
    let mut out = Array2::zeros((n, 3 * n));
    for g in 0..3 {
        out.slice_mut(ndarray::s![.., g * n..(g + 1) * n])
            .assign(&orthogonal::<T, R>(n, rng));
    }
    out
}

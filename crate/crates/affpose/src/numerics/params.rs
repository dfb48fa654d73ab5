//! Named parameter storage with gradient slots.
//!
//! Parameters are registered once in a fixed order; that order defines
//! both the optimizer update order and the serialization layout, which
//! keeps training and checkpoints deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

use super::{DenseArray, Scalar};

/// Ordered collection of named parameters with parallel gradient buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<DenseArray<S>>,
    grads: Vec<DenseArray<S>>,
    index: std::collections::HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: std::collections::HashMap::new(),
        }
    }

    /// Register a parameter; errors on duplicate names or whitespace in
    /// the name (names appear in the text header of saved parameter files).
    pub fn register(&mut self, name: &str, value: DenseArray<S>) -> Result<usize> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Usage(format!("invalid parameter name `{name}`")));
        }
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        let slot = self.values.len();
        let (r, c) = value.shape();
        self.names.push(name.to_string());
        self.grads.push(DenseArray::zeros(r, c));
        self.values.push(value);
        self.index.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray<S>> {
        Ok(&self.values[self.slot(name)?])
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseArray<S>> {
        let s = self.slot(name)?;
        Ok(&mut self.values[s])
    }

    pub fn grad(&self, name: &str) -> Result<&DenseArray<S>> {
        Ok(&self.grads[self.slot(name)?])
    }

    pub fn value_at(&self, slot: usize) -> &DenseArray<S> {
        &self.values[slot]
    }

    pub fn grad_at(&self, slot: usize) -> &DenseArray<S> {
        &self.grads[slot]
    }

    pub fn name_at(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    /// Add `g` into the gradient buffer for `slot`.
    pub fn accumulate_grad_at(&mut self, slot: usize, g: &DenseArray<S>) -> Result<()> {
        let dst = &mut self.grads[slot];
        if dst.shape() != g.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{:?} vs {:?}", dst.shape(), g.shape()),
            ));
        }
        for (d, v) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *d += *v;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.as_mut_slice() {
                *v = S::zero();
            }
        }
    }

    /// True if any parameter or gradient holds a non-finite value.
    pub fn any_non_finite(&self) -> Option<String> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.all_finite() {
                return Some(format!("parameter `{}`", self.names[i]));
            }
        }
        for (i, g) in self.grads.iter().enumerate() {
            if !g.all_finite() {
                return Some(format!("gradient of `{}`", self.names[i]));
            }
        }
        None
    }

    /// Mutable access by slot for the optimizer (values and grads split).
    pub fn optimizer_view(&mut self) -> (&mut [DenseArray<S>], &[DenseArray<S>]) {
        (&mut self.values, &self.grads)
    }

    /// Cast the whole store to another scalar type, preserving order.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            out.register(name, value.cast()).expect("names already valid");
        }
        out
    }
}

/// Initialize a `fan_in x fan_out` weight matrix and `1 x fan_out` bias.
///
/// Weights draw uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` using a
/// dedicated generator seeded from `seed`; biases are zero. Deterministic
/// for a given `(fan_in, fan_out, seed)`.
pub fn init_linear<S: Scalar>(
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> (DenseArray<S>, DenseArray<S>) {
    assert!(fan_in > 0 && fan_out > 0, "linear layer needs positive dims");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..fan_in * fan_out)
        .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    let w = DenseArray::new(fan_in, fan_out, data).expect("sized data");
    let b = DenseArray::zeros(1, fan_out);
    (w, b)
}

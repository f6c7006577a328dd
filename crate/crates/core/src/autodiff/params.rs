use std::collections::HashMap;

use rand::Rng;

use super::array::Array;
use super::tape::Gradients;
use crate::error::{Error, Result};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.08;

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One trainable array with its gradient slot and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    pub m: Array,
    pub v: Array,
}

impl Param {
    fn new(name: String, value: Array) -> Self {
        let [r, c] = value.shape();
        Param {
            name,
            grad: Array::zeros(r, c),
            m: Array::zeros(r, c),
            v: Array::zeros(r, c),
            value,
        }
    }
}

/// Named, ordered collection of parameters. Insertion order is preserved and
/// determines checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(ParamId(id))
    }

    /// Registers a `rows x cols` parameter drawn uniformly from
    /// `[-INIT_SCALE, INIT_SCALE]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        self.insert(name, Array::from_vec(rows, cols, data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Array::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `scale * grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (param, g) in self.params.iter_mut().zip(grads.iter()) {
            if let Some(g) = g {
                param.grad.add_scaled(g, scale);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Sets every parameter value to `value`.
    pub fn fill_values(&mut self, value: f64) {
        for p in &mut self.params {
            p.value.fill(value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.zeros("w", 2, 2).unwrap();
        assert!(ps.zeros("w", 1, 1).is_err());
    }

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParameterSet::new();
        a.uniform("w", 10, 10, &mut rng).unwrap();
        assert!(a
            .iter()
            .all(|p| p.value.data().iter().all(|v| v.abs() <= INIT_SCALE)));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParameterSet::new();
        b.uniform("w", 10, 10, &mut rng).unwrap();
        assert_eq!(a, b);
    }
}

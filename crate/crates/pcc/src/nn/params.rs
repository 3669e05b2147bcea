//! Named parameter collection and initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Ordered, named parameter tensors. BTreeMap keeps iteration order stable,
/// which checkpointing and deterministic gradient reduction rely on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter name: {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Register every parameter as a tape leaf, in name order.
    pub fn leaves(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut set = ParamSet::new();
        for (name, value) in iter {
            set.insert(name, value);
        }
        set
    }
}

/// Deterministic RNG used for all weight init and data synthesis.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform on [-limit, limit), the fan-in convention recurrent cells use.
pub fn uniform_init(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor {
    assert!(limit.is_finite() && limit > 0.0, "limit must be finite and positive");
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Truncated normal: N(0, std), redrawing samples with |v| > 2*std.
pub fn truncated_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    let cutoff = 2.0 * std;
    let data = (0..rows * cols)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= cutoff {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

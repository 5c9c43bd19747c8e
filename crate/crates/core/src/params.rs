//! Named parameter storage and per-tape binding.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Parameters keyed by dotted path, iterated in lexical path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Gradient buffers keyed like [`ParamStore`].
pub type GradStore = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Rounds every value through `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Result<Var, TensorError> {
        self.vars.get(path).copied().ok_or_else(|| TensorError::Invalid {
            op: "param",
            reason: format!("missing parameter {path}"),
        })
    }

    /// Copies accumulated leaf gradients out of `tape`.
    pub fn gradients(&self, tape: &Tape) -> GradStore {
        self.vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

/// Uniform in `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

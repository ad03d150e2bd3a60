//! Named parameter collections and their placement on a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self { tensors: IndexMap::new() }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![T::ZERO; n],
                Init::Ones => vec![T::ONE; n],
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                }
            };
            params.insert(spec.name.clone(), Tensor::new(&spec.shape, data)?)?;
        }
        Ok(params)
    }

    /// All-zero parameters for the given specs.
    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let mut params = Self::new();
        for spec in specs {
            params.tensors.insert(spec.name.clone(), Tensor::zeros(&spec.shape));
        }
        params
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that names and shapes agree with `specs`, in order.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if let Some(extra) = self.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Places every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Binds names to tape handles created elsewhere.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self { vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// Collects accumulated gradients in the order of `params`.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, params: &ModelParams<T>) -> Result<ModelParams<T>> {
        let mut out = ModelParams::new();
        for name in params.names() {
            out.insert(name, tape.grad_or_zeros(self.get(name)?))?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_respects_kinds() {
        let specs = vec![
            ParamSpec::new("w", &[4, 3], Init::FanIn(4)),
            ParamSpec::new("b", &[3], Init::Zeros),
            ParamSpec::new("g", &[3], Init::Ones),
        ];
        let a = ModelParams::<f32>::init(&specs, 5).unwrap();
        let b = ModelParams::<f32>::init(&specs, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(a.get("b").unwrap().data(), &[0.0; 3]);
        assert_eq!(a.get("g").unwrap().data(), &[1.0; 3]);
        assert_eq!(a.numel(), 18);
        assert_ne!(a, ModelParams::<f32>::init(&specs, 6).unwrap());
    }

    #[test]
    fn validate_names_the_offending_tensor() {
        let specs = vec![ParamSpec::new("attn.wq", &[4, 2], Init::Zeros)];
        let p = ModelParams::<f32>::zeros(&[ParamSpec::new("attn.wq", &[4, 3], Init::Zeros)]);
        let err = p.validate(&specs).unwrap_err().to_string();
        assert!(err.contains("attn.wq"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::<f32>::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }
}

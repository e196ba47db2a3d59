//! Named parameters and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, sorted lexicographically.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Anything with named trainable tensors.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_map(&self) -> ParamMap {
        let mut map = ParamMap::new();
        self.visit_params(&mut |name, t| {
            map.insert(name.to_string(), t.clone());
        });
        map
    }

    /// Overwrite every parameter from `map`; names and shapes must match.
    fn load_param_map(&mut self, map: &ParamMap) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        self.visit_params_mut(&mut |name, t| {
            seen += 1;
            match map.get(name) {
                Some(v) if v.shape() == t.shape() => *t = v.clone(),
                Some(v) => {
                    err.get_or_insert(Error::ShapeMismatch(format!(
                        "parameter {name}: expected {:?}, found {:?}",
                        t.shape(),
                        v.shape()
                    )));
                }
                None => {
                    err.get_or_insert(Error::Format(format!("missing parameter {name}")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != map.len() {
            return Err(Error::Format(format!(
                "expected {seen} parameters, found {}",
                map.len()
            )));
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// Places named parameters on a tape, as trainable leaves unless frozen.
pub struct Binder<'t> {
    tape: &'t Tape,
    frozen: Vec<String>,
    bound: Vec<(String, Var<'t>)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Binder {
            tape,
            frozen: Vec::new(),
            bound: Vec::new(),
        }
    }

    /// Parameters whose name starts with any of `prefixes` become constants.
    pub fn with_frozen(tape: &'t Tape, prefixes: &[String]) -> Self {
        Binder {
            tape,
            frozen: prefixes.to_vec(),
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, name: &str, value: &Tensor) -> Var<'t> {
        if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            return self.tape.constant(value.clone());
        }
        let v = self.tape.param(value.clone());
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn bound(&self) -> &[(String, Var<'t>)] {
        &self.bound
    }

    /// Gradient of every trainable parameter bound so far.
    pub fn collect(&self, grads: &Gradients) -> ParamMap {
        self.bound
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(*v)))
            .collect()
    }
}

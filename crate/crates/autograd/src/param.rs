use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;
use crate::var::Var;

/// A named trainable tensor. Cloning the `Rc` shares the parameter: every
/// holder sees updates, which is how weight sharing between modules works.
pub struct Param {
    name: String,
    var: RefCell<Var>,
}

pub type ParamRef = Rc<Param>;

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> ParamRef {
        Rc::new(Param { name: name.into(), var: RefCell::new(Var::leaf(value)) })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current leaf. All uses within one forward pass share it, so
    /// gradients from every use accumulate.
    pub fn var(&self) -> Var {
        self.var.borrow().clone()
    }

    pub fn value(&self) -> Tensor {
        self.var.borrow().value().clone()
    }

    pub fn numel(&self) -> usize {
        self.var.borrow().value().numel()
    }

    /// Replaces the value with a fresh leaf. Graphs built before the call keep the old value.
    pub fn set(&self, value: Tensor) {
        *self.var.borrow_mut() = Var::leaf(value);
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {})", self.name, self.var.borrow().shape())
    }
}

/// Counts distinct parameters (by identity) in `params`.
pub fn count_unique(params: &[ParamRef]) -> usize {
    let mut seen = std::collections::HashSet::new();
    params.iter().filter(|p| seen.insert(Rc::as_ptr(p))).map(|p| p.numel()).sum()
}

/// Removes duplicate handles, keeping first occurrences in order.
pub fn dedup(params: Vec<ParamRef>) -> Vec<ParamRef> {
    let mut seen = std::collections::HashSet::new();
    params.into_iter().filter(|p| seen.insert(Rc::as_ptr(p))).collect()
}

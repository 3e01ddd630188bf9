//! Graph nodes and reverse-mode differentiation.
//!
//! Every backward rule is written in terms of [`Var`] operations, so running
//! [`grad`] with `create_graph = true` yields gradients that are themselves
//! differentiable. That is what a gradient penalty on a critic needs.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

pub(crate) struct BackwardArgs<'a> {
    pub inputs: &'a [Var],
    pub out: &'a Var,
    pub grad: &'a Var,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Result<Vec<Option<Var>>>>;

struct GradFn {
    name: &'static str,
    inputs: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: false, grad_fn: None }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: true, grad_fn: None }))
    }

    pub fn scalar(v: f32) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor, name: &'static str, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        let track = is_grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        let grad_fn = track.then_some(GradFn { name, inputs, backward });
        Var(Rc::new(Node { id: next_id(), value, requires_grad: track, grad_fn }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }
}

/// Gradients of scalar `output` with respect to each of `inputs`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients carry their own history and can be
/// differentiated again.
pub fn grad(output: &Var, inputs: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    if output.shape() != Shape::SCALAR {
        return Err(Error::Graph(format!("grad of non-scalar output {}", output.shape())));
    }
    let targets: HashSet<u64> = inputs.iter().map(Var::id).collect();

    // Iterative post-order DFS; `needed` marks nodes from which a target is reachable.
    let mut order: Vec<Var> = Vec::new();
    let mut needed: HashMap<u64, bool> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = Vec::new();
    if output.requires_grad() {
        stack.push((output.clone(), false));
    }
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            let mut need = targets.contains(&node.id());
            if let Some(gf) = &node.0.grad_fn {
                need |= gf.inputs.iter().any(|i| needed.get(&i.id()).copied().unwrap_or(false));
            }
            needed.insert(node.id(), need);
            order.push(node);
            continue;
        }
        if needed.contains_key(&node.id()) {
            continue;
        }
        // Placeholder so that shared sub-graphs are expanded once.
        needed.insert(node.id(), false);
        stack.push((node.clone(), true));
        if let Some(gf) = &node.0.grad_fn {
            for inp in &gf.inputs {
                if inp.requires_grad() && !needed.contains_key(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }

    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    let mut results: HashMap<u64, Var> = HashMap::new();
    if needed.get(&output.id()).copied().unwrap_or(false) {
        grads.insert(output.id(), Var::constant(Tensor::ones(Shape::SCALAR)));
    }
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if targets.contains(&node.id()) {
            results.insert(node.id(), g.clone());
        }
        let Some(gf) = &node.0.grad_fn else { continue };
        let needs: Vec<bool> =
            gf.inputs.iter().map(|i| i.requires_grad() && needed.get(&i.id()).copied().unwrap_or(false)).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let args = BackwardArgs { inputs: &gf.inputs, out: node, grad: &g, needs: &needs };
        let input_grads = (gf.backward)(&args)?;
        for ((inp, ig), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
            let (Some(ig), true) = (ig, *need) else { continue };
            if ig.shape() != inp.shape() {
                return Err(Error::Graph(format!(
                    "backward of {} produced {} for input of shape {}",
                    gf.name,
                    ig.shape(),
                    inp.shape()
                )));
            }
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&ig)?,
                None => ig,
            };
            grads.insert(inp.id(), acc);
        }
    }

    Ok(inputs
        .iter()
        .map(|i| results.remove(&i.id()).unwrap_or_else(|| Var::constant(Tensor::zeros(i.shape()))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_stops_recording() {
        let x = Var::leaf(Tensor::scalar(2.0));
        let y = {
            let _g = no_grad();
            x.mul(&x).unwrap()
        };
        assert!(!y.requires_grad());
        assert!(is_grad_enabled());
    }

    #[test]
    fn unreachable_input_gets_zero() {
        let x = Var::leaf(Tensor::scalar(2.0));
        let z = Var::leaf(Tensor::scalar(5.0));
        let y = x.mul(&x).unwrap();
        let g = grad(&y, &[x, z], false).unwrap();
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1].item(), 0.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (x*x) + (x*x) reusing the same node
        let x = Var::leaf(Tensor::scalar(3.0));
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap();
        let g = grad(&y, &[x], false).unwrap();
        assert_eq!(g[0].item(), 12.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Var::leaf(Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let dy = grad(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
        assert!(dy.requires_grad());
        assert_eq!(dy.item(), 12.0);
        let d2y = grad(&dy, &[x], false).unwrap().remove(0);
        assert_eq!(d2y.item(), 12.0);
    }

    #[test]
    fn gradient_wrt_intermediate() {
        let x = Var::leaf(Tensor::scalar(1.5));
        let h = x.mul_scalar(2.0).unwrap();
        let y = h.mul(&h).unwrap();
        let g = grad(&y, &[h], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }
}

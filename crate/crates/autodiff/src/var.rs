//! Graph nodes and the reverse-mode sweep.
//!
//! Backward rules are themselves written with `Var` operations, so running
//! [`grad`] with `create_graph = true` yields gradients that can be
//! differentiated again (needed for gradient penalties).

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Var) -> Vec<Option<Var>>>;

struct GradFn {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A tensor value tracked by the autodiff graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> usize {
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
pub struct GradModeGuard(bool);

impl GradModeGuard {
    pub fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        GradModeGuard(prev)
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        let prev = self.0;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = GradModeGuard::set(false);
    f()
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
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

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    /// Records an operation. `backward` maps the output gradient to one
    /// optional gradient per parent, in order.
    pub fn from_op(value: Tensor, parents: Vec<Var>, backward: impl Fn(&Var) -> Vec<Option<Var>> + 'static) -> Var {
        if !is_grad_enabled() || !parents.iter().any(Var::requires_grad) {
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            grad_fn: Some(GradFn { parents, backward: Box::new(backward) }),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

/// Gradients of the scalar (or seeded) `output` with respect to `inputs`.
///
/// `None` means the output does not depend on that input. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, inputs: &[Var], create_graph: bool) -> Vec<Option<Var>> {
    let seed = Var::constant(Tensor::ones(output.shape()));
    grad_with_seed(output, &seed, inputs, create_graph)
}

pub fn grad_with_seed(output: &Var, seed: &Var, inputs: &[Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let input_ids: HashMap<usize, usize> = inputs.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();

    // Post-order over the differentiable subgraph: parents precede children.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    if output.requires_grad() {
        let mut stack: Vec<(Var, usize)> = vec![(output.clone(), 0)];
        visited.insert(output.id(), false);
        while let Some((node, child)) = stack.pop() {
            let parents = node.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if child < parents.len() {
                let p = parents[child].clone();
                stack.push((node, child + 1));
                if p.requires_grad() && !visited.contains_key(&p.id()) {
                    visited.insert(p.id(), false);
                    stack.push((p, 0));
                }
            } else {
                order.push(node);
            }
        }
    }

    // A node is worth visiting only if some requested input lies below it.
    let mut needed: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    for node in &order {
        let below = node
            .0
            .grad_fn
            .as_ref()
            .map(|g| g.parents.iter().any(|p| needed.get(&p.id()).copied().unwrap_or(false)))
            .unwrap_or(false);
        needed.insert(node.id(), below || input_ids.contains_key(&node.id()));
    }

    let _mode = GradModeGuard::set(create_graph);
    let mut grads: HashMap<usize, Var> = HashMap::new();
    let mut result: Vec<Option<Var>> = vec![None; inputs.len()];
    if needed.get(&output.id()).copied().unwrap_or(false) {
        grads.insert(output.id(), seed.clone());
    }
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(&slot) = input_ids.get(&node.id()) {
            result[slot] = Some(g.clone());
        }
        let Some(gf) = node.0.grad_fn.as_ref() else { continue };
        let parent_grads = (gf.backward)(&g);
        debug_assert_eq!(parent_grads.len(), gf.parents.len());
        for (p, pg) in gf.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !needed.get(&p.id()).copied().unwrap_or(false) {
                continue;
            }
            debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }
    result
}

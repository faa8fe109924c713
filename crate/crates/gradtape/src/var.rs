//! Graph nodes and the reverse-mode engine.
//!
//! Every backward rule is written with the same differentiable ops used in the
//! forward pass, so running the engine with `create_graph = true` records the
//! gradient computation itself and it can be differentiated again.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Var<T>, &[Var<T>], &Var<T>) -> Vec<Option<Var<T>>>>;

struct OpRecord<T: Real> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<OpRecord<T>>,
}

/// A tensor that may participate in a recorded computation.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl<T: Real> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, op: Option<OpRecord<T>>) -> Self {
        Var(Rc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, requires_grad, op }))
    }

    /// A value that gradients never flow into.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires {
            Self::make(value, true, Some(OpRecord { parents, backward }))
        } else {
            Self::make(value, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }
}

fn topo_order<T: Real>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(op) = &v.0.op {
            for p in &op.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of `output` (summed if non-scalar) with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on receive zeros. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad<T: Real>(output: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Vec<Var<T>> {
    let keep: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
        let order = topo_order(output);
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let g = if keep.contains(&node.id()) { grads.get(&node.id()).cloned() } else { grads.remove(&node.id()) };
            let Some(g) = g else { continue };
            let parent_grads = with_grad_mode(create_graph, || (op.backward)(&g, &op.parents, node));
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (p, pg) in op.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                let merged = match grads.remove(&p.id()) {
                    Some(prev) => with_grad_mode(create_graph, || prev.add(&pg)),
                    None => pg,
                };
                grads.insert(p.id(), merged);
            }
        }
    }
    wrt.iter().map(|v| grads.get(&v.id()).cloned().unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))).collect()
}

//! Graph nodes, gradient mode and the reverse sweep.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

/// Dense f64 array of dynamic rank; the storage type of every [`Var`].
pub type Array = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations on this thread currently record a graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched to `enabled`, restoring the
/// previous mode afterwards (also on unwind).
pub fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording a graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

/// The differentiation rule of one recorded operation.
///
/// `backward` receives the upstream gradient and must return one entry per
/// parent. Implementations should build their results out of [`Var`]
/// operations so that second-order gradients work; the reverse sweep runs
/// them with recording enabled only when a graph of the gradient was
/// requested.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, out: &Var, parents: &[Var], needs: &[bool], grad: &Var) -> Vec<Option<Var>>;
}

struct Node {
    id: u64,
    value: Array,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// A value in the computation graph.
///
/// Cloning is cheap (reference counted). Values are immutable once created.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

impl Var {
    fn make(value: Array, requires_grad: bool, parents: Vec<Var>, op: Option<Box<dyn Backward>>) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            op,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Array) -> Var {
        Var::make(value, false, Vec::new(), None)
    }

    /// A graph input. With `requires_grad` set, gradients are collected for it.
    pub fn leaf(value: Array, requires_grad: bool) -> Var {
        Var::make(value, requires_grad, Vec::new(), None)
    }

    pub fn scalar_constant(v: f64) -> Var {
        Var::constant(Array::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Var::constant(Array::zeros(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: f64) -> Var {
        Var::constant(Array::from_elem(IxDyn(shape), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Var {
        Var::constant(Array::from_shape_vec(IxDyn(shape), data).expect("shape does not match data length"))
    }

    /// Records the result of an operation. When recording is disabled or no
    /// parent requires a gradient the result is a plain constant and the
    /// parents are not retained.
    pub fn from_op(value: Array, parents: Vec<Var>, op: impl Backward + 'static) -> Var {
        if is_grad_enabled() && parents.iter().any(Var::requires_grad) {
            Var::make(value, true, parents, Some(Box::new(op)))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a value with {} elements", self.len());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }
}

/// Gradients of leaves collected by [`backward`], keyed by node id.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Array>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Array> {
        self.map.get(&v.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Nodes reachable from `root` that take part in differentiation, in
/// reverse creation order. Ids increase with creation, so this is a valid
/// reverse topological order.
fn reverse_order(root: &Var) -> Vec<Var> {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![root.clone()];
    let mut nodes = Vec::new();
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        nodes.push(v);
    }
    nodes.sort_unstable_by(|a, b| b.id().cmp(&a.id()));
    nodes
}

fn sweep(root: &Var, seed: Var, keep: &dyn Fn(&Var) -> bool, create_graph: bool) -> HashMap<u64, Var> {
    let order = reverse_order(root);
    let mut pending: HashMap<u64, Var> = HashMap::new();
    let mut kept = HashMap::new();
    pending.insert(root.id(), seed);
    with_grad_mode(create_graph, || {
        for node in &order {
            let Some(g) = pending.remove(&node.id()) else { continue };
            if keep(node) {
                kept.insert(node.id(), g.clone());
            }
            let Some(op) = &node.0.op else { continue };
            let parents = &node.0.parents;
            let needs: Vec<bool> = parents.iter().map(Var::requires_grad).collect();
            let grads = op.backward(node, parents, &needs, &g);
            debug_assert_eq!(grads.len(), parents.len(), "{} returned wrong arity", op.name());
            for ((p, pg), need) in parents.iter().zip(grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                debug_assert_eq!(pg.shape(), p.shape(), "{} produced a mis-shaped gradient", op.name());
                let acc = match pending.remove(&p.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                pending.insert(p.id(), acc);
            }
        }
    });
    kept
}

/// Reverse sweep from a scalar `root`, returning the gradient of every leaf
/// that requires one.
pub fn backward(root: &Var) -> Gradients {
    assert_eq!(root.len(), 1, "backward() needs a scalar root");
    let seed = Var::constant(Array::ones(IxDyn(root.shape())));
    let kept = sweep(root, seed, &|v| v.is_leaf(), false);
    Gradients { map: kept.into_iter().map(|(k, v)| (k, v.value().clone())).collect() }
}

/// Gradients of a scalar `root` with respect to `inputs`, which may be any
/// nodes of the graph. With `create_graph` the results are themselves
/// differentiable.
pub fn grad(root: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(root.len(), 1, "grad() needs a scalar root");
    let wanted: std::collections::HashSet<u64> = inputs.iter().map(|v| v.id()).collect();
    let seed = Var::constant(Array::ones(IxDyn(root.shape())));
    let kept = sweep(root, seed, &|v| wanted.contains(&v.id()), create_graph);
    inputs.iter().map(|v| kept.get(&v.id()).cloned()).collect()
}

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{OpError, Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Auxiliary buffers an operator keeps from its forward pass.
///
/// `kink` summarizes which side of every non-differentiable point the forward
/// landed on (ReLU sign pattern, pooling argmax, spline interval...). Two
/// evaluations with different signatures straddle a kink.
#[derive(Debug, Clone, Default)]
pub struct Saved<T> {
    pub reals: Vec<Vec<T>>,
    pub indices: Vec<usize>,
    pub kink: u64,
}

impl<T> Saved<T> {
    pub fn none() -> Self {
        Saved { reals: Vec::new(), indices: Vec::new(), kink: 0 }
    }
}

pub struct Forward<T> {
    pub output: Tensor<T>,
    pub saved: Saved<T>,
}

impl<T> Forward<T> {
    pub fn plain(output: Tensor<T>) -> Self {
        Forward { output, saved: Saved::none() }
    }
}

/// Vector-Jacobian product request handed to [`Operator::backward`].
pub struct Vjp<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub saved: &'a Saved<T>,
    pub grad_out: &'a [T],
    /// Whether input `i` needs a gradient; operators may skip the others.
    pub needs: &'a [bool],
}

/// A differentiable primitive.
///
/// `forward` must be a pure function of its inputs so that a recorded graph can
/// be replayed. `backward` returns one gradient buffer per input, or `None`
/// where the input needs none.
pub trait Operator<T: Real>: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Forward<T>, OpError>;

    fn backward(&self, vjp: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError>;
}

enum Kind<T> {
    Leaf { name: Option<String> },
    Op { op: Arc<dyn Operator<T>>, inputs: Vec<Var> },
}

struct Node<T> {
    kind: Kind<T>,
    value: Option<Tensor<T>>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Define-by-run tape of primitive applications.
///
/// Operations evaluate eagerly as they are recorded, so node order is always a
/// topological order. The recorded program can be re-run on new leaf values
/// with [`Graph::replay`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, Var>,
    evaluated: bool,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), names: HashMap::new(), evaluated: true, check_finite: true }
    }

    /// Disables the per-node finiteness scan (it is on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named leaf. Registering an existing name returns the same node.
    pub fn input(&mut self, name: &str, tensor: Tensor<T>) -> Var {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let v = self.push_leaf(Some(name.to_string()), tensor);
        self.names.insert(name.to_string(), v);
        v
    }

    /// Registers an anonymous leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_leaf(None, tensor.with_requires_grad(false))
    }

    fn push_leaf(&mut self, name: Option<String>, mut tensor: Tensor<T>) -> Var {
        tensor.clear_grad();
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            kind: Kind::Leaf { name },
            value: Some(tensor),
            saved: Saved::none(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Named leaves that require a gradient, in registration order.
    pub fn trainable_inputs(&self) -> Vec<(String, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                Kind::Leaf { name: Some(name) } if n.requires_grad => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].kind, Kind::Leaf { .. })
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        match &self.nodes[v.0].kind {
            Kind::Leaf { .. } => "leaf",
            Kind::Op { op, .. } => op.name(),
        }
    }

    pub fn node_inputs(&self, v: Var) -> &[Var] {
        match &self.nodes[v.0].kind {
            Kind::Leaf { .. } => &[],
            Kind::Op { inputs, .. } => inputs,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a node. Panics if the graph was [`reset`](Graph::reset) and not replayed.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.try_value(v).expect("node has no value; replay the graph first")
    }

    pub fn try_value(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|n| n.value.as_ref())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn saved(&self, v: Var) -> &Saved<T> {
        &self.nodes[v.0].saved
    }

    /// Records and evaluates `op` on `inputs`.
    pub fn apply(&mut self, op: impl Operator<T> + 'static, inputs: &[Var]) -> Result<Var> {
        self.apply_arc(Arc::new(op), inputs)
    }

    pub fn apply_arc(&mut self, op: Arc<dyn Operator<T>>, inputs: &[Var]) -> Result<Var> {
        if !self.evaluated {
            return Err(TensorError::NotEvaluated);
        }
        let id = self.nodes.len();
        let fwd = self.run(id, op.as_ref(), inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            kind: Kind::Op { op, inputs: inputs.to_vec() },
            value: Some(fwd.output),
            saved: fwd.saved,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn run(&self, id: usize, op: &dyn Operator<T>, inputs: &[Var]) -> Result<Forward<T>> {
        let values: Vec<&Tensor<T>> = inputs
            .iter()
            .map(|v| self.nodes[v.0].value.as_ref().ok_or(TensorError::NotEvaluated))
            .collect::<Result<_>>()?;
        let fwd = op
            .forward(&values)
            .map_err(|e| TensorError::Shape { node: id, op: op.name(), detail: e.0 })?;
        if self.check_finite {
            if let Some((index, &value)) =
                fwd.output.data().iter().enumerate().find(|(_, x)| !x.is_finite())
            {
                return Err(TensorError::NonFinite { node: id, op: op.name(), index, value: value.as_f64() });
            }
        }
        Ok(fwd)
    }

    /// Replaces the value of a leaf. The graph must be replayed before its
    /// downstream values are meaningful again.
    pub fn set_value(&mut self, v: Var, tensor: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.kind, Kind::Leaf { .. }) {
            return Err(TensorError::InvalidArgument { op: "set_value", detail: format!("node {} is not a leaf", v.0) });
        }
        if let Some(old) = &node.value {
            if old.shape() != tensor.shape() {
                return Err(TensorError::Shape {
                    node: v.0,
                    op: "leaf",
                    detail: format!("replacement shape {:?} differs from {:?}", tensor.shape(), old.shape()),
                });
            }
        }
        let mut tensor = tensor.with_requires_grad(node.requires_grad);
        tensor.clear_grad();
        node.value = Some(tensor);
        self.evaluated = false;
        Ok(())
    }

    /// Drops every computed value, keeping leaves and the recorded program.
    pub fn reset(&mut self) {
        for node in &mut self.nodes {
            if let Kind::Op { .. } = node.kind {
                node.value = None;
                node.saved = Saved::none();
            } else if let Some(v) = node.value.as_mut() {
                v.clear_grad();
            }
        }
        self.evaluated = false;
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Re-runs every recorded operation in order on the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            let (op, inputs) = match &self.nodes[id].kind {
                Kind::Leaf { .. } => continue,
                Kind::Op { op, inputs } => (Arc::clone(op), inputs.clone()),
            };
            let fwd = self.run(id, op.as_ref(), &inputs)?;
            let node = &mut self.nodes[id];
            node.value = Some(fwd.output);
            node.saved = fwd.saved;
        }
        self.evaluated = true;
        Ok(())
    }

    /// Sets named inputs and re-evaluates the whole program.
    pub fn eval(&mut self, inputs: &[(&str, Tensor<T>)]) -> Result<()> {
        for (name, t) in inputs {
            let v = self.var(name).ok_or_else(|| TensorError::UnknownInput(name.to_string()))?;
            self.set_value(v, t.clone())?;
        }
        self.replay()
    }

    /// Combined kink signature of all nodes in the current evaluation.
    pub fn kink_signature(&self) -> u64 {
        self.nodes
            .iter()
            .enumerate()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, (i, n)| {
                (h ^ n.saved.kink.rotate_left((i % 63) as u32)).wrapping_mul(0x100_0000_01b3)
            })
    }

    /// Reverse pass from `output` seeded with `seed`; leaf gradients are
    /// stored on the leaves and read back with [`Graph::grad`].
    pub fn backward(&mut self, output: Var, seed: &Tensor<T>) -> Result<()> {
        if !self.evaluated {
            return Err(TensorError::NotEvaluated);
        }
        let out_shape = self.value(output).shape().to_vec();
        if seed.shape() != out_shape.as_slice() {
            return Err(TensorError::GradShape { expected: out_shape, actual: seed.shape().to_vec() });
        }
        let grads = self.vjp(output, seed.data().to_vec())?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Kind::Leaf { .. }) = (g, &self.nodes[i].kind) {
                if let Some(v) = self.nodes[i].value.as_mut() {
                    v.set_grad(g);
                }
            }
        }
        Ok(())
    }

    /// Shorthand for a scalar output seeded with one.
    pub fn backward_scalar(&mut self, output: Var) -> Result<()> {
        if !self.evaluated {
            return Err(TensorError::NotEvaluated);
        }
        let shape = self.value(output).shape().to_vec();
        self.backward(output, &Tensor::full(shape, T::one()))
    }

    fn vjp(&self, output: Var, seed: Vec<T>) -> Result<Vec<Option<Vec<T>>>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let (op, inputs) = match &node.kind {
                Kind::Leaf { .. } => {
                    if node.requires_grad {
                        leaf_grads[id] = Some(g);
                    }
                    continue;
                }
                Kind::Op { op, inputs } => (op, inputs),
            };
            if !node.requires_grad {
                continue;
            }
            let values: Vec<&Tensor<T>> = inputs
                .iter()
                .map(|v| self.nodes[v.0].value.as_ref().ok_or(TensorError::NotEvaluated))
                .collect::<Result<_>>()?;
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let output_value = node.value.as_ref().ok_or(TensorError::NotEvaluated)?;
            let input_grads = op
                .backward(Vjp { inputs: &values, output: output_value, saved: &node.saved, grad_out: &g, needs: &needs })
                .map_err(|e| TensorError::Shape { node: id, op: op.name(), detail: e.0 })?;
            for ((v, need), ig) in inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                if ig.len() != values_len(&self.nodes[v.0]) {
                    return Err(TensorError::Shape {
                        node: id,
                        op: op.name(),
                        detail: format!("backward produced {} values for input node {}", ig.len(), v.0),
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(leaf_grads)
    }

    /// Gradient stored on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0)?.value.as_ref()?.grad()
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&[T]> {
        self.grad(self.var(name)?)
    }
}

fn values_len<T: Real>(node: &Node<T>) -> usize {
    node.value.as_ref().map_or(0, |v| v.numel())
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.kind {
                Kind::Leaf { name } => list.entry(&format_args!("%{i} = leaf {name:?}")),
                Kind::Op { op, inputs } => {
                    let ins: Vec<usize> = inputs.iter().map(|v| v.0).collect();
                    list.entry(&format_args!("%{i} = {}{ins:?}", op.name()))
                }
            };
        }
        list.finish()
    }
}

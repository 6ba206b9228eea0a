use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autodiff::ops::{apply_primitive, vjp, Primitive};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter name -> gradient.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

enum NodeKind {
    Param,
    Constant,
    Op(Primitive),
}

struct Node<T> {
    kind: NodeKind,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

/// Records a computation for reverse-mode differentiation. Nodes are appended
/// in evaluation order, so the node list is already topologically sorted.
/// A tape is single-threaded; independent tapes may run in parallel.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, kind: NodeKind, inputs: Vec<usize>, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            kind,
            inputs,
            value,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a trainable leaf. Registering the same name twice returns the
    /// original leaf.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let v = self.push(NodeKind::Param, Vec::new(), value);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(NodeKind::Constant, Vec::new(), value)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Evaluates `p` on recorded inputs and records the result.
    pub fn apply(&self, p: Primitive, inputs: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            apply_primitive(&p, &vals)?
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(NodeKind::Op(p), ids, value))
    }

    pub fn concat(&self, vars: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        self.apply(Primitive::Concat { axis }, vars)
    }

    /// Gradient of a scalar `loss` with respect to every recorded node. Each
    /// node is visited once, in reverse recording order.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss_val.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let NodeKind::Op(p) = &node.kind {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| &nodes[i].value).collect();
                for (&src, gi) in node.inputs.iter().zip(vjp(p, &inputs, &node.value, &g)) {
                    let Some(gi) = gi else { continue };
                    grads[src] = Some(match grads[src].take() {
                        None => gi,
                        Some(acc) => accumulate(&acc, &gi),
                    });
                }
            }
            grads[id] = Some(g);
        }
        let params = self.params.borrow().clone();
        let shapes = params
            .iter()
            .map(|(name, &id)| (name.clone(), nodes[id].value.shape().to_vec()))
            .collect();
        Ok(Grads {
            grads,
            params,
            shapes,
        })
    }
}

fn accumulate<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("gradient shapes agree")
}

/// Result of [`Tape::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, usize>,
    shapes: BTreeMap<String, Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for any recorded value; zeros when it does not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(v.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(v.shape()),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let &id = self.params.get(name)?;
        Some(match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[name].clone()),
        })
    }

    /// Gradient for every registered parameter, zero-filled where off-path.
    pub fn into_param_map(self) -> GradMap<T> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = match &self.grads[id] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(self.shapes[name].clone()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

/// Gradient of `loss` w.r.t. every parameter on its tape.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var<'_, T>) -> Result<GradMap<T>> {
    Ok(tape.backward(loss)?.into_param_map())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    fn unary(self, p: Primitive) -> Result<Self> {
        self.tape.apply(p, &[self])
    }

    fn binary(self, p: Primitive, other: Var<'t, T>) -> Result<Self> {
        self.tape.apply(p, &[self, other])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, o: Var<'t, T>) -> Result<Self> {
        self.binary(Primitive::Add, o)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, o: Var<'t, T>) -> Result<Self> {
        self.binary(Primitive::Sub, o)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, o: Var<'t, T>) -> Result<Self> {
        self.binary(Primitive::Mul, o)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, o: Var<'t, T>) -> Result<Self> {
        self.binary(Primitive::Div, o)
    }

    pub fn matmul(self, o: Var<'t, T>) -> Result<Self> {
        self.binary(Primitive::MatMul, o)
    }

    pub fn conv1d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Self> {
        let mut inputs = vec![self, w];
        inputs.extend(b);
        self.tape.apply(Primitive::Conv1d { stride, pad }, &inputs)
    }

    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Self> {
        let mut inputs = vec![self, w];
        inputs.extend(b);
        self.tape.apply(Primitive::Conv2d { stride, pad }, &inputs)
    }

    pub fn sum(self, axis: usize) -> Result<Self> {
        self.unary(Primitive::Sum { axis })
    }

    pub fn mean(self, axis: usize) -> Result<Self> {
        self.unary(Primitive::Mean { axis })
    }

    pub fn max(self, axis: usize) -> Result<Self> {
        self.unary(Primitive::Max { axis })
    }

    pub fn sum_all(self) -> Result<Self> {
        self.unary(Primitive::SumAll)
    }

    pub fn mean_all(self) -> Result<Self> {
        self.unary(Primitive::MeanAll)
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Primitive::Relu)
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(Primitive::Tanh)
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Primitive::Exp)
    }

    pub fn ln(self) -> Result<Self> {
        self.unary(Primitive::Log)
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(Primitive::Abs)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Result<Self> {
        self.unary(Primitive::Neg)
    }

    pub fn sqrt(self) -> Result<Self> {
        self.unary(Primitive::Sqrt)
    }

    pub fn powf(self, e: f64) -> Result<Self> {
        self.unary(Primitive::Powf(e))
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        self.unary(Primitive::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        self.unary(Primitive::AddScalar(c))
    }

    pub fn huber(self, delta: f64) -> Result<Self> {
        self.unary(Primitive::Huber(delta))
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        self.unary(Primitive::Softmax { axis })
    }

    pub fn log_sum_exp(self, axis: usize) -> Result<Self> {
        self.unary(Primitive::LogSumExp { axis })
    }

    pub fn l2_normalize(self, axis: usize, eps: f64) -> Result<Self> {
        self.unary(Primitive::L2Normalize { axis, eps })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.unary(Primitive::Reshape(shape.to_vec()))
    }

    pub fn transpose(self, a0: usize, a1: usize) -> Result<Self> {
        self.unary(Primitive::Transpose(a0, a1))
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        self.unary(Primitive::Slice { axis, start, end })
    }

    pub fn expand(self, shape: &[usize]) -> Result<Self> {
        self.unary(Primitive::Expand(shape.to_vec()))
    }

    pub fn detach(self) -> Result<Self> {
        self.unary(Primitive::Detach)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let w = tape.param("w", t(&[2], &[1.0, 2.0]));
        let loss = w.mul(w).unwrap().sum_all().unwrap();
        let g = backward(&tape, loss).unwrap();
        assert_eq!(g["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_through_sigmoid_constant() {
        let tape = Tape::new();
        let c = tape.param("c", t(&[1], &[1.0]));
        let s = tape.constant(t(&[1], &[0.0])).sigmoid().unwrap();
        let loss = s.mul(c).unwrap().sum_all().unwrap();
        let g = backward(&tape, loss).unwrap();
        assert_eq!(g["c"].data(), &[0.5]);
    }

    #[test]
    fn log_sum_exp_equal_logits_is_uniform() {
        let tape = Tape::new();
        let a = tape.param("a", t(&[2], &[0.7, 0.7]));
        let loss = a.log_sum_exp(0).unwrap();
        let g = backward(&tape, loss).unwrap();
        for &v in g["a"].data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn off_path_params_get_zero_grad() {
        let tape = Tape::new();
        let a = tape.param("a", t(&[2], &[1.0, 2.0]));
        let _b = tape.param("b", t(&[3], &[1.0, 2.0, 3.0]));
        let g = backward(&tape, a.sum_all().unwrap()).unwrap();
        assert_eq!(g["b"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let a = tape.param("a", t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(a),
            Err(Error::NonScalarLoss(shape)) if shape == vec![2]
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.param("a", t(&[2], &[1.0, 2.0]));
        let loss = a.detach().unwrap().mul(a).unwrap().sum_all().unwrap();
        let g = backward(&tape, loss).unwrap();
        assert_eq!(g["a"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let tape = Tape::new();
        let a = tape.param("a", t(&[1], &[3.0]));
        let a2 = tape.param("a", t(&[1], &[99.0]));
        let loss = a.add(a2).unwrap().sum_all().unwrap();
        let g = backward(&tape, loss).unwrap();
        assert_eq!(g["a"].data(), &[2.0]);
    }
}

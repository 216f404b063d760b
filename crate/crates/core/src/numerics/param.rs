use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Graph leaves standing for a parameter list, in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &[Parameter], trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        Self { vars }
    }

    /// Wraps leaves created elsewhere, e.g. by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adds the gradient of each bound leaf into its parameter's buffer.
    pub fn accumulate(&self, grads: &Gradients, params: &mut [Parameter]) {
        for (p, &v) in params.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}

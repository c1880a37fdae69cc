use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Everything a backward closure sees: the op inputs, the forward output,
/// the incoming gradient and which inputs actually need a gradient.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Var],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct GradFn {
    inputs: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    value: Tensor,
    grad_fn: Option<GradFn>,
    leaf: bool,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            grad_fn: None,
            leaf: false,
        }))
    }

    /// A leaf whose gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            grad_fn: None,
            leaf: true,
        }))
    }

    /// Build an op output. The backward closure must return one entry per
    /// input; entries for inputs with `needs[i] == false` may be `None`.
    pub fn from_op<F>(value: Tensor, inputs: Vec<Var>, backward: F) -> Self
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let grad_fn = if inputs.iter().any(Var::requires_grad) {
            Some(GradFn {
                inputs,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Var(Rc::new(Node {
            value,
            grad_fn,
            leaf: false,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.leaf || self.0.grad_fn.is_some()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) -> Grads {
        assert_eq!(
            self.value().numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        self.backward_with(Tensor::full(self.shape().to_vec(), 1.0))
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.shape());
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Tensor> = HashMap::new();
        let mut leaves: HashMap<*const Node, Tensor> = HashMap::new();
        pending.insert(self.key(), seed);

        for var in order.iter().rev() {
            let Some(grad) = pending.remove(&var.key()) else {
                continue;
            };
            if var.0.leaf {
                accumulate(&mut leaves, var.key(), grad);
                continue;
            }
            let Some(gf) = &var.0.grad_fn else { continue };
            let needs: Vec<bool> = gf.inputs.iter().map(Var::requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: &gf.inputs,
                output: &var.0.value,
                grad: &grad,
                needs: &needs,
            };
            let input_grads = (gf.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), gf.inputs.len());
            for ((input, g), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
                if let (Some(g), true) = (g, *need) {
                    debug_assert_eq!(g.shape(), input.shape(), "gradient shape mismatch");
                    accumulate(&mut pending, input.key(), g);
                }
            }
        }
        Grads { map: leaves }
    }

    /// Nodes reachable through recorded ops, inputs before outputs.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !var.requires_grad() || !seen.insert(var.key()) {
                continue;
            }
            stack.push((var.clone(), true));
            if let Some(gf) = &var.0.grad_fn {
                for input in gf.inputs.iter().rev() {
                    if !seen.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate(map: &mut HashMap<*const Node, Tensor>, key: *const Node, g: Tensor) {
    match map.get_mut(&key) {
        Some(existing) => existing.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

/// Gradients of leaf variables after a backward sweep.
pub struct Grads {
    map: HashMap<*const Node, Tensor>,
}

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.map.get(&var.key())
    }

    /// Gradient of `var`, or zeros if it did not influence the output.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

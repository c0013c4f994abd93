use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Wengert list for one forward/backward pass.
///
/// Nodes are appended in execution order, so parents always precede
/// children. A tape belongs to one thread and one training step.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, backward_done: false }
    }

    /// A tape that records values only; every leaf behaves as a constant.
    pub fn no_grad() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op output. `backward` receives the output gradient, the
    /// parent values and the output value, and returns one optional
    /// gradient per parent (same shapes as the parents).
    pub(crate) fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(Box::new(backward) as BackwardFn) } else { None };
        self.nodes.push(Node { value, parents: parents.to_vec(), backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (Some(bw), Some(g)) = (node.backward.as_ref(), grads[i].as_ref()) else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = bw(g, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward loss w.r.t. `v`. `None` when `v` does not
    /// require grad or is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones_and_square_gives_twice() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64 - 1.5));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn([4], |i| i as f64 * 0.3 - 0.4));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expect: Vec<f64> = tape.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_repeat_and_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones([3]));
        assert!(tape.backward(x).is_err());
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones([3]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones([2]));
        let c = tape.constant(Tensor::full([2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn no_grad_tape_records_values_only() {
        let mut tape = Tape::no_grad();
        let x = tape.param(Tensor::ones([2]));
        assert!(!tape.requires_grad(x));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 2.0);
    }
}

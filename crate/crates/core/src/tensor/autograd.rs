use std::collections::{HashMap, HashSet};

use super::{BackwardCtx, Element, Result, Tensor, TensorError};

/// Topologically ordered record of the tracked tensors reachable from a
/// root. Every op's inputs precede it.
pub struct Graph<T: Element> {
    order: Vec<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    pub fn from_root(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // iterative post-order DFS; the bool marks "children already pushed"
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.is_tracked() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.0.grad_fn {
                for input in f.inputs.iter().rev() {
                    if input.is_tracked() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op names in execution order (leaves omitted).
    pub fn ops(&self) -> Vec<&'static str> {
        self.order.iter().filter_map(|t| t.op_name()).collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.order
    }

    /// Runs adjoints in reverse order, seeding the root with `seed`.
    /// Returns the number of ops whose backward ran.
    fn run(&self, seed: Vec<T>) -> usize {
        let Some(root) = self.order.last() else {
            return 0;
        };
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(root.id(), seed);
        let mut visited_ops = 0;
        for t in self.order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.grad_fn {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    visited_ops += 1;
                    let ctx = BackwardCtx {
                        grad_out: &g,
                        out: &t.0.data,
                        inputs: &f.inputs,
                    };
                    let grads = (f.backward)(&ctx);
                    debug_assert_eq!(grads.len(), f.inputs.len(), "{}", f.name);
                    for (input, grad) in f.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.is_tracked() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel(), "{}", f.name);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        visited_ops
    }
}

impl<T: Element> Tensor<T> {
    /// Populates `grad` on every tracked leaf reachable from this scalar.
    /// Gradients add onto whatever a previous backward left behind; clear
    /// them with [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        self.backward_counted().map(|_| ())
    }

    /// Like [`Tensor::backward`], also returning how many ops were visited.
    pub fn backward_counted(&self) -> Result<usize> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.is_tracked() {
            return Err(TensorError::Detached);
        }
        let graph = Graph::from_root(self);
        Ok(graph.run(vec![T::one()]))
    }
}

/// Compares the analytic gradient of scalar `f` at `x` with central
/// differences of step `eps`. Returns
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(super::invalid("grad_check", "eps must be positive"));
    }
    let leaf = x.detach().requires_grad();
    let y = f(&leaf)?;
    let first = y.item()?;
    let second = f(&x.detach())?.item()?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let analytic = if y.is_tracked() {
        y.backward()?;
        leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };

    let base = x.to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = base.clone();
            probe[i] += delta;
            f(&Tensor::from_vec(probe, x.shape())?)?.item()
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

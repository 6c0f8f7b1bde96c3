//! Reverse-topological gradient sweep.

use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq)]
enum Mark {
    OnStack,
    Done,
}

/// Populates gradients of every reachable `requires_grad` tensor, seeding the
/// scalar `loss` with gradient 1. Contributions from fan-out accumulate
/// additively; the visit order is the reverse of a deterministic depth-first
/// post-order, so gradients for a fixed graph are bit-reproducible.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Internal(format!(
            "backward expects a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }

    let order = topo_order(loss)?;
    loss.accumulate_grad(&[T::one()]);

    for node in order.iter().rev() {
        let Some(back) = node.backward_fn() else {
            continue;
        };
        // A recorded node with no gradient received no contribution from the
        // loss (dead branch); nothing to propagate.
        let grad = node.grad();
        if let Some(g) = grad {
            back(&g);
        }
    }
    Ok(())
}

/// Iterative DFS post-order over parents. Rejects cycles, which the public
/// API cannot construct but a corrupted graph could.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut marks: HashMap<u64, Mark> = HashMap::new();
    let mut order: Vec<Tensor<T>> = Vec::new();
    // (node, next parent index to visit)
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    marks.insert(root.id(), Mark::OnStack);

    while let Some((node, idx)) = stack.pop() {
        let parents = node.parents();
        if idx < parents.len() {
            let parent = parents[idx].clone();
            stack.push((node, idx + 1));
            match marks.get(&parent.id()) {
                Some(Mark::OnStack) => {
                    return Err(Error::Internal(
                        "cycle detected in recorded graph".to_string(),
                    ));
                }
                Some(Mark::Done) => {}
                None => {
                    marks.insert(parent.id(), Mark::OnStack);
                    stack.push((parent, 0));
                }
            }
        } else {
            marks.insert(node.id(), Mark::Done);
            order.push(node);
        }
    }
    Ok(order)
}

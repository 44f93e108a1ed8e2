//! The tape: build a small expression, backpropagate, and compare against
//! central differences.

use tubelink::tensor::{finite_difference_check, Graph, Tensor};

fn main() -> tubelink::Result<()> {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.75])?, true);
    let x = g.constant(Tensor::matrix(1, 2, vec![1.5, -0.5])?);

    // softmax(x·W) weighted by fixed scores, summed to a scalar
    let logits = g.matmul(x, w)?;
    let probs = g.softmax(logits);
    let scores = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0])?);
    let weighted = g.mul(probs, scores)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;

    println!("loss      = {:.6}", g.value(loss).item());
    println!("probs     = {:?}", g.value(probs).data());
    println!("dloss/dW  = {:?}", g.grad(w).expect("w is trainable"));

    let err = finite_difference_check(
        |g, w| {
            let x = g.constant(Tensor::matrix(1, 2, vec![1.5, -0.5])?);
            let l = g.matmul(x, w)?;
            let p = g.softmax(l);
            let s = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0])?);
            let m = g.mul(p, s)?;
            Ok(g.sum(m))
        },
        g.value(w),
        1e-6,
    )?;
    println!("max relative error against finite differences: {err:.2e}");
    Ok(())
}

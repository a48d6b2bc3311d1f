// Usage: cargo run --example autodiff_gradcheck
//
// Builds a small graph by hand, reads back gradients and compares them with
// central finite differences.

use qmatch::tensor::gradcheck::finite_difference_check;
use qmatch::{Graph, Tensor};

fn main() -> qmatch::Result<()> {
    let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5])?;
    let w = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8])?;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.param(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.relu(h);
    let p = g.softmax_rows(h, 0.5)?;
    let sq = g.mul(p, p)?;
    let loss = g.mean(sq);
    g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).item());
    println!("dL/dW = {:?}", g.grad(wv).unwrap().data());

    let err = finite_difference_check(&[w], 1e-6, |g, p| {
        let xv = g.leaf(x.clone());
        let h = g.matmul(xv, p[0])?;
        let h = g.relu(h);
        let p = g.softmax_rows(h, 0.5)?;
        let sq = g.mul(p, p)?;
        Ok(g.mean(sq))
    })?;
    println!("largest relative error against finite differences: {err:.2e}");
    Ok(())
}

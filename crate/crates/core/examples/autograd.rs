//! Reverse-mode gradients on a tiny tape, checked against a finite
//! difference.

use condmoe::tensor::{Tape, Tensor};

fn loss(tape: &Tape, x: condmoe::tensor::Var, w: condmoe::tensor::Var) -> condmoe::Result<condmoe::tensor::Var> {
    let y = tape.linear(x, w, None)?;
    let y = tape.softmax(y)?;
    let y = tape.gelu(y);
    Ok(tape.sum(y))
}

fn main() -> condmoe::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?;
    let w = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6])?;

    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone());
    let l = loss(&tape, xv, wv)?;
    let grads = tape.backward(l)?;
    let g = grads.get(wv).expect("w requires grad");
    println!("loss {:.6}", tape.value(l).item());
    println!("dL/dW {:?}", g.data());

    let h = 1e-5;
    let mut numeric = Vec::new();
    for i in 0..w.numel() {
        let eval = |delta: f64| -> condmoe::Result<f64> {
            let mut wp = w.clone();
            wp.data_mut()[i] += delta;
            let t = Tape::new();
            let (a, b) = (t.constant(x.clone()), t.constant(wp));
            let l = loss(&t, a, b)?;
            let v = t.value(l).item();
            Ok(v)
        };
        numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    let err = g.data().iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |analytic - numeric| {err:.2e}");
    Ok(())
}

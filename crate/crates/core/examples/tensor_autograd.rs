//! Records a small graph on a tape and reads back gradients.

use msanet::{Fill, Tape, Tensor};

fn main() -> msanet::Result<()> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new([1, 2, 2, 2], Fill::Uniform { lo: -1.0, hi: 1.0 }, 7)?);
    let w = tape.input(Tensor::full([1, 2, 2, 2], 0.5));
    let y = tape.mul(x, w)?;
    let y = tape.sigmoid(y);
    let loss = tape.sum(y);
    println!("loss = {:.6}", tape.value(loss).item());
    let xv = tape.value(x).clone();
    let grads = tape.backward(loss)?;
    for (v, g) in xv.data().iter().zip(grads.get(x).expect("x is tracked").data()) {
        println!("x = {v:+.4}  dloss/dx = {g:.6}");
    }
    Ok(())
}

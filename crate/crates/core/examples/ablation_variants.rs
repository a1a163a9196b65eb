//! Parameter counts and one forward/backward pass for every ablation variant.

use std::time::Instant;

use msanet::{Model, ModelConfig, Tape, Tensor, Variant};

fn main() -> msanet::Result<()> {
    let x = Tensor::uniform([1, 3, 32, 32], 0.0, 1.0, 5);
    for v in Variant::ALL {
        let started = Instant::now();
        let m = Model::build(ModelConfig::default().variant(v), 0)?;
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, true);
        let xv = tape.input(x.clone());
        let y = m.forward(&mut tape, &p, xv)?;
        let t = tape.constant(x.clone());
        let loss = tape.loss_lp(t, y, 2)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        println!("{:<10} {:>9} params  loss {value:.4e}  {:.2}s", v.name(), m.count_params(), started.elapsed().as_secs_f64());
    }
    Ok(())
}

//! Runs each building block once and prints shapes and parameter counts.

use msanet::blocks::{Afeb, Afub, Amb, ResidualBlock};
use msanet::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> msanet::Result<()> {
    let c = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let res = ResidualBlock::new(&mut store, &mut rng, "res", c, 2 * c, 2)?;
    let afeb = Afeb::new(&mut store, &mut rng, "afeb", c)?;
    let amb = Amb::new(&mut store, &mut rng, "amb", c, &[1, 2, 3, 4])?;
    let afub = Afub::new(&mut store, &mut rng, "afub", c, true)?;

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::uniform([1, c, 32, 32], -1.0, 1.0, 1));
    let down = res.forward(&mut tape, &p, x)?;
    let fe = afeb.forward(&mut tape, &p, x)?;
    let tr = amb.forward_traced(&mut tape, &p, x)?;
    let up = afub.forward(&mut tape, &p, down, x)?;

    println!("residual s2 {} -> {}  ({} params)", tape.shape(x), tape.shape(down), ResidualBlock::param_count(c, 2 * c, 2));
    println!("AFeB        {} -> {}  ({} params)", tape.shape(x), tape.shape(fe), Afeb::param_count(c));
    println!("AMB         {} -> {}  ({} params)", tape.shape(x), tape.shape(tr.output), Amb::param_count(c, 4));
    let cf = tape.value(tr.channel_factor);
    println!("  channel factors in [{:.3}, {:.3}]", cf.data().iter().cloned().fold(2.0, f32::min), cf.data().iter().cloned().fold(0.0, f32::max));
    println!("AFuB        {} + {} -> {}  ({} params)", tape.shape(down), tape.shape(x), tape.shape(up), Afub::param_count(c, true));
    Ok(())
}

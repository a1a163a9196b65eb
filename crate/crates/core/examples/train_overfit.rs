//! Overfits the default model to a single 32x32 noisy/clean pair.
//!
//! cargo run --example train_overfit -- [steps]

use std::time::Instant;

use msanet::data::add_awgn;
use msanet::{Model, ModelConfig, Tensor, TrainSchedule, Trainer};

fn main() -> msanet::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let clean = Tensor::uniform([1, 3, 32, 32], 0.2, 0.8, 11);
    let noisy = add_awgn(&clean, 30.0, 12);
    let schedule = TrainSchedule {
        epochs: 1,
        steps_per_epoch: steps,
        lr0: 1e-4,
        loss_p: 2,
        ..TrainSchedule::default()
    };
    let mut trainer = Trainer::new(Model::build(ModelConfig::default(), 0)?, schedule)?;
    let started = Instant::now();
    let first = trainer.step_on(&noisy, &clean)?;
    let mut last = first;
    for step in 1..steps {
        last = trainer.step_on(&noisy, &clean)?;
        if step % 50 == 0 {
            println!("step {step:4}  loss {last:.6e}  ({:.1}s)", started.elapsed().as_secs_f64());
        }
    }
    println!("initial {first:.6e}  final {last:.6e}  ratio {:.4}", last / first);
    Ok(())
}

//! Trains the reduced model on procedural scenes and scores held-out images.
//!
//! cargo run --release --example desk_scale -- [epochs] [lr0] [size]

use std::time::Instant;

use msanet::data::{synthetic_scene, ImageSample};
use msanet::metrics::evaluate;
use msanet::{Model, ModelConfig, Passthrough, TrainSchedule, Trainer};

fn main() -> msanet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(128);
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();

    let pair = |i: u64| ImageSample::synthesize(synthetic_scene(3, size, size, i), 30.0, 1000 + i, format!("scene{i}"));
    let train: Vec<ImageSample> = (0..20).map(pair).collect();
    let held: Vec<ImageSample> = (100..105).map(pair).collect();

    let schedule = TrainSchedule {
        epochs,
        // one epoch covers the training pixels once
        steps_per_epoch: (20 * size * size).div_ceil(8 * 64 * 64),
        lr0,
        ..TrainSchedule::default()
    };
    let model = Model::build(ModelConfig::with_depths(3, 16, &[4, 3, 2, 1]), 0)?;
    let mut trainer = Trainer::new(model, schedule)?;
    let started = Instant::now();
    trainer.fit(&train, None, None, None)?;
    let noisy = evaluate(&Passthrough, &held)?;
    let denoised = evaluate(&trainer.model, &held)?;
    println!(
        "{} steps in {:.0}s  noisy {:.3} dB / {:.4}  denoised {:.3} dB / {:.4}  gain {:+.3} dB",
        trainer.step,
        started.elapsed().as_secs_f64(),
        noisy.mean_psnr,
        noisy.mean_ssim,
        denoised.mean_psnr,
        denoised.mean_ssim,
        denoised.mean_psnr - noisy.mean_psnr
    );
    Ok(())
}

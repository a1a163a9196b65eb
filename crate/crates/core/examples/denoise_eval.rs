//! Scores the identity denoiser and an untrained model on the same noisy
//! scenes.

use msanet::data::{synthetic_scene, ImageSample};
use msanet::metrics::evaluate;
use msanet::{Model, ModelConfig, Passthrough};

fn main() -> msanet::Result<()> {
    let pairs: Vec<ImageSample> = (0..3)
        .map(|i| ImageSample::synthesize(synthetic_scene(3, 50, 60, i), 30.0, 10 + i, format!("scene{i}")))
        .collect();
    let floor = evaluate(&Passthrough, &pairs)?;
    let model = Model::build(ModelConfig::with_depths(3, 8, &[2, 2, 1, 1]), 0)?;
    let untrained = evaluate(&model, &pairs)?;
    print!("{}", floor.to_csv());
    println!("passthrough {:.3} dB, untrained model {:.3} dB", floor.mean_psnr, untrained.mean_psnr);
    Ok(())
}

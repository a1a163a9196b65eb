//! Trains a few steps, checkpoints, resumes and compares with an
//! uninterrupted run.

use msanet::data::{synthetic_scene, ImageSample};
use msanet::{Checkpoint, Model, ModelConfig, TrainSchedule, Trainer};

fn main() -> msanet::Result<()> {
    let data: Vec<ImageSample> = (0..2)
        .map(|i| ImageSample::synthesize(synthetic_scene(3, 32, 32, i), 30.0, i, format!("s{i}")))
        .collect();
    let schedule = TrainSchedule {
        epochs: 2,
        steps_per_epoch: 3,
        batch: 2,
        patch: 16,
        ..TrainSchedule::default()
    };
    let fresh = || -> msanet::Result<Trainer> { Trainer::new(Model::build(ModelConfig::with_depths(3, 8, &[2, 1]), 0)?, schedule.clone()) };

    let mut full = fresh()?;
    full.fit(&data, None, None, None)?;

    let mut part = fresh()?;
    part.fit(&data, None, None, Some(2))?;
    let path = std::env::temp_dir().join("msanet_example.msan");
    part.checkpoint().save(&path)?;
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    resumed.fit(&data, None, None, None)?;

    let curve: Vec<f32> = part.report.step_losses.iter().chain(&resumed.report.step_losses).copied().collect();
    println!("uninterrupted {:?}", full.report.step_losses);
    println!("resumed       {curve:?}");
    println!("identical: {}", curve == full.report.step_losses && resumed.model.params == full.model.params);
    Ok(())
}

//! Writes a procedural scene and noisy copies at several noise levels.
//!
//! cargo run --example synth_noise -- [out_dir]

use msanet::data::{add_awgn, save_image, synthetic_scene};
use msanet::metrics::{psnr, ssim};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synth_out".into());
    std::fs::create_dir_all(&dir)?;
    let clean = synthetic_scene(3, 128, 128, 1);
    save_image(&clean, format!("{dir}/clean.png"))?;
    for sigma in [10.0, 30.0, 50.0] {
        let noisy = add_awgn(&clean, sigma, 2);
        save_image(&noisy, format!("{dir}/sigma{sigma}.png"))?;
        println!("sigma {sigma:>4}: PSNR {:.2} dB  SSIM {:.4}", psnr(&noisy, &clean, 1.0)?, ssim(&noisy.clamp(0.0, 1.0), &clean)?);
    }
    Ok(())
}

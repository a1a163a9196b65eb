//! Modulated deformable convolution: zero offsets reproduce a plain
//! convolution, shifted offsets move the sampling grid.

use msanet::ops::{bilinear_sample, conv2d_forward, modulated_deform_conv_forward};
use msanet::{ConvSpec, Tensor};

fn main() -> msanet::Result<()> {
    let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32).collect())?;
    println!("bilinear at (1.5, 0.5) = {}", bilinear_sample(&x, 1.5, 0.5, 0, 0));

    let spec = ConvSpec::new(1, 1, 3).padding(1);
    let w = Tensor::full(spec.weight_shape(), 1.0 / 9.0);
    let (oh, ow) = spec.output_hw(4, 4)?;
    let taps = spec.taps();
    let mask = Tensor::full([1, taps, oh, ow], 1.0);
    let plain = conv2d_forward(&x, &w, None, &spec)?;
    let still = modulated_deform_conv_forward(&x, &Tensor::zeros([1, 2 * taps, oh, ow]), &mask, &w, None, &spec)?;
    println!("zero offsets equal conv: {}", plain == still);

    // half a pixel to the right for every tap
    let mut off = Tensor::zeros([1, 2 * taps, oh, ow]);
    for t in 0..taps {
        for v in &mut off.data_mut()[2 * t * oh * ow..(2 * t + 1) * oh * ow] {
            *v = 0.5;
        }
    }
    let shifted = modulated_deform_conv_forward(&x, &off, &mask, &w, None, &spec)?;
    println!("conv    row 1: {:?}", &plain.data()[4..8]);
    println!("shifted row 1: {:?}", &shifted.data()[4..8]);
    Ok(())
}

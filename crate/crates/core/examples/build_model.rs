//! Builds the default denoiser and prints its layout.

use msanet::{Model, ModelConfig, Tape, Tensor};

fn main() -> msanet::Result<()> {
    let config = ModelConfig::default();
    let model = Model::build(config.clone(), 0)?;
    println!("{} parameters", model.count_params());
    for (s, seq) in config.effective_subnets().iter().enumerate() {
        let names: Vec<String> = seq.iter().map(|k| k.to_string()).collect();
        println!("scale {s} ({} ch): {}", config.scale_channels[s], names.join(" "));
    }
    let x = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, 3);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    for (i, f) in model.encode(&mut tape, &p, xv)?.iter().enumerate() {
        println!("encoder {i}: {}", tape.shape(*f));
    }
    println!("output: {}", model.infer(&x)?.shape());
    Ok(())
}

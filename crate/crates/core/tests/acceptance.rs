//! Acceptance run: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{bilinear_cases, conv_cases, deform_cases, linear_cases, rand_tensor, rng, transpose_conv_cases};
use msanet::blocks::{Afeb, Afub, Amb, ResidualBlock};
use msanet::data::{add_awgn, synthetic_scene, ImageSample};
use msanet::gradcheck::{check_all_ops, check_blocks, check_default_model, GradCheckReport, COMPOSITE_EPS, DEFAULT_EPS};
use msanet::metrics::{evaluate, psnr, ssim};
use msanet::ops::{conv2d_forward, modulated_deform_conv_forward};
use msanet::train::loss_lp;
use msanet::{Checkpoint, Model, ModelConfig, ParamStore, Passthrough, Shape, Tape, Tensor, TrainSchedule, Trainer, Variant};

const OP_RTOL: f64 = 1e-4;
const OP_CASES: usize = 60;

fn zero(store: &mut ParamStore, name: &str) {
    store.value_mut(name).unwrap().data_mut().fill(0.0);
}

fn within(elapsed: Duration, limit: Duration, what: &str) {
    assert!(elapsed < limit, "{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64());
}

fn operator_oracles() -> String {
    let started = Instant::now();
    let counts = [
        ("conv2d", conv_cases(1, OP_CASES, OP_RTOL)),
        ("transpose_conv2d", transpose_conv_cases(2, OP_CASES, OP_RTOL)),
        ("linear", linear_cases(3, OP_CASES, OP_RTOL)),
        ("bilinear_sample", bilinear_cases(4, OP_CASES, OP_RTOL)),
        ("modulated_deform_conv", deform_cases(5, OP_CASES, OP_RTOL)),
    ];
    for (op, n) in counts {
        assert!(n >= 50, "{op}: only {n} cases");
    }
    within(started.elapsed(), Duration::from_secs(60), "oracle suite");
    format!("5 ops x {OP_CASES} cases at rtol {OP_RTOL:e} in {:.1}s", started.elapsed().as_secs_f64())
}

fn gradient_suite() -> String {
    let started = Instant::now();
    let mut reports: Vec<GradCheckReport> = check_all_ops(0, DEFAULT_EPS).unwrap();
    reports.extend(check_blocks(0, COMPOSITE_EPS).unwrap());
    let afeb = check_blocks(0, DEFAULT_EPS).unwrap().into_iter().find(|r| r.target == "afeb").unwrap();
    reports.push(afeb);
    let model = check_default_model(0, COMPOSITE_EPS).unwrap();
    assert_eq!(model.checked + model.skipped, 20, "model check probes 20 parameters");
    reports.push(model);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    assert!(failed.is_empty(), "failing checks:\n{}", failed.join("\n"));
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    within(started.elapsed(), Duration::from_secs(300), "gradient suite");
    format!("{} checks, worst rel err {worst:.2e}, {:.1}s", reports.len(), started.elapsed().as_secs_f64())
}

fn reduction_identities() -> String {
    // deformable conv at zero offsets and unit mask
    let mut r = rng(30);
    for _ in 0..60 {
        let (dims, sp) = common::random_geometry(&mut r);
        let (oh, ow) = sp.output_hw(dims[2], dims[3]).unwrap();
        let x = rand_tensor(dims, &mut r);
        let w = rand_tensor(sp.weight_shape().dims(), &mut r);
        let b = common::rand_bias(sp.out_channels, &mut r);
        let off = Tensor::zeros([dims[0], 2 * sp.taps(), oh, ow]);
        let mask = Tensor::full([dims[0], sp.taps(), oh, ow], 1.0);
        let d = modulated_deform_conv_forward(&x, &off, &mask, &w, b.as_ref(), &sp).unwrap();
        assert_eq!(d, conv2d_forward(&x, &w, b.as_ref(), &sp).unwrap(), "{sp:?}");
    }

    // zeroed final conv leaves the skip input
    let c = 8;
    let mut r = rng(31);
    let mut store = ParamStore::new();
    let res = ResidualBlock::new(&mut store, &mut r, "res", c, c, 1).unwrap();
    let afeb = Afeb::new(&mut store, &mut r, "afeb", c).unwrap();
    let amb = Amb::new(&mut store, &mut r, "amb", c, &[1, 2, 3, 4]).unwrap();
    let afub = Afub::new(&mut store, &mut r, "afub", c, true).unwrap();
    let neutral = Amb::new(&mut store, &mut r, "neutral", c, &[1, 2, 3, 4]).unwrap();
    let finals: Vec<_> = [res.final_conv(), afeb.final_conv(), amb.final_conv(), afub.final_conv()]
        .iter()
        .flat_map(|k| [k.weight.clone(), k.bias.clone()])
        .collect();
    for n in &finals {
        zero(&mut store, n);
    }
    for n in [&neutral.fc.weight, &neutral.fc.bias, &neutral.spatial.weight, &neutral.spatial.bias] {
        zero(&mut store, n);
    }
    let x = Tensor::uniform([2, c, 12, 12], -2.0, 2.0, 32);
    let coarse = Tensor::uniform([2, 2 * c, 6, 6], -2.0, 2.0, 33);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (xv, cv) = (tape.constant(x.clone()), tape.constant(coarse));
    for (name, y) in [
        ("residual", res.forward(&mut tape, &p, xv).unwrap()),
        ("AFeB", afeb.forward(&mut tape, &p, xv).unwrap()),
        ("AMB", amb.forward(&mut tape, &p, xv).unwrap()),
    ] {
        assert_eq!(tape.value(y), &x, "{name}");
    }
    let tr = afub.forward_traced(&mut tape, &p, cv, xv).unwrap();
    assert_eq!(tape.value(tr.output), tape.value(tr.fused), "AFuB");

    let tr = neutral.forward_traced(&mut tape, &p, xv).unwrap();
    for f in [tr.channel_factor, tr.spatial_factor] {
        assert!(tape.value(f).data().iter().all(|&v| v == 1.0), "AMB factors at neutral point");
    }
    "deform == conv on 60 geometries; 4 block identities; AMB neutral factors".into()
}

fn architecture_contract() -> String {
    let m = Model::build(ModelConfig::default(), 0).unwrap();
    let x = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, 40);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let xv = tape.constant(x);
    let feats = m.encode(&mut tape, &p, xv).unwrap();
    let got: Vec<Shape> = feats.iter().map(|&f| tape.shape(f)).collect();
    let want = [Shape::new(1, 32, 64, 64), Shape::new(1, 64, 32, 32), Shape::new(1, 128, 16, 16), Shape::new(1, 256, 8, 8)];
    assert_eq!(got, want);

    for h in (16..=64).step_by(8) {
        for w in (16..=64).step_by(8) {
            let x = Tensor::uniform([1, 3, h, w], 0.0, 1.0, (h * 100 + w) as u64);
            assert_eq!(m.infer(&x).unwrap().shape(), x.shape(), "{h}x{w}");
        }
    }

    for v in Variant::ALL {
        let vm = Model::build(ModelConfig::default().variant(v), 1).unwrap();
        let mut tape = Tape::new();
        let p = vm.params.bind(&mut tape, true);
        let x = tape.input(Tensor::uniform([1, 3, 32, 32], 0.0, 1.0, 41));
        let y = vm.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 3, 32, 32), "{}", v.name());
        let t = tape.constant(Tensor::uniform([1, 3, 32, 32], 0.0, 1.0, 42));
        let loss = tape.loss_lp(t, y, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let n = grads.params().filter(|(_, g)| g.all_finite()).count();
        assert_eq!(n, vm.params.len(), "{}: every parameter receives a finite gradient", v.name());
    }
    format!("channels 32/64/128/256 at 1, 1/2, 1/4, 1/8; 49 sizes; 9 variants; {} params", m.count_params())
}

fn optimization_smoke() -> String {
    let started = Instant::now();
    let clean = Tensor::uniform([1, 3, 32, 32], 0.2, 0.8, 11);
    let noisy = add_awgn(&clean, 30.0, 12);
    let schedule = TrainSchedule {
        epochs: 1,
        steps_per_epoch: 500,
        lr0: 1e-4,
        loss_p: 2,
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(Model::build(ModelConfig::default(), 0).unwrap(), schedule).unwrap();
    let initial = loss_lp(&clean, &t.model.infer(&noisy).unwrap(), 2).unwrap();
    for _ in 0..500 {
        t.step_on(&noisy, &clean).unwrap();
    }
    let last = loss_lp(&clean, &t.model.infer(&noisy).unwrap(), 2).unwrap();
    let ratio = last / initial;
    assert!(ratio < 0.1, "loss {initial:.4e} -> {last:.4e} (ratio {ratio:.4})");
    within(started.elapsed(), Duration::from_secs(600), "overfit run");
    format!("loss {initial:.3e} -> {last:.3e} (ratio {ratio:.2e}) in {:.0}s", started.elapsed().as_secs_f64())
}

fn denoising_gain() -> String {
    let started = Instant::now();
    let size = 128;
    let pair = |i: u64| ImageSample::synthesize(synthetic_scene(3, size, size, i), 30.0, 1000 + i, format!("scene{i}"));
    let train: Vec<ImageSample> = (0..20).map(pair).collect();
    let held: Vec<ImageSample> = (100..105).map(pair).collect();
    let schedule = TrainSchedule {
        epochs: 30,
        steps_per_epoch: (20 * size * size).div_ceil(8 * 64 * 64),
        lr0: 1e-4,
        batch: 8,
        patch: 64,
        sigma: 30.0,
        ..TrainSchedule::default()
    };
    let model = Model::build(ModelConfig::with_depths(3, 16, &[4, 3, 2, 1]), 0).unwrap();
    let mut t = Trainer::new(model, schedule).unwrap();
    t.fit(&train, None, None, None).unwrap();
    let noisy = evaluate(&Passthrough, &held).unwrap();
    let denoised = evaluate(&t.model, &held).unwrap();
    let gain = denoised.mean_psnr - noisy.mean_psnr;
    assert!(gain >= 1.0, "PSNR gain {gain:.3} dB");
    assert!(denoised.mean_ssim > noisy.mean_ssim, "SSIM {:.4} -> {:.4}", noisy.mean_ssim, denoised.mean_ssim);
    format!(
        "PSNR {:.2} -> {:.2} dB ({gain:+.2}), SSIM {:.4} -> {:.4}, {} steps in {:.0}s",
        noisy.mean_psnr,
        denoised.mean_psnr,
        noisy.mean_ssim,
        denoised.mean_ssim,
        t.step,
        started.elapsed().as_secs_f64()
    )
}

fn noise_floor() -> String {
    let pairs: Vec<ImageSample> = (0..5)
        .map(|i| ImageSample::synthesize(synthetic_scene(3, 256, 256, 200 + i), 30.0, 300 + i, format!("floor{i}")))
        .collect();
    let r = evaluate(&Passthrough, &pairs).unwrap();
    let expected = 10.0 * (1.0 / (30.0f64 / 255.0).powi(2)).log10();
    assert!((r.mean_psnr - 18.59).abs() <= 0.15, "mean PSNR {:.4}", r.mean_psnr);
    format!("mean PSNR {:.3} dB (expected {expected:.3})", r.mean_psnr)
}

fn determinism_and_resume() -> String {
    let data: Vec<ImageSample> = (0..3)
        .map(|i| ImageSample::synthesize(synthetic_scene(3, 32, 32, 60 + i), 30.0, 70 + i, format!("d{i}")))
        .collect();
    let config = ModelConfig::with_depths(3, 8, &[2, 2, 1]);
    let schedule = TrainSchedule {
        epochs: 3,
        steps_per_epoch: 4,
        batch: 2,
        patch: 16,
        lr0: 1e-3,
        seed: 5,
        ..TrainSchedule::default()
    };
    let fresh = || Trainer::new(Model::build(config.clone(), 5).unwrap(), schedule.clone()).unwrap();
    let mut a = fresh();
    a.fit(&data, None, None, None).unwrap();
    let mut b = fresh();
    b.fit(&data, None, None, None).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.report.step_losses), bits(&b.report.step_losses), "loss curves differ");
    assert_eq!(a.model.params, b.model.params);

    let mut c = fresh();
    c.fit(&data, None, None, Some(5)).unwrap();
    let mut losses = c.report.step_losses.clone();
    let bytes = c.checkpoint().to_bytes().unwrap();
    drop(c);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.fit(&data, None, None, None).unwrap();
    losses.extend_from_slice(&resumed.report.step_losses);
    assert_eq!(losses.len(), a.report.step_losses.len());
    for (i, (&x, &y)) in losses.iter().zip(&a.report.step_losses).enumerate() {
        assert!(((x - y).abs() as f64) <= 1e-5 * (y.abs() as f64).max(1.0), "step {i}: {x} vs {y}");
    }
    for ((n, p), (_, q)) in resumed.model.params.iter().zip(a.model.params.iter()) {
        for (x, y) in p.value.data().iter().zip(q.value.data()) {
            assert!(((x - y).abs() as f64) <= 1e-5 * (y.abs() as f64).max(1.0), "{n}: {x} vs {y}");
        }
    }
    format!("{} steps bitwise repeatable; resume after 5 steps matches", losses.len())
}

fn metric_sanity() -> String {
    let clean = synthetic_scene(3, 256, 256, 90);
    let noisy = add_awgn(&clean, 30.0, 91);
    let p = psnr(&noisy, &clean, 1.0).unwrap();
    assert!((p - 18.588378514285854).abs() <= 0.1, "AWGN PSNR {p}");
    assert_eq!(p, psnr(&clean, &noisy, 1.0).unwrap());
    assert_eq!(psnr(&clean, &clean, 1.0).unwrap(), f64::INFINITY);
    let shifted = clean.map(|v| v + 0.1);
    assert!((psnr(&clean, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-5);

    assert_eq!(ssim(&clean, &clean).unwrap(), 1.0);
    assert_eq!(ssim(&noisy, &noisy).unwrap(), 1.0);
    let s = ssim(&noisy, &clean).unwrap();
    assert!((-1.0..1.0).contains(&s));

    let checker = Tensor::from_vec([1, 1, 32, 32], (0..1024).map(|i| ((i / 32 + i % 32) % 2) as f32).collect()).unwrap();
    let inverse = checker.map(|v| 1.0 - v);
    let anti = ssim(&checker, &inverse).unwrap();
    assert!(anti < 0.0, "checkerboard vs inverse {anti}");

    let a = Tensor::full([1, 1, 16, 16], 0.5);
    let b = a.map(|v| v + 0.1);
    let closed = ssim(&a, &b).unwrap();
    assert!((closed - 0.9836092373390778).abs() < 1e-9, "constant SSIM {closed}");

    let base = synthetic_scene(1, 128, 128, 92);
    let ladder: Vec<f64> = [10.0, 30.0, 50.0].iter().map(|&s| psnr(&add_awgn(&base, s, 93), &base, 1.0).unwrap()).collect();
    assert!(ladder[0] > ladder[1] && ladder[1] > ladder[2], "{ladder:?}");
    format!("AWGN PSNR {p:.3} dB; checkerboard SSIM {anti:.3}; constant SSIM {closed:.6}")
}

fn main() {
    let criteria: [(&str, fn() -> String); 9] = [
        ("operator oracle equivalence", operator_oracles),
        ("gradient suite", gradient_suite),
        ("reduction identities", reduction_identities),
        ("architecture contract", architecture_contract),
        ("optimization smoke", optimization_smoke),
        ("denoising gain at desk scale", denoising_gain),
        ("noise-floor calibration", noise_floor),
        ("determinism and persistence", determinism_and_resume),
        ("metric sanity", metric_sanity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {n} ({name}): {msg}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

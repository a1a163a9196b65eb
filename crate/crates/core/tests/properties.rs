//! Invariants checked over randomized inputs.

mod common;

use common::{rand_tensor, rng};
use msanet::blocks::{Afeb, Afub, Amb, ResidualBlock};
use msanet::data::{add_awgn, augment, sample_patch_batch, synthetic_scene, ImageSample};
use msanet::metrics::{psnr, ssim};
use msanet::train::{adam_step, cosine_lr, OptimState};
use msanet::{Checkpoint, Model, ModelConfig, ParamStore, Shape, Tape, Tensor, TrainSchedule, Trainer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero(store: &mut ParamStore, name: &str) {
    store.value_mut(name).unwrap().data_mut().fill(0.0);
}

fn forward_once(store: &ParamStore, input: &Tensor, f: impl FnOnce(&mut Tape, &msanet::Bindings, msanet::Var) -> msanet::Var) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let y = f(&mut tape, &p, x);
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn concat_then_slice_recovers_parts(widths in prop::collection::vec(1usize..4, 1..5), h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let parts: Vec<Tensor> = widths.iter().map(|&c| rand_tensor([2, c, h, w], &mut r)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = parts.iter().map(|p| tape.input(p.clone())).collect();
        let joined = tape.concat_channels(&vars).unwrap();
        let mut start = 0;
        for (p, &c) in parts.iter().zip(&widths) {
            let s = tape.slice_channels(joined, start, c).unwrap();
            prop_assert_eq!(tape.value(s), p);
            start += c;
        }
    }

    #[test]
    fn sum_of_inputs_has_unit_gradients(depth in 1usize..40, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let xs: Vec<_> = (0..depth).map(|_| tape.input(rand_tensor([1, 2, 3, 3], &mut r))).collect();
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x).unwrap();
        }
        let loss = tape.sum(acc);
        let g = tape.backward(loss).unwrap();
        for &x in &xs {
            prop_assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn cosine_lr_never_increases(total in 1u64..5000, lr0 in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, lr0);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn augmentation_commutes_with_residual(flip in any::<bool>(), turns in 0u8..4, n in 1usize..12, seed in any::<u64>()) {
        let clean = Tensor::uniform([1, 3, n, n], 0.0, 1.0, seed);
        let noisy = add_awgn(&clean, 25.0, seed ^ 7);
        let residual = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect::<Vec<f32>>();
        let before = Tensor::from_vec(clean.shape(), residual(&noisy, &clean)).unwrap();
        let after = residual(&augment(&noisy, flip, turns).unwrap(), &augment(&clean, flip, turns).unwrap());
        let moved = augment(&before, flip, turns).unwrap();
        prop_assert_eq!(moved.data(), &after[..]);
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>(), h in 2usize..16, w in 2usize..16) {
        let a = Tensor::uniform([1, 2, h, w], 0.0, 1.0, seed);
        let b = Tensor::uniform([1, 2, h, w], 0.0, 1.0, seed.wrapping_add(1));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_is_bounded(seed in any::<u64>(), h in 11usize..24, w in 11usize..24, sigma in 0f32..120.0) {
        let a = Tensor::uniform([1, 1, h, w], 0.0, 1.0, seed);
        let b = add_awgn(&a, sigma, seed ^ 3).clamp(0.0, 1.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "ssim {}", s);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_keep_or_scale_resolution(h in 8usize..=32, w in 8usize..=32, seed in any::<u64>()) {
        let c = 4;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let res = ResidualBlock::new(&mut store, &mut r, "res", c, c, 1).unwrap();
        let down = ResidualBlock::new(&mut store, &mut r, "down", c, 2 * c, 2).unwrap();
        let afeb = Afeb::new(&mut store, &mut r, "afeb", c).unwrap();
        let amb = Amb::new(&mut store, &mut r, "amb", c, &[1, 2, 3, 4]).unwrap();
        let afub = Afub::new(&mut store, &mut r, "afub", c, false).unwrap();
        let x = Tensor::uniform([1, c, h, w], -1.0, 1.0, seed);
        let same = Shape::new(1, c, h, w);

        prop_assert_eq!(forward_once(&store, &x, |t, p, v| res.forward(t, p, v).unwrap()).shape(), same);
        prop_assert_eq!(forward_once(&store, &x, |t, p, v| afeb.forward(t, p, v).unwrap()).shape(), same);
        prop_assert_eq!(forward_once(&store, &x, |t, p, v| amb.forward(t, p, v).unwrap()).shape(), same);
        prop_assert_eq!(forward_once(&store, &x, |t, p, v| afub.forward(t, p, v, v).unwrap()).shape(), same);
        prop_assert_eq!(
            forward_once(&store, &x, |t, p, v| down.forward(t, p, v).unwrap()).shape(),
            Shape::new(1, 2 * c, h.div_ceil(2), w.div_ceil(2))
        );

        let (eh, ew) = (h & !1, w & !1);
        let up = Afub::new(&mut store, &mut r, "up", c, true).unwrap();
        let fine = Tensor::uniform([1, c, eh, ew], -1.0, 1.0, seed ^ 1);
        let coarse = Tensor::uniform([1, 2 * c, eh / 2, ew / 2], -1.0, 1.0, seed ^ 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (cv, fv) = (tape.constant(coarse), tape.constant(fine));
        let y = up.forward(&mut tape, &p, cv, fv).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(1, c, eh, ew));
    }

    #[test]
    fn amb_factors_stay_in_open_range(seed in any::<u64>(), scale in 0.1f32..2.0) {
        let c = 8;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let amb = Amb::new(&mut store, &mut r, "amb", c, &[1, 2, 3, 4]).unwrap();
        let x = Tensor::uniform([2, c, 9, 11], -scale, scale, seed);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let tr = amb.forward_traced(&mut tape, &p, xv).unwrap();
        for v in [tr.channel_factor, tr.spatial_factor] {
            prop_assert!(tape.value(v).data().iter().all(|&f| f > 0.0 && f < 2.0));
        }
    }

    // f32 sigmoid saturates to exactly 1 for large logits
    #[test]
    fn amb_factors_stay_in_closed_range_for_large_inputs(seed in any::<u64>(), scale in 2.0f32..1000.0) {
        let c = 8;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let amb = Amb::new(&mut store, &mut r, "amb", c, &[1, 2, 3, 4]).unwrap();
        let x = Tensor::uniform([1, c, 9, 11], -scale, scale, seed);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let tr = amb.forward_traced(&mut tape, &p, xv).unwrap();
        for v in [tr.channel_factor, tr.spatial_factor] {
            prop_assert!(tape.value(v).data().iter().all(|&f| (0.0..=2.0).contains(&f)));
        }
    }
}

#[test]
fn zeroed_final_conv_makes_blocks_identity() {
    let c = 4;
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let res = ResidualBlock::new(&mut store, &mut r, "res", c, c, 1).unwrap();
    let afeb = Afeb::new(&mut store, &mut r, "afeb", c).unwrap();
    let amb = Amb::new(&mut store, &mut r, "amb", c, &[1, 2]).unwrap();
    let afub = Afub::new(&mut store, &mut r, "afub", c, true).unwrap();
    for conv in [res.final_conv(), afeb.final_conv(), amb.final_conv(), afub.final_conv()] {
        let (w, b) = (conv.weight.clone(), conv.bias.clone());
        zero(&mut store, &w);
        zero(&mut store, &b);
    }
    let x = Tensor::uniform([2, c, 8, 8], -2.0, 2.0, 5);
    assert_eq!(forward_once(&store, &x, |t, p, v| res.forward(t, p, v).unwrap()), x);
    assert_eq!(forward_once(&store, &x, |t, p, v| afeb.forward(t, p, v).unwrap()), x);
    assert_eq!(forward_once(&store, &x, |t, p, v| amb.forward(t, p, v).unwrap()), x);

    let coarse = Tensor::uniform([2, 2 * c, 4, 4], -2.0, 2.0, 6);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (cv, fv) = (tape.constant(coarse), tape.constant(x));
    let tr = afub.forward_traced(&mut tape, &p, cv, fv).unwrap();
    assert_eq!(tape.value(tr.output), tape.value(tr.fused));
}

#[test]
fn block_parameter_counts_follow_closed_forms() {
    for c in [4, 8, 16] {
        let r = rng(0);
        let count = |build: &dyn Fn(&mut ParamStore, &mut ChaCha8Rng)| {
            let mut s = ParamStore::new();
            build(&mut s, &mut r.clone());
            s.num_scalars()
        };
        assert_eq!(count(&|s, r| drop(ResidualBlock::new(s, r, "b", c, c, 1).unwrap())), ResidualBlock::param_count(c, c, 1));
        assert_eq!(count(&|s, r| drop(ResidualBlock::new(s, r, "b", c, 2 * c, 2).unwrap())), ResidualBlock::param_count(c, 2 * c, 2));
        assert_eq!(count(&|s, r| drop(Afeb::new(s, r, "b", c).unwrap())), Afeb::param_count(c));
        assert_eq!(count(&|s, r| drop(Amb::new(s, r, "b", c, &[1, 2, 3, 4]).unwrap())), Amb::param_count(c, 4));
        assert_eq!(count(&|s, r| drop(Afub::new(s, r, "b", c, true).unwrap())), Afub::param_count(c, true));
        assert_eq!(count(&|s, r| drop(Afub::new(s, r, "b", c, false).unwrap())), Afub::param_count(c, false));
    }
    // hand-counted at C = 4
    assert_eq!(Afeb::param_count(4), (27 * 4 * 9 + 27) + 2 * (9 * 16 + 4));
    assert_eq!(Amb::param_count(4, 4), 4 * (9 * 4 + 1) + (16 + 4) + 10 + (9 * 16 + 4));
    assert_eq!(Afub::param_count(4, true), (8 * 4 * 16 + 4) + (27 * 8 * 9 + 27) + 3 * (9 * 16 + 4));
    assert_eq!(ResidualBlock::param_count(4, 8, 2), (9 * 4 * 8 + 8) + (9 * 64 + 8) + (4 * 8 + 8));
}

fn tiny_config() -> ModelConfig {
    ModelConfig::with_depths(3, 4, &[2, 2, 1])
}

#[test]
fn model_forward_is_deterministic() {
    let x = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, 9);
    let a = Model::build(tiny_config(), 4).unwrap().infer(&x).unwrap();
    let b = Model::build(tiny_config(), 4).unwrap().infer(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn zeroed_final_convs_leave_only_the_head_bias() {
    let mut m = Model::build(tiny_config(), 2).unwrap();
    let names: Vec<(String, String)> = m.final_convs().iter().map(|c| (c.weight.clone(), c.bias.clone())).collect();
    for (w, b) in &names {
        zero(&mut m.params, w);
        zero(&mut m.params, b);
    }
    let head_bias = m.head.bias.clone();
    m.params.value_mut(&head_bias).unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    for seed in 0..3 {
        let y = m.infer(&Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, seed)).unwrap();
        for c in 0..3 {
            let want = [0.1, -0.2, 0.3][c];
            assert!((0..16).all(|i| (0..16).all(|j| y.at(0, c, i, j) == want)));
        }
    }
}

#[test]
fn awgn_residual_is_white() {
    let clean = synthetic_scene(1, 256, 256, 3);
    let noisy = add_awgn(&clean, 30.0, 17);
    let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| (a - b) as f64).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let (mut horiz, mut vert) = (0.0, 0.0);
    for y in 0..256 {
        for x in 0..256 {
            let v = r[y * 256 + x] - mean;
            if x + 1 < 256 {
                horiz += v * (r[y * 256 + x + 1] - mean);
            }
            if y + 1 < 256 {
                vert += v * (r[(y + 1) * 256 + x] - mean);
            }
        }
    }
    assert!((horiz / var).abs() < 0.05, "horizontal lag-1 {}", horiz / var);
    assert!((vert / var).abs() < 0.05, "vertical lag-1 {}", vert / var);
}

#[test]
fn patch_batches_are_seed_deterministic() {
    let pairs: Vec<ImageSample> = (0..3)
        .map(|i| ImageSample::synthesize(synthetic_scene(3, 40, 36, i), 30.0, 50 + i, format!("s{i}")))
        .collect();
    let a = sample_patch_batch(&pairs, 16, 6, 42).unwrap();
    let b = sample_patch_batch(&pairs, 16, 6, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.records, sample_patch_batch(&pairs, 16, 6, 43).unwrap().records);
}

/// Textbook Adam on scalars; moments and weights are held in `f32` like the
/// parameter store, arithmetic in `f64`.
struct ScalarAdam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, w: &mut [f32], g: &[f32], lr: f64) {
        self.t += 1;
        for i in 0..w.len() {
            let gi = g[i] as f64;
            let m = 0.9 * self.m[i] as f64 + 0.1 * gi;
            let v = 0.999 * self.v[i] as f64 + 0.001 * gi * gi;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mhat = m / (1.0 - 0.9f64.powi(self.t));
            let vhat = v / (1.0 - 0.999f64.powi(self.t));
            w[i] = (w[i] as f64 - lr * mhat / (vhat.sqrt() + 1e-8)) as f32;
        }
    }
}

#[test]
fn adam_matches_scalar_reference_on_quadratic_bowl() {
    let curv = [0.5f32, 1.0, 2.0, 4.0, 8.0, 0.1];
    let centre = [1.0f32, -2.0, 0.5, 3.0, -0.25, 0.0];
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_vec([1, 6, 1, 1], vec![0.0; 6]).unwrap(), vec![6]).unwrap();
    let mut opt = OptimState::new(&store);
    let mut reference = ScalarAdam { m: vec![0.0; 6], v: vec![0.0; 6], t: 0 };
    let mut w_ref = vec![0.0f32; 6];
    let grad = |w: &[f32]| -> Vec<f32> { (0..6).map(|i| curv[i] * (w[i] - centre[i])).collect() };
    for step in 0..100 {
        let lr = cosine_lr(step, 100, 0.05);
        let g = grad(store.value("w").unwrap().data());
        store.get_mut("w").unwrap().grad.data_mut().copy_from_slice(&g);
        adam_step(&mut store, &mut opt, lr).unwrap();
        let g_ref = grad(&w_ref);
        reference.step(&mut w_ref, &g_ref, lr);
        for (a, e) in store.value("w").unwrap().data().iter().zip(&w_ref) {
            assert!((a - e).abs() as f64 <= 1e-6 * (e.abs() as f64).max(1.0), "step {step}: {a} vs {e}");
        }
    }
}

fn overfit_pair() -> (Tensor, Tensor) {
    let clean = synthetic_scene(3, 16, 16, 21);
    (add_awgn(&clean, 30.0, 22), clean)
}

#[test]
fn overfit_loss_moving_average_does_not_increase() {
    let schedule = TrainSchedule {
        epochs: 1,
        steps_per_epoch: 200,
        lr0: 1e-3,
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(Model::build(tiny_config(), 1).unwrap(), schedule).unwrap();
    let (noisy, clean) = overfit_pair();
    let losses: Vec<f64> = (0..200).map(|_| t.step_on(&noisy, &clean).unwrap() as f64).collect();
    let avg: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    for (i, pair) in avg.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "moving average rose at window {i}: {} -> {}", pair[0], pair[1]);
    }
}

#[test]
fn checkpoint_round_trip_preserves_all_state() {
    let schedule = TrainSchedule {
        epochs: 2,
        steps_per_epoch: 3,
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(Model::build(tiny_config(), 3).unwrap(), schedule).unwrap();
    let (noisy, clean) = overfit_pair();
    for _ in 0..4 {
        t.step_on(&noisy, &clean).unwrap();
    }
    let ck = t.checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
    let r = Trainer::from_checkpoint(back).unwrap();
    assert_eq!(r.step, 4);
    assert_eq!(r.opt, t.opt);
    assert_eq!(r.model.params, t.model.params);
    assert_eq!(r.schedule, t.schedule);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = synthetic_scene(1, 128, 128, 8);
    let scores: Vec<f64> = [10.0, 30.0, 50.0].iter().map(|&s| psnr(&add_awgn(&clean, s, 1), &clean, 1.0).unwrap()).collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}

use gsc_core::generative::*;
use gsc_core::latent::{synth_dataset, LatentTensor, SynthConfig};
use gsc_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gauss_tensor(dims: [usize; 4], seed: u64) -> LatentTensor {
    let mut rng = stream(seed, 0xBEEF, 0);
    let n = dims.iter().product();
    LatentTensor::new(dims, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn rel_err(a: &LatentTensor, b: &LatentTensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn cosine(s: usize) -> AlphaSchedule {
    AlphaSchedule::cosine(s).unwrap()
}

/// Copies the right half of a concatenated tensor into both halves.
struct MirrorPredictor;
impl NoisePredictor for MirrorPredictor {
    fn predict(&self, x: &LatentTensor, _tau: f64, _c: Option<&LatentTensor>) -> LatentTensor {
        let [h, w2, f, c] = x.dims();
        let mut out = x.clone();
        for hh in 0..h {
            for ww in 0..w2 / 2 {
                for ff in 0..f {
                    for cc in 0..c {
                        let v = x.get(hh, ww + w2 / 2, ff, cc);
                        out.set(hh, ww, ff, cc, v);
                    }
                }
            }
        }
        out
    }
}

/// Wraps another predictor and overwrites the right half of its output.
struct Scribble<P>(P, f64);
impl<P: NoisePredictor> NoisePredictor for Scribble<P> {
    fn predict(&self, x: &LatentTensor, tau: f64, c: Option<&LatentTensor>) -> LatentTensor {
        let mut out = self.0.predict(x, tau, c);
        let [h, w2, f, ch] = x.dims();
        for hh in 0..h {
            for ww in w2 / 2..w2 {
                for ff in 0..f {
                    for cc in 0..ch {
                        out.set(hh, ww, ff, cc, self.1 * (hh + ww + cc) as f64);
                    }
                }
            }
        }
        out
    }
}

#[test]
fn schedule_invariants() {
    let s = cosine(50);
    assert_eq!(s.alpha(0.0), 1.0);
    assert!(s.alpha(1.0) <= 1e-4);
    let lv = s.levels();
    assert_eq!(lv.len(), 50);
    assert_eq!((lv[0], lv[49]), (0.0, 1.0));
    for w in lv.windows(2) {
        assert!(s.alpha(w[1]) <= s.alpha(w[0]));
    }
    assert!(AlphaSchedule::cosine(1).is_err());
    assert!(AlphaSchedule::piecewise(vec![(0.0, 1.0), (0.5, 0.6), (1.0, 0.5)], 10).is_err());
    assert!(AlphaSchedule::piecewise(vec![(0.0, 1.0), (0.5, 0.4), (0.7, 0.6), (1.0, 1e-5)], 10).is_err());
}

#[test]
fn forward_noise_endpoints() {
    let u = gauss_tensor([4, 4, 2, 3], 1);
    let s = cosine(50);
    let (ut, _) = forward_noise(&u, 0.0, &s, 9).unwrap();
    assert_eq!(ut, u);
    let (ut, eps) = forward_noise(&u, 1.0, &s, 9).unwrap();
    assert!(rel_err(&ut, &eps) < 0.02);
    assert!(forward_noise(&u, 1.5, &s, 9).is_err());
}

#[test]
fn forward_noise_variance_at_half_power() {
    let s = cosine(50);
    assert!((s.alpha(0.5) - 0.5).abs() < 1e-12);
    let u = gauss_tensor([1, 1, 1, 1], 3);
    let mut vals = Vec::with_capacity(10_000);
    for seed in 0..10_000 {
        let (ut, _) = forward_noise(&u, 0.5, &s, seed).unwrap();
        vals.push(ut.data()[0] - 0.5f64.sqrt() * u.data()[0]);
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
    assert!((var - 0.5).abs() < 0.02, "variance {var}");
}

#[test]
fn oracle_step_to_clean_recovers_target() {
    let s = cosine(50);
    let mut rng = stream(5, 0xF00D, 0);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let u = gauss_tensor([3, 4, 2, 2], 100 + i);
        let tau: f64 = 1.0 - rng.random::<f64>();
        let (v, _) = forward_noise(&u, tau, &s, i).unwrap();
        let oracle = OraclePredictor { target: u.clone(), schedule: s.clone() };
        let out = ddim_step(&v, tau, 0.0, &s, &oracle, None).unwrap();
        worst = worst.max(rel_err(&out, &u));
    }
    assert!(worst <= 1e-6, "worst relative error {worst}");
}

/// Oracle returning the exact injected noise rather than the implied one.
struct FixedNoise(LatentTensor);
impl NoisePredictor for FixedNoise {
    fn predict(&self, _x: &LatentTensor, _t: f64, _c: Option<&LatentTensor>) -> LatentTensor {
        self.0.clone()
    }
}

#[test]
fn exact_injected_noise_recovers_target_in_one_step() {
    let s = cosine(50);
    let u = gauss_tensor([2, 3, 2, 2], 7);
    for tau in [0.1, 0.5, 0.9, 1.0] {
        let (v, eps) = forward_noise(&u, tau, &s, 3).unwrap();
        let out = ddim_step(&v, tau, 0.0, &s, &FixedNoise(eps), None).unwrap();
        assert!(rel_err(&out, &u) <= 1e-6, "tau {tau}");
    }
}

#[test]
fn zero_predictor_steps() {
    let s = cosine(50);
    let v = gauss_tensor([2, 2, 2, 2], 4);
    let out = ddim_step(&v, 0.6, 0.4, &s, &ZeroPredictor, None).unwrap();
    let k = (s.alpha(0.4) / s.alpha(0.6)).sqrt();
    for (o, x) in out.data().iter().zip(v.data()) {
        assert_eq!(*o, k * x);
    }
    // A flat stretch of the curve gives equal levels and an unchanged tensor.
    let flat = AlphaSchedule::piecewise(vec![(0.0, 1.0), (0.4, 0.5), (0.6, 0.5), (1.0, 1e-5)], 10).unwrap();
    let out = ddim_step(&v, 0.55, 0.45, &flat, &ZeroPredictor, None).unwrap();
    assert_eq!(out, v);
}

#[test]
fn step_rejects_non_descending_levels() {
    let s = cosine(50);
    let v = gauss_tensor([2, 2, 1, 1], 4);
    assert!(matches!(ddim_step(&v, 0.3, 0.3, &s, &ZeroPredictor, None), Err(GenError::NotDescending { .. })));
    assert!(matches!(ddim_step(&v, 0.3, 0.5, &s, &ZeroPredictor, None), Err(GenError::NotDescending { .. })));
    assert!(ddim_step(&v, 1.2, 0.5, &s, &ZeroPredictor, None).is_err());
}

#[test]
fn sampler_with_oracle_reaches_target() {
    let u = gauss_tensor([4, 4, 2, 2], 11);
    for steps in [50, 2] {
        let s = cosine(steps);
        let oracle = OraclePredictor { target: u.clone(), schedule: s.clone() };
        let out = sample(&s, &oracle, None, u.dims(), 5).unwrap();
        let tol = if steps == 2 { 1e-9 } else { 1e-4 };
        assert!(rel_err(&out, &u) <= tol, "S={steps}: {}", rel_err(&out, &u));
    }
}

#[test]
fn sampler_with_zero_predictor_is_reproducible() {
    let s = cosine(20);
    let a = sample(&s, &ZeroPredictor, None, [3, 3, 2, 2], 8).unwrap();
    let b = sample(&s, &ZeroPredictor, None, [3, 3, 2, 2], 8).unwrap();
    let c = sample(&s, &ZeroPredictor, None, [3, 3, 2, 2], 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.data().iter().all(|v| v.is_finite()));
    // Only the first factor survives: √(α_0/α_1) times the initial noise.
    let init = sample(&AlphaSchedule::cosine(2).unwrap(), &ZeroPredictor, None, [3, 3, 2, 2], 8).unwrap();
    for (x, y) in init.data().iter().zip(a.data()) {
        assert!((x - y).abs() <= 1e-9 * x.abs());
    }
}

#[test]
fn faulty_rule_breaks_the_identity() {
    let s = cosine(50);
    let u = gauss_tensor([3, 3, 2, 2], 12);
    let (v, _) = forward_noise(&u, 0.7, &s, 1).unwrap();
    let oracle = OraclePredictor { target: u.clone(), schedule: s.clone() };
    let out = ddim_step_with(&v, 0.7, 0.0, &s, &oracle, None, StepRule::Faulty).unwrap();
    assert!(rel_err(&out, &u) > 1e-3);
}

#[test]
fn loss_is_zero_for_the_true_noise() {
    let u = gauss_tensor([3, 4, 2, 2], 21);
    let s = cosine(50);
    let opts = LossOptions { batch: 8, noise_hint: true };
    assert_eq!(ic_concat_loss(&u, &u, &MirrorPredictor, &s, opts, 4).unwrap(), 0.0);
}

#[test]
fn zero_predictor_loss_is_element_count() {
    let u = gauss_tensor([8, 8, 2, 4], 22);
    let s = cosine(50);
    let n = u.len() as f64;
    let mut total = 0.0;
    let reps = 20;
    for seed in 0..reps {
        total += ic_concat_loss(&u, &u, &ZeroPredictor, &s, LossOptions::default(), seed).unwrap();
    }
    let mean = total / reps as f64;
    // Each draw is a χ² with n degrees of freedom: sd √(2n) per draw.
    let sd = (2.0 * n / (8 * reps) as f64).sqrt();
    assert!((mean - n).abs() < 4.0 * sd, "mean {mean} vs {n}");
}

#[test]
fn loss_ignores_condition_half_of_the_output() {
    let u = gauss_tensor([3, 4, 2, 2], 23);
    let uh = gauss_tensor([3, 4, 2, 2], 24);
    let s = cosine(50);
    let cfg = ToyConfig { channels: 2, ..Default::default() };
    let net = ToyPredictor::random(&cfg, 1).unwrap();
    let a = ic_concat_loss(&u, &uh, &net, &s, LossOptions::default(), 6).unwrap();
    let b = ic_concat_loss(&u, &uh, &Scribble(net.clone(), 3.7), &s, LossOptions::default(), 6).unwrap();
    let c = ic_concat_loss(&u, &uh, &Scribble(net, -1e3), &s, LossOptions::default(), 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn loss_rejects_mismatched_dims() {
    let s = cosine(50);
    let u = gauss_tensor([3, 4, 2, 2], 23);
    let uh = gauss_tensor([3, 4, 1, 2], 24);
    assert!(matches!(
        ic_concat_loss(&u, &uh, &ZeroPredictor, &s, LossOptions::default(), 6),
        Err(GenError::DimMismatch(..))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cut_off_inverts_concatenation(h in 1usize..5, w in 1usize..5, f in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let x = gauss_tensor([h, w, f, c], seed);
        let y = gauss_tensor([h, w, f, c], seed ^ 1);
        let joint = concat_w(&x, &y).unwrap();
        prop_assert_eq!(joint.dims(), [h, 2 * w, f, c]);
        prop_assert_eq!(cut_off(&joint).unwrap(), x);
    }

    #[test]
    fn lora_with_zero_up_matches_base_bitwise(o in 1usize..7, i in 1usize..7, seed in any::<u64>()) {
        let mut rng = stream(seed, 1, 0);
        let base: Vec<f64> = (0..o * i).map(|_| rng.sample(StandardNormal)).collect();
        let r = o.min(i);
        let ad = LoraAdapter::init(o, i, base.clone(), r, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..i).map(|_| rng.sample(StandardNormal)).collect();
        let y = lora_apply(&ad, &x).unwrap();
        for (row, yo) in y.iter().enumerate() {
            let reference: f64 = base[row * i..(row + 1) * i].iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert_eq!(yo.to_bits(), reference.to_bits());
        }
    }

    #[test]
    fn oracle_identity_holds_for_random_levels(tau in 1e-3f64..=1.0, seed in any::<u64>()) {
        let s = cosine(50);
        let u = gauss_tensor([2, 3, 2, 2], seed);
        let (v, _) = forward_noise(&u, tau, &s, seed).unwrap();
        let oracle = OraclePredictor { target: u.clone(), schedule: s.clone() };
        let out = ddim_step(&v, tau, 0.0, &s, &oracle, None).unwrap();
        prop_assert!(rel_err(&out, &u) <= 1e-6);
    }
}

#[test]
fn lora_annihilation_and_dense_oracle() {
    // r = min(O, I) = 3, A = I, B = −W gives the zero map.
    let w = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4, 1.5, 2.5, -3.0, 0.9, 0.0, 1.1];
    let a = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let b: Vec<f64> = w.iter().map(|v| -v).collect();
    let ad = LoraAdapter::new(4, 3, w, a, b).unwrap();
    assert!(lora_apply(&ad, &[0.5, -2.0, 3.0]).unwrap().iter().all(|v| *v == 0.0));

    // Random 4×6 base with rank 2 against a dense triple loop.
    let mut rng = stream(77, 2, 0);
    let mut g = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let (w, a, b, x) = (g(24), g(12), g(8), g(6));
    let ad = LoraAdapter::new(4, 6, w.clone(), a.clone(), b.clone()).unwrap();
    let y = lora_apply(&ad, &x).unwrap();
    for o in 0..4 {
        let mut acc = 0.0;
        for j in 0..6 {
            let mut wij = w[o * 6 + j];
            for k in 0..2 {
                wij += b[o * 2 + k] * a[k * 6 + j];
            }
            acc += wij * x[j];
        }
        assert!((acc - y[o]).abs() < 1e-12);
    }
    assert!(lora_apply(&ad, &x[..5]).is_err());
    assert!(LoraAdapter::new(4, 6, w, g(6 * 5), g(4 * 5)).is_err());
}

fn identity_pairs(dims: [usize; 4], n: u64) -> Vec<(LatentTensor, LatentTensor)> {
    let cfg = SynthConfig { dims, scale_decay: 0.3, ..Default::default() };
    synth_dataset(&cfg, n as usize, 7).unwrap().into_iter().map(|u| (u.clone(), u)).collect()
}

fn identity_model() -> ToyPredictor {
    let spec = TokenSpec { channels: 2, radius: 1, modulated: false };
    ToyPredictor::paired(spec, 2, CopySource::Own, 1.0, 3).unwrap()
}

fn identity_train() -> TrainConfig {
    TrainConfig { steps: 500, step_size: 0.003, momentum: 0.9, batch: 8, noise_hint: true, anneal: false }
}

#[test]
fn identity_task_trains_below_threshold() {
    let pairs = identity_pairs([4, 4, 2, 2], 4);
    let mut net = identity_model();
    assert!(net.param_count() < 10_000);
    let trace = train_lora(&mut net, &pairs, &identity_train(), &cosine(50), 11).unwrap();
    assert_eq!(trace.losses.len(), 500);
    let best = trace.losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(*trace.losses.last().unwrap() < 1e-3, "final {}", trace.losses.last().unwrap());
    assert!(best < 1e-3);
    let eval = draw_batch(pairs.len(), [4, 4, 2, 2], 8, 999);
    let before = identity_model().loss(&pairs, &eval, &cosine(50), true).unwrap();
    let after = net.loss(&pairs, &eval, &cosine(50), true).unwrap();
    assert!(after <= before);
}

#[test]
fn training_is_reproducible_and_zero_steps_is_identity() {
    let pairs = identity_pairs([3, 3, 1, 2], 2);
    let cfg = TrainConfig { steps: 40, ..identity_train() };
    let (mut a, mut b) = (identity_model(), identity_model());
    let ta = train_lora(&mut a, &pairs, &cfg, &cosine(50), 5).unwrap();
    let tb = train_lora(&mut b, &pairs, &cfg, &cosine(50), 5).unwrap();
    let bits = |t: &LossTrace| t.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ta), bits(&tb));
    assert_eq!(a, b);

    let mut c = identity_model();
    let t = train_lora(&mut c, &pairs, &TrainConfig { steps: 0, ..cfg }, &cosine(50), 5).unwrap();
    assert!(t.losses.is_empty());
    assert_eq!(c, identity_model());
    assert!(matches!(train_lora(&mut c, &[], &cfg, &cosine(50), 5), Err(GenError::EmptyDataset)));
}

#[test]
fn divergence_aborts_with_trace() {
    let pairs = identity_pairs([3, 3, 1, 2], 2);
    let mut net = identity_model();
    let cfg = TrainConfig { steps: 200, step_size: 5.0, ..identity_train() };
    match train_lora(&mut net, &pairs, &cfg, &cosine(50), 5) {
        Err(GenError::Diverged { step, trace, loss }) => {
            assert_eq!(trace.losses.len(), step + 1);
            assert!(loss > 1e6 || loss.is_nan());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn random_b(net: &mut ToyPredictor, seed: u64) {
    let mut rng = stream(seed, 3, 0);
    let (l1, l2) = net.layers_mut();
    for v in l1.b.iter_mut().chain(l2.b.iter_mut()) {
        *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
}

fn check_setup(act: Activation, modulated: bool) -> (ToyPredictor, Vec<(LatentTensor, LatentTensor)>, Vec<Draw>) {
    let dims = [3, 3, 2, 2];
    let cfg = ToyConfig { channels: 2, radius: 1, hidden: 6, rank: 2, activation: act, modulated, ..Default::default() };
    let mut net = ToyPredictor::random(&cfg, 4).unwrap();
    random_b(&mut net, 9);
    let pairs = vec![(gauss_tensor(dims, 1), gauss_tensor(dims, 2)), (gauss_tensor(dims, 3), gauss_tensor(dims, 4))];
    let draws = draw_batch(2, dims, 8, 17);
    (net, pairs, draws)
}

#[test]
fn linear_toy_gradients_match_finite_differences() {
    let (net, pairs, draws) = check_setup(Activation::Identity, false);
    let rep = grad_check(&net, &pairs, &draws, &cosine(50), false, 1e-5).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    assert!(rep.max_abs_analytic > 1e-3);
}

#[test]
fn silu_toy_and_denoiser_head_gradients_match() {
    let (net, pairs, draws) = check_setup(Activation::Silu, true);
    let rep = grad_check(&net, &pairs, &draws, &cosine(50), false, 1e-5).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    let head = net.with_head(Head::Denoiser { ref_var: 0.3 }).unwrap();
    let rep = grad_check(&head, &pairs, &draws, &cosine(50), false, 1e-5).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn stationary_point_has_zero_gradient() {
    // The base already outputs the hinted noise exactly, so with B = 0 the
    // loss is flat in every adapter direction.
    let spec = TokenSpec { channels: 2, radius: 1, modulated: false };
    let net = ToyPredictor::paired(spec, 2, CopySource::Mirror, 1.0, 8).unwrap();
    let dims = [3, 3, 2, 2];
    let pairs = vec![(gauss_tensor(dims, 5), gauss_tensor(dims, 5))];
    let draws = draw_batch(1, dims, 8, 3);
    let rep = grad_check(&net, &pairs, &draws, &cosine(50), true, 1e-5).unwrap();
    assert!(rep.max_abs_analytic < 1e-8, "{rep:?}");
    assert!(rep.max_abs_numeric < 1e-8, "{rep:?}");
}

#[test]
fn finite_difference_error_is_second_order() {
    let (net, pairs, draws) = check_setup(Activation::Silu, false);
    let s = cosine(50);
    let big = grad_check(&net, &pairs, &draws, &s, false, 1e-3).unwrap();
    let small = grad_check(&net, &pairs, &draws, &s, false, 1e-4).unwrap();
    let ratio = big.max_abs_err / small.max_abs_err;
    assert!((100.0 / 3.0..=300.0).contains(&ratio), "ratio {ratio}");
    assert!(matches!(grad_check(&net, &pairs, &draws, &s, false, 1e-2), Err(GenError::InvalidStep(_))));
}

#[test]
fn adapter_checkpoint_round_trip() {
    let (net, _, _) = check_setup(Activation::Silu, true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapters.lora");
    net.save_adapters(&path).unwrap();
    let cfg = ToyConfig { channels: 2, radius: 1, hidden: 6, rank: 2, modulated: true, ..Default::default() };
    let mut fresh = ToyPredictor::random(&cfg, 4).unwrap();
    assert_ne!(fresh.params(), net.params());
    fresh.load_adapters(&path).unwrap();
    assert_eq!(fresh.params(), net.params());

    // A different base refuses the checkpoint.
    let mut other = ToyPredictor::random(&cfg, 5).unwrap();
    assert!(matches!(other.load_adapters(&path), Err(GenError::Checkpoint(_))));
}

#[test]
fn loss_trace_csv() {
    let t = LossTrace { losses: vec![2.5, 0.125] };
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,2.5\n1,0.125\n");
}

#[test]
fn in_context_sampling_is_deterministic_and_shaped() {
    let cfg = ToyConfig { channels: 2, ..Default::default() };
    let net = ToyPredictor::random(&cfg, 1).unwrap().with_head(Head::Denoiser { ref_var: 0.3 }).unwrap();
    let s = cosine(10);
    let cond = gauss_tensor([4, 4, 2, 2], 3);
    let ic = InContext::new(&net, &s, 5);
    let a = sample(&s, &ic, Some(&cond), cond.dims(), 2).unwrap();
    let b = sample(&s, &ic, Some(&cond), cond.dims(), 2).unwrap();
    assert_eq!(a.dims(), cond.dims());
    assert_eq!(a, b);
}

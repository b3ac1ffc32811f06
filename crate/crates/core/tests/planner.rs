use gsc_core::latent::{synth_dataset, LatentTensor, SynthConfig};
use gsc_core::planner::*;
use gsc_core::si_transport::ChannelMode;
use num_bigint::BigUint;
use proptest::prelude::*;

fn paper_cfg() -> PlanConfig {
    PlanConfig::default()
}

/// `floor(budget / log2 q / g) * g`, checked exactly against `q^M <= 2^budget`.
fn m_star_oracle(q: u32, budget: u64, g: u64) -> u64 {
    let m = (budget as f64 / (q as f64).log2() / g as f64).floor() as u64 * g;
    let two = BigUint::from(2u32).pow(budget as u32);
    assert!(BigUint::from(q).pow(m as u32) <= two);
    assert!(BigUint::from(q).pow((m + g) as u32) > two);
    m
}

#[test]
fn m_star_reference_values() {
    let cfg = paper_cfg();
    assert_eq!(cfg.budget_bits(), 688_500);
    assert_eq!(m_star(3, &cfg).unwrap(), 433_664);
    assert_eq!(m_star(2, &cfg).unwrap(), 688_128);
    assert_eq!(m_star(4, &cfg).unwrap(), 344_064);
    for q in [2, 3, 4, 5] {
        assert_eq!(m_star(q, &cfg).unwrap() as u64, m_star_oracle(q, 688_500, 1792));
    }
    let g1 = PlanConfig { granularity: 1, ..paper_cfg() };
    assert_eq!(m_star(4, &g1).unwrap(), 344_250);
}

#[test]
fn m_star_reports_infeasible_budget() {
    let cfg = PlanConfig { b_blocks: 1, block_bits: 20, rate: 0.5, granularity: 8, q_candidates: vec![3] };
    assert!(matches!(m_star(3, &cfg), Err(PlanError::Infeasible { q: 3, budget: 10 })));
    assert_eq!(m_star(2, &PlanConfig { granularity: 5, ..cfg.clone() }).unwrap(), 10);
    assert!(m_star(1, &cfg).is_err());
    assert!(PlanConfig { rate: 0.0, ..cfg.clone() }.validate().is_err());
    assert!(PlanConfig { granularity: 0, ..cfg }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn m_star_is_monotone_and_within_budget(b in 1usize..40, k in 8usize..400, g in 1usize..20) {
        let cfg = PlanConfig { b_blocks: b, block_bits: k, rate: 0.5, granularity: g, q_candidates: vec![] };
        let budget = cfg.budget_bits();
        let mut prev = usize::MAX;
        for q in 2u32..12 {
            match m_star(q, &cfg) {
                Ok(m) => {
                    prop_assert!(m <= prev);
                    prop_assert_eq!(m % g, 0);
                    let two = BigUint::from(2u32).pow(budget as u32);
                    prop_assert!(BigUint::from(q).pow(m as u32) <= two.clone());
                    prop_assert!(BigUint::from(q).pow((m + g) as u32) > two);
                    prev = m;
                }
                Err(PlanError::Infeasible { .. }) => prev = 0,
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn argmin_is_scale_invariant(js in prop::collection::vec(0.0f64..10.0, 1..8), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = js.iter().map(|j| j * c).collect();
        prop_assert_eq!(argmin_index(&js), argmin_index(&scaled));
    }
}

/// Small setting: 4x4x2 positions, 8 channels; g = 32 positions.
fn small() -> (PlanConfig, Vec<LatentTensor>) {
    let synth = SynthConfig { dims: [4, 4, 2, 8], scale_decay: 1.0, ..SynthConfig::default() };
    let data = synth_dataset(&synth, 24, 5).unwrap();
    let cfg = PlanConfig { b_blocks: 8, block_bits: 192, rate: 0.5, granularity: 32, q_candidates: vec![2, 3, 4, 5] };
    (cfg, data)
}

#[test]
fn fine_quantizer_reaches_floor_without_erasures() {
    let (cfg, data) = small();
    let power = data.iter().map(LatentTensor::power).sum::<f64>() / data.len() as f64;
    let wide = PlanConfig { block_bits: 4096, ..cfg };
    let j = j_estimate(64, 256, &wide, &ChannelMode::Fixed { p: 0.0 }, &data, 48, 1).unwrap();
    assert!(j.mean < 1e-3 * power, "J {} power {power}", j.mean);
}

#[test]
fn full_erasure_gives_variance_about_means() {
    let (cfg, data) = small();
    let j = j_estimate(3, 256, &cfg, &ChannelMode::Fixed { p: 1.0 }, &data, 48, 1).unwrap();
    // Oracle: per-channel means over the dataset, then MSE to those means.
    let c = 8;
    let mut means = vec![0.0; c];
    let mut count = 0.0;
    for t in &data {
        for (i, v) in t.data().iter().enumerate() {
            means[i % c] += v;
        }
        count += t.positions() as f64;
    }
    means.iter_mut().for_each(|m| *m /= count);
    let per: Vec<f64> = (0..48)
        .map(|t| {
            let u = &data[t % data.len()];
            u.data().iter().enumerate().map(|(i, v)| (v - means[i % c]).powi(2)).sum::<f64>() / u.len() as f64
        })
        .collect();
    let want = per.iter().sum::<f64>() / 48.0;
    assert!((j.mean - want).abs() < 1e-12 * want.max(1.0), "{} vs {want}", j.mean);
    assert!(j.ci_low() <= want && want <= j.ci_high());
}

#[test]
fn j_estimate_is_deterministic() {
    let (cfg, data) = small();
    let mode = ChannelMode::Fixed { p: 0.4 };
    let a = j_estimate(3, 320, &cfg, &mode, &data, 40, 9).unwrap();
    let b = j_estimate(3, 320, &cfg, &mode, &data, 40, 9).unwrap();
    assert_eq!(a, b);
    assert!(j_estimate(3, 320, &cfg, &mode, &[], 40, 9).is_err());
    assert!(j_estimate(3, 320, &cfg, &mode, &data, 0, 9).is_err());
}

#[test]
fn more_symbols_never_hurt_without_erasures() {
    let (cfg, data) = small();
    let g = cfg.granularity;
    let js: Vec<f64> = [g, 2 * g, 4 * g, 8 * g, 16 * g]
        .iter()
        .map(|&m| j_estimate(2, m, &PlanConfig { block_bits: 4096, ..cfg.clone() }, &ChannelMode::Fixed { p: 0.0 }, &data, 24, 2).unwrap().mean)
        .collect();
    assert!(js.windows(2).all(|w| w[1] <= w[0]), "{js:?}");
}

#[test]
fn single_candidate_is_chosen() {
    let (cfg, data) = small();
    let cfg = PlanConfig { q_candidates: vec![4], ..cfg };
    let r = q_star(&cfg, &ChannelMode::Fixed { p: 0.5 }, &data, QStarOptions::fixed(16), 3).unwrap();
    assert_eq!(r.q_star, 4);
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.m_star, m_star(4, &cfg).unwrap());
}

#[test]
fn infeasible_candidates_are_reported() {
    let (cfg, data) = small();
    let tiny = PlanConfig { b_blocks: 1, block_bits: 8, granularity: 4, q_candidates: vec![2, 200], ..cfg };
    let r = q_star(&tiny, &ChannelMode::Fixed { p: 0.0 }, &data, QStarOptions::fixed(4), 3);
    // q=2 fits 4 symbols in 4 bits, q=200 cannot fit 4 symbols.
    let r = r.unwrap();
    assert_eq!(r.infeasible, vec![200]);
    let none = PlanConfig { q_candidates: vec![200], ..tiny };
    assert!(matches!(
        q_star(&none, &ChannelMode::Fixed { p: 0.0 }, &data, QStarOptions::fixed(4), 3),
        Err(PlanError::NoFeasibleCandidate(_))
    ));
}

#[test]
fn plan_csv_lists_every_candidate() {
    let (cfg, data) = small();
    let r = q_star(&cfg, &ChannelMode::Fixed { p: 0.2 }, &data, QStarOptions::fixed(16), 3).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "schema_version,q,m_star,j_mean,ci_low,ci_high,trials,chosen");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 1);
}

#[test]
fn early_stop_uses_a_prefix_of_the_trials() {
    let (cfg, data) = small();
    let mode = ChannelMode::Fixed { p: 0.0 };
    let opts = QStarOptions { n_trials: 200, early_stop_batch: Some(20) };
    let r = q_star(&cfg, &mode, &data, opts, 4).unwrap();
    let trials = r.rows[0].j.trials;
    assert!(trials < 200 && trials % 20 == 0, "{trials}");
    let full = q_star(&cfg, &mode, &data, QStarOptions::fixed(trials), 4).unwrap();
    assert_eq!(full.rows, r.rows);
}

#[test]
fn no_erasures_favour_the_largest_alphabet() {
    let (cfg, data) = small();
    let r = q_star(&cfg, &ChannelMode::Fixed { p: 0.0 }, &data, QStarOptions::fixed(48), 6).unwrap();
    let means: Vec<f64> = r.rows.iter().map(|row| row.j.mean).collect();
    assert_eq!(r.q_star, 5, "{means:?}");
}

#[test]
fn heavy_erasures_favour_binary_alphabet() {
    let (cfg, data) = small();
    let r = q_star(&cfg, &ChannelMode::Fixed { p: 0.8 }, &data, QStarOptions::fixed(400), 6).unwrap();
    let j = |q: u32| r.row(q).unwrap().j.clone();
    let (j2, j4, j5) = (j(2), j(4), j(5));
    assert!(
        j2.ci_high() < j4.ci_low() && j2.ci_high() < j5.ci_low(),
        "J2 {:?} J4 {:?} J5 {:?}",
        j2,
        j4,
        j5
    );
    assert_eq!(r.q_star, 2);
}

use gsc_core::latent::*;
use gsc_core::rng::stream;
use gsc_core::si_transport::{partition, transmit, BlockSpec, ChannelMode, MaskMode, SiVector, ERASED};
use proptest::prelude::*;
use rand::Rng;

const SMALL: [usize; 4] = [6, 5, 3, 4];

fn small_cfg() -> SynthConfig {
    SynthConfig { dims: SMALL, scale_decay: 0.5, ..SynthConfig::default() }
}

fn dataset(n: usize, seed: u64) -> Vec<LatentTensor> {
    synth_dataset(&small_cfg(), n, seed).unwrap()
}

fn params_1d(q: u32, lo: f64, hi: f64, m_len: usize) -> QuantizerParams {
    QuantizerParams::new(q, m_len, [1, 1, 1, 1], vec![lo], vec![hi], vec![0.5 * (lo + hi)], vec![1.0]).unwrap()
}

fn tensor_1d(x: f64) -> LatentTensor {
    LatentTensor::new([1, 1, 1, 1], vec![x]).unwrap()
}

#[test]
fn tensor_validation_and_binary_round_trip() {
    assert!(LatentTensor::new([1, 0, 1, 1], vec![]).is_err());
    assert!(LatentTensor::new([1, 1, 1, 2], vec![1.0]).is_err());
    assert!(LatentTensor::new([1, 1, 1, 1], vec![f64::NAN]).is_err());
    let t = dataset(1, 3).remove(0);
    assert_eq!(t.get(1, 2, 0, 3), t.data()[((5 + 2) * 3) * 4 + 3]);
    let mut buf = Vec::new();
    t.write_to(&mut buf).unwrap();
    assert_eq!(buf.len(), 38 + 8 * t.len());
    assert_eq!(LatentTensor::read_from(&buf[..]).unwrap(), t);
    assert!(LatentTensor::read_from(&buf[..40]).is_err());
}

#[test]
fn synthetic_fields_have_decaying_channel_scales_and_correlation() {
    let cfg = SynthConfig { dims: [16, 16, 7, 8], scale_decay: 0.3, mean_spread: 0.0, ..SynthConfig::default() };
    let data = synth_dataset(&cfg, 20, 1).unwrap();
    let var = |c: usize| {
        let v: Vec<f64> = data.iter().flat_map(|t| t.data().iter().skip(c).step_by(8).copied()).collect();
        v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
    };
    for c in [0, 4, 7] {
        let want = cfg.channel_scale(c).powi(2);
        assert!((var(c) / want - 1.0).abs() < 0.15, "channel {c}: {} vs {want}", var(c));
    }
    // Lag-1 correlation along h should sit near rho_space.
    let (mut num, mut den) = (0.0, 0.0);
    for t in &data {
        for h in 0..15 {
            for w in 0..16 {
                for f in 0..7 {
                    num += t.get(h, w, f, 0) * t.get(h + 1, w, f, 0);
                    den += t.get(h, w, f, 0).powi(2);
                }
            }
        }
    }
    assert!((num / den - cfg.rho_space).abs() < 0.05, "{}", num / den);
    assert_eq!(synth_dataset(&cfg, 2, 1).unwrap(), data[..2].to_vec());
}

#[test]
fn constant_dataset_is_guarded() {
    let t = LatentTensor::filled(SMALL, 2.5).unwrap();
    let p = calibrate(&[t.clone()], 3, t.len() * 2).unwrap();
    assert!(p.lo.iter().zip(&p.hi).all(|(l, h)| l < h));
    let back = p.decode(&p.encode(&t).unwrap()).unwrap();
    for (&x, c) in back.data().iter().zip((0..SMALL[3]).cycle()) {
        assert!((x - 2.5).abs() <= p.cell_width(c, 2) / 2.0 + 1e-15);
    }
}

#[test]
fn one_digit_per_feature_when_m_equals_features() {
    let d = dataset(3, 1);
    let p = calibrate(&d, 5, d[0].len()).unwrap();
    assert!(p.digits().iter().all(|&x| x == 1));
}

#[test]
fn paper_scale_digit_allocation() {
    let cfg = SynthConfig::default();
    let d = synth_dataset(&cfg, 2, 7).unwrap();
    let p = calibrate(&d, 3, 433_664).unwrap();
    assert_eq!(p.feature_count(), 229_376);
    let two = p.digits().iter().filter(|&&x| x == 2).count();
    let one = p.digits().iter().filter(|&&x| x == 1).count();
    assert_eq!((two, one), (204_288, 25_088));
    assert_eq!(two * 2 + one, 433_664);
    // Whole channels get the extra digit, highest variance first.
    let top: Vec<usize> = p.channel_order[..114].to_vec();
    for (f, &dg) in p.digits().iter().enumerate() {
        assert_eq!(dg == 2, top.contains(&(f % 128)));
    }
    let min_top = top.iter().map(|&c| p.variance[c]).fold(f64::INFINITY, f64::min);
    let max_rest = p.channel_order[114..].iter().map(|&c| p.variance[c]).fold(0.0, f64::max);
    assert!(min_top >= max_rest);
}

#[test]
fn fewer_symbols_than_features_leaves_some_unencoded() {
    let d = dataset(2, 1);
    let p = calibrate(&d, 4, 50).unwrap();
    assert_eq!(p.digits().iter().filter(|&&x| x == 1).count(), 50);
    let back = p.decode(&p.encode(&d[0]).unwrap()).unwrap();
    for (f, &dg) in p.digits().iter().enumerate() {
        if dg == 0 {
            assert_eq!(back.data()[f], p.mean[f % SMALL[3]]);
        }
    }
}

#[test]
fn encode_endpoints_and_binning() {
    let p = params_1d(4, 0.0, 4.0, 1);
    assert_eq!(p.encode(&tensor_1d(2.1)).unwrap().symbols(), &[3]);
    assert_eq!(p.encode(&tensor_1d(0.0)).unwrap().symbols(), &[1]);
    assert_eq!(p.encode(&tensor_1d(4.0)).unwrap().symbols(), &[4]);
    let p = params_1d(3, -1.0, 1.0, 3);
    assert_eq!(p.encode(&tensor_1d(-1.0)).unwrap().symbols(), &[1, 1, 1]);
    assert_eq!(p.encode(&tensor_1d(1.0)).unwrap().symbols(), &[3, 3, 3]);
    assert_eq!(p.encode(&tensor_1d(-7.0)).unwrap().symbols(), &[1, 1, 1]);
    assert_eq!(p.encode(&tensor_1d(9.0)).unwrap().symbols(), &[3, 3, 3]);
    // Cell 14 of 27: digits 1,1,2 (0-based) most significant first.
    let x = -1.0 + 2.0 * 14.5 / 27.0;
    assert_eq!(p.encode(&tensor_1d(x)).unwrap().symbols(), &[2, 2, 3]);
}

#[test]
fn encode_rejects_mismatched_dims() {
    let d = dataset(1, 1);
    let p = calibrate(&d, 3, d[0].len()).unwrap();
    let other = LatentTensor::filled([1, 1, 1, 4], 0.0).unwrap();
    assert!(matches!(p.encode(&other), Err(LatentError::DimMismatch(..))));
    assert!(p.decode(&SiVector::new(3, vec![1; 5]).unwrap()).is_err());
}

#[test]
fn codec_is_idempotent() {
    let d = dataset(4, 2);
    let p = calibrate(&d, 3, d[0].len() * 2 - 17).unwrap();
    for i in 0..100u64 {
        let u = synth_tensor(&small_cfg(), 1000, i).unwrap();
        let s = p.encode(&u).unwrap();
        assert_eq!(p.encode(&p.decode(&s).unwrap()).unwrap(), s);
    }
}

#[test]
fn decode_without_erasures_is_within_half_cell() {
    let d = dataset(4, 2);
    let p = calibrate(&d, 5, d[0].len() * 2 + 11).unwrap();
    let u = synth_tensor(&small_cfg(), 50, 0).unwrap();
    let back = p.decode(&p.encode(&u).unwrap()).unwrap();
    for (f, (&x, &y)) in u.data().iter().zip(back.data()).enumerate() {
        let c = f % SMALL[3];
        let clamped = x.clamp(p.lo[c], p.hi[c]);
        assert!((clamped - y).abs() <= p.cell_width(c, p.digits()[f]) / 2.0 * (1.0 + 1e-9));
    }
}

#[test]
fn fully_erased_vector_decodes_to_means() {
    let d = dataset(3, 2);
    let p = calibrate(&d, 3, d[0].len() * 2).unwrap();
    let s = SiVector::with_erasures(3, vec![ERASED; p.m_len()]).unwrap();
    let back = p.decode(&s).unwrap();
    for (f, &x) in back.data().iter().enumerate() {
        assert_eq!(x, p.mean[f % SMALL[3]]);
    }
}

fn mse_at(p: &QuantizerParams, u: &LatentTensor, erase: f64, seed: u64) -> f64 {
    let s = p.encode(u).unwrap();
    let layout = partition(p.m_len(), 10, p.q(), BlockSpec { block_bits: 4096, info_bits: 2048 }, MaskMode::Contiguous).unwrap();
    let (rx, _) = transmit(&s, &layout, &ChannelMode::Fixed { p: erase }, seed).unwrap();
    vpl(u, &p.decode(&rx).unwrap()).unwrap()
}

#[test]
fn partial_erasure_mse_lies_between_extremes() {
    let d = dataset(8, 3);
    let p = calibrate(&d, 3, d[0].len() * 2).unwrap();
    let (mut m0, mut m30, mut m100) = (0.0, 0.0, 0.0);
    for s in 0..200u64 {
        let u = synth_tensor(&small_cfg(), 77, s).unwrap();
        m0 += mse_at(&p, &u, 0.0, s);
        m30 += mse_at(&p, &u, 0.3, s);
        m100 += mse_at(&p, &u, 1.0, s);
    }
    assert!(m0 < m30 && m30 < m100, "{m0} {m30} {m100}");
}

#[test]
fn vpl_falls_with_erasure_rate() {
    let d = dataset(8, 3);
    let p = calibrate(&d, 4, d[0].len() * 2).unwrap();
    let levels = [0.8, 0.4, 0.1, 0.0];
    let means: Vec<f64> = levels
        .iter()
        .map(|&e| (0..200u64).map(|s| mse_at(&p, &synth_tensor(&small_cfg(), 99, s).unwrap(), e, s)).sum::<f64>())
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn vpl_examples() {
    let u = dataset(1, 4).remove(0);
    assert_eq!(vpl(&u, &u).unwrap(), 0.0);
    let shifted = LatentTensor::new(u.dims(), u.data().iter().map(|x| x + 0.25).collect()).unwrap();
    assert!((vpl(&u, &shifted).unwrap() - 0.0625).abs() < 1e-12);
    assert!(vpl(&u, &LatentTensor::filled([1, 1, 1, 1], 0.0).unwrap()).is_err());
}

#[test]
fn psnr_examples() {
    let a = vec![10.0; 64];
    assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
    assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 0.01);
    let c: Vec<f64> = a.iter().map(|x| x + 255.0).collect();
    assert!(psnr(&a, &c, 255.0).unwrap().abs() < 1e-12);
    assert!(psnr(&a, &b[..3], 255.0).is_err());
    assert!(psnr(&a, &b, 0.0).is_err());
}

fn pattern(h: usize, w: usize) -> Image {
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            0.3 * (0.7 * r).sin() * (0.5 * c).cos() + 0.1 * (0.13 * r + 0.29 * c).sin()
        })
        .collect();
    Image::new(h, w, data).unwrap()
}

#[test]
fn ms_ssim_examples() {
    let a = pattern(176, 176);
    assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = Image::new(176, 176, a.data.iter().map(|x| -x).collect()).unwrap();
    assert!(ms_ssim(&a, &neg).unwrap() < 0.1);
    let mut rng = stream(5, 0, 0);
    let noisy = Image::new(176, 176, a.data.iter().map(|x| x + 0.05 * rng.random::<f64>()).collect()).unwrap();
    let ab = ms_ssim(&a, &noisy).unwrap();
    assert_eq!(ab, ms_ssim(&noisy, &a).unwrap());
    assert!(ab > 0.5 && ab < 1.0, "{ab}");
}

#[test]
fn ms_ssim_handles_small_inputs() {
    for (h, w) in [(40, 60), (12, 12), (7, 9), (1, 1)] {
        let a = pattern(h, w);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = Image::new(h, w, a.data.iter().map(|x| x * 0.5).collect()).unwrap();
        let v = ms_ssim(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(ms_ssim(&pattern(20, 20), &pattern(20, 21)).is_err());
}

#[test]
fn quantizer_params_toml_round_trip() {
    let d = dataset(2, 9);
    let p = calibrate(&d, 5, d[0].len() + 13).unwrap();
    let back = QuantizerParams::from_toml(&p.to_toml()).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.digits(), p.digits());
    let broken = p.to_toml().replace("extra_digits = 13", "extra_digits = 14");
    assert!(QuantizerParams::from_toml(&broken).is_err());
}

#[test]
fn orthogonal_map_preserves_vpl() {
    let d = dataset(2, 9);
    let map = PerceptualMap::random(4, 4, 3).unwrap();
    let v = map.vpl(&d[0], &d[1]).unwrap();
    assert!((v - vpl(&d[0], &d[1]).unwrap()).abs() < 1e-12);
    let proj = PerceptualMap::random(4, 2, 3).unwrap();
    assert_eq!(proj.apply(&d[0]).unwrap().dims(), [6, 5, 3, 2]);
    assert!(PerceptualMap::random(4, 5, 3).is_err());
    assert_eq!(PerceptualMap::identity(4).apply(&d[0]).unwrap(), d[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantizer_error_bound(seed in any::<u64>(), q in 2u32..7, extra in 0usize..100) {
        let d = synth_dataset(&small_cfg(), 3, seed).unwrap();
        let p = calibrate(&d, q, d[0].len() + extra).unwrap();
        let u = synth_tensor(&small_cfg(), seed ^ 1, 0).unwrap();
        let back = p.decode(&p.encode(&u).unwrap()).unwrap();
        for (f, (&x, &y)) in u.data().iter().zip(back.data()).enumerate() {
            let c = f % SMALL[3];
            if x >= p.lo[c] && x <= p.hi[c] {
                prop_assert!((x - y).abs() <= (p.hi[c] - p.lo[c]) / (2.0 * (q as f64).powi(p.digits()[f] as i32)) * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn encode_is_covariant_under_recalibration(seed in any::<u64>(), k in -3i32..4, shift in -64i32..64, ch in 0usize..4) {
        // Dyadic data, scales and shifts keep every step exact.
        let mut rng = stream(seed, 0, 0);
        let grid = |rng: &mut gsc_core::rng::StreamRng| f64::from(rng.random_range(-4096i32..4096)) / 1024.0;
        let d: Vec<LatentTensor> = (0..3)
            .map(|_| LatentTensor::new(SMALL, (0..SMALL.iter().product::<usize>()).map(|_| grid(&mut rng)).collect()).unwrap())
            .collect();
        let scale = 2f64.powi(k);
        let b = f64::from(shift) / 8.0;
        let tr = |t: &LatentTensor| {
            let data = t.data().iter().enumerate().map(|(i, &x)| if i % 4 == ch { scale * x + b } else { x }).collect();
            LatentTensor::new(SMALL, data).unwrap()
        };
        let d2: Vec<LatentTensor> = d.iter().map(tr).collect();
        let p1 = calibrate(&d, 3, d[0].len() * 2).unwrap();
        let p2 = calibrate(&d2, 3, d[0].len() * 2).unwrap();
        prop_assert_eq!(p1.encode(&d[0]).unwrap(), p2.encode(&d2[0]).unwrap());
    }
}

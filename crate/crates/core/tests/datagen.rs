use oodcert::datagen::*;
use oodcert::diffcore::Tensor;
use proptest::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

/// Largest sine frequency present along either grid axis, found by odd
/// extension to length 2s and an FFT.
fn sine_support(u: &Tensor<f64>, tol: f64) -> usize {
    let s = u.shape()[1];
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(2 * s);
    let mut highest = 0;
    for axis in 0..2 {
        for line in 0..s {
            let get = |q: usize| if axis == 0 { u.data()[line * s + q] } else { u.data()[q * s + line] };
            let mut buf: Vec<Complex<f64>> = (0..2 * s)
                .map(|m| {
                    let v = if m < s { get(m) } else { -get(2 * s - 1 - m) };
                    Complex::new(v, 0.0)
                })
                .collect();
            fft.process(&mut buf);
            let scale = buf.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
            for (k, c) in buf.iter().enumerate().take(s + 1) {
                if c.norm() > tol * scale {
                    highest = highest.max(k);
                }
            }
        }
    }
    highest
}

#[test]
fn wave_fft_support_within_k() {
    for (i, dist) in [WaveDist::train(Scale::Desk), WaveDist::test(Scale::Desk)].iter().enumerate() {
        let ds = gen_wave_dataset(dist, 24, 11 + i as u64).unwrap();
        for n in 0..ds.len() {
            let k = ds.meta[n]["K"].as_u64().unwrap() as usize;
            let (x, y) = ds.pair(n);
            assert!(sine_support(&x, 1e-9) <= k);
            assert!(sine_support(&y, 1e-9) <= k);
            assert_eq!(sine_support(&x, 1e-9), k, "top mode of a random field is active");
        }
    }
}

#[test]
fn wave_pde_residual() {
    let dist = WaveDist {
        resolution: 64,
        ..WaveDist::train(Scale::Desk)
    };
    let (dt, t) = (1e-3, 1.3);
    for seed in 0..3 {
        let p = dist.draw(seed, 0);
        let s = p.resolution;
        let h = 1.0 / s as f64;
        let um = wave_exact(&p, t - dt).unwrap();
        let u0 = wave_exact(&p, t).unwrap();
        let up = wave_exact(&p, t + dt).unwrap();
        let (mut res, mut norm) = (0.0, 0.0);
        for a in 1..s - 1 {
            for b in 1..s - 1 {
                let at = |f: &Tensor<f64>, i: usize, j: usize| f.data()[i * s + j];
                let utt = (at(&up, a, b) - 2.0 * at(&u0, a, b) + at(&um, a, b)) / (dt * dt);
                let lap = (at(&u0, a + 1, b) + at(&u0, a - 1, b) + at(&u0, a, b + 1) + at(&u0, a, b - 1)
                    - 4.0 * at(&u0, a, b))
                    / (h * h);
                res += (utt - p.c * p.c * lap).powi(2);
                norm += at(&u0, a, b).powi(2);
            }
        }
        let rel = (res / norm).sqrt();
        assert!(rel < 1e-2, "relative residual {rel}");
    }
}

#[test]
fn wave_ranges_and_determinism() {
    let train = gen_wave_dataset(&WaveDist::train(Scale::Paper), 1000, 5);
    // Paper-scale fields are large; only the metadata is checked here.
    let train = train.unwrap();
    for m in &train.meta {
        let r = m["r"].as_f64().unwrap();
        let k = m["K"].as_u64().unwrap();
        assert!((0.75..=0.85).contains(&r));
        assert!((20..=28).contains(&k));
    }
    let (tr, te) = (WaveDist::train(Scale::Paper), WaveDist::test(Scale::Paper));
    assert!(te.r.0 < tr.r.0 && tr.r.1 < te.r.1);
    assert!(te.k.0 < tr.k.0 && tr.k.1 < te.k.1);
    let (tr, te) = (WaveDist::train(Scale::Desk), WaveDist::test(Scale::Desk));
    assert!(te.r.0 < tr.r.0 && tr.r.1 < te.r.1);
    assert!(te.k.0 < tr.k.0 && tr.k.1 < te.k.1);

    let a = gen_wave_dataset(&WaveDist::test(Scale::Desk), 16, 9).unwrap();
    let b = gen_wave_dataset(&WaveDist::test(Scale::Desk), 16, 9).unwrap();
    assert_eq!(a, b);
    let c = gen_wave_dataset(&WaveDist::test(Scale::Desk), 16, 10).unwrap();
    assert_ne!(a.joint, c.joint);
}

#[test]
fn normalization_standardizes_training_split() {
    let ds = gen_wave_dataset(&WaveDist::train(Scale::Desk), 64, 2).unwrap();
    let z = ds.normalization.normalize_batch(&ds.joint).unwrap();
    let again = Normalization::fit(&z);
    for c in 0..2 {
        assert!(again.mean[c].abs() < 1e-6);
        assert!((again.std[c] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn bimodal_mode_means() {
    let spec = BimodalSpec::new(1.0, 400, ToyFunction::Linear);
    let ds = gen_toy_bimodal(&spec, 8).unwrap();
    let se = (spec.mode_var / 400.0).sqrt();
    for (mode, centre) in [("+", 1.0), ("-", -1.0)] {
        let xs: Vec<f64> = (0..ds.len())
            .filter(|&i| ds.meta[i]["mode"] == mode)
            .map(|i| ds.joint.row(i)[0])
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((m - centre).abs() < 3.0 * se, "mode {mode}: mean {m}");
    }
}

#[test]
fn gaussian_oracle_moments() {
    let g = GaussianOracle::new(vec![1.0, -2.0, 0.0], vec![0.25, 4.0, 1.0]).unwrap();
    let n = 20_000;
    let s = g.sample(n, 3).unwrap();
    for c in 0..3 {
        let col: Vec<f64> = (0..n).map(|i| s.row(i)[c]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - g.mean[c]).abs() < 3.0 * (g.var[c] / n as f64).sqrt());
        // Var of the sample variance is 2v²/n for Gaussian data.
        assert!((v - g.var[c]).abs() < 3.0 * g.var[c] * (2.0 / n as f64).sqrt());
    }
    let c01 = (0..n).map(|i| (s.row(i)[0] - 1.0) * (s.row(i)[1] + 2.0)).sum::<f64>() / n as f64;
    assert!(c01.abs() < 3.0 * (0.25f64 * 4.0 / n as f64).sqrt());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn wave_energy_bound(seed in 0u64..1000, t in 0.0f64..20.0) {
        let p = WaveDist::test(Scale::Desk).draw(seed, 0);
        let u = wave_exact(&p, t).unwrap();
        prop_assert!(u.max_abs() <= p.amplitude_bound() * (1.0 + 1e-12));
    }
}

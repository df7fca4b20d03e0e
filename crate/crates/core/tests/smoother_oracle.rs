mod common;

use std::f64::consts::FRAC_PI_2;

use common::{batch_posterior, selector, simulate_linear, to_na, Batch};
use fpdtrack::kalman::{filter_smooth, EksProblem, HyperParams, State5, TrackResult, STATE_DIM};
use fpdtrack::signal::{simulate_fpd, PhaseModel, SimParams};

fn toy(h_rows: &[usize], n: usize, seed: u64) -> (TrackResult<f64>, Batch) {
    let t_bl = 0.5;
    let (h, model) = selector(h_rows);
    let mut hp = HyperParams::new(0.02, 0.005, 0.1, 0.3, 1.0, t_bl);
    hp.p0_diag = [1.0, 0.1, 2.0, 0.5, 0.05];
    let x0 = State5::new(1.0, 0.0, 0.2, 0.3, 0.0);
    let ys = simulate_linear(&h, &hp, &x0, t_bl, n, seed);
    let track = filter_smooth(&ys, &model, &hp, x0, t_bl).unwrap();
    let batch = batch_posterior(&ys, &h, &hp, &x0, t_bl);
    (track, batch)
}

fn assert_matches(track: &TrackResult<f64>, batch: &Batch, tol: f64) {
    for (k, est) in track.smoothed.iter().enumerate() {
        let a = &batch.maps[k];
        let mean = a * &batch.mean;
        let cov = a * &batch.cov * a.transpose();
        for i in 0..STATE_DIM {
            assert!(
                (est.x.as_array()[i] - mean[i]).abs() < tol,
                "mean k={k} i={i}"
            );
            for j in 0..STATE_DIM {
                assert!(
                    (est.p[(i, j)] - cov[(i, j)]).abs() < tol,
                    "cov k={k} ({i},{j})"
                );
            }
        }
        if k > 0 {
            let cross = a * &batch.cov * batch.maps[k - 1].transpose();
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    assert!(
                        (track.lag_one[k][(i, j)] - cross[(i, j)]).abs() < tol,
                        "lag k={k} ({i},{j})"
                    );
                }
            }
        }
    }
    assert!((track.loglik - batch.loglik).abs() < tol * batch.loglik.abs().max(1.0));
}

#[test]
fn smoother_matches_batch_regression_on_two_state_chain() {
    // Observes A and δf: two random-walk-velocity chains, phase unobserved.
    for seed in 0..5 {
        let (track, batch) = toy(&[0, 3], 8, seed);
        assert_matches(&track, &batch, 1e-9);
    }
}

#[test]
fn smoother_matches_batch_regression_with_phase_observed() {
    for seed in 10..13 {
        let (track, batch) = toy(&[0, 2, 3], 10, seed);
        assert_matches(&track, &batch, 1e-9);
    }
}

#[test]
fn smoothing_never_increases_variance_and_keeps_psd() {
    let (track, _) = toy(&[0, 3], 10, 3);
    for (s, f) in track.smoothed.iter().zip(&track.filtered) {
        for i in 0..STATE_DIM {
            assert!(s.p[(i, i)] <= f.p[(i, i)] * (1.0 + 1e-12) + 1e-15);
        }
        let eig = to_na(&s.p).symmetric_eigenvalues();
        assert!(eig.iter().all(|&v| v > -1e-12 * eig.amax()));
    }
}

fn noiseless(f_c: f64, t2star: f64, duration: f64) -> SimParams {
    SimParams {
        a0: 1.0,
        t2star,
        f_c,
        d: 0.0,
        sigma_eta: 0.0,
        phi0: 0.4,
        fs: 1000.0,
        duration,
        seed: 0,
        phase_model: PhaseModel::Integrated,
    }
}

#[test]
fn constant_tone_is_tracked_without_noise() {
    let p = noiseless(84.6, 1e9, 90.0);
    let (ts, _) = simulate_fpd::<f64>(&p).unwrap();
    let problem = EksProblem::new(&ts, 4.5, 1, None, Some((80.0, 90.0))).unwrap();
    assert_eq!(problem.n_blocks(), 20);
    let f0 = problem.window().f0;
    let mut hp = HyperParams::new(1e-10, 1e-12, 1e-10, p.f_c - f0, 1.0, 4.5);
    hp.phi0 = Some(p.phi0 - FRAC_PI_2);
    let track = problem.smooth(&hp).unwrap();
    for k in 0..track.len() {
        assert!((track.frequency(k) - p.f_c).abs() < 1e-6, "block {k}");
        assert!((track.amplitude(k) - 1.0).abs() < 1e-6, "block {k}");
    }
}

#[test]
fn phase_advances_by_the_offset_between_blocks() {
    let p = noiseless(84.6, 1e9, 45.0);
    let (ts, _) = simulate_fpd::<f64>(&p).unwrap();
    let problem = EksProblem::new(&ts, 4.5, 1, None, Some((80.0, 90.0))).unwrap();
    let f0 = problem.window().f0;
    let df = p.f_c - f0;
    let mut hp = HyperParams::new(1e-10, 1e-12, 1e-10, df, 1.0, 4.5);
    hp.phi0 = Some(p.phi0 - FRAC_PI_2);
    let track = problem.smooth(&hp).unwrap();
    for k in 0..track.len() {
        // The simulator emits a sine; the block model is a cosine.
        let expected = p.phi0 - FRAC_PI_2 + std::f64::consts::TAU * df * 4.5 * k as f64;
        let got = track.smoothed[k].x.phi;
        assert!(
            (got - expected).abs() < 1e-8,
            "block {k}: {got} vs {expected}"
        );
    }
}

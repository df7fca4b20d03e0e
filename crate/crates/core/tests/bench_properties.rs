mod common;

use common::mean;
use fpdtrack::bench::{crlb_freq, rho, run_grid, scf_block_sweep, GridConfig};
use fpdtrack::scf::{fit_blocks, LmConfig};
use fpdtrack::signal::{gen_random_walk_frequency, simulate_fpd, SimParams};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

/// Inverse Fisher information of `(A, f, φ)` for `A sin(2π f n/f_s + φ)` in
/// white noise, with the gradient taken by central differences.
fn numeric_frequency_bound(a: f64, f: f64, phi: f64, sigma: f64, n: usize, fs: f64) -> f64 {
    let s = |th: &Vector3<f64>, i: usize| {
        th[0] * (std::f64::consts::TAU * th[1] * i as f64 / fs + th[2]).sin()
    };
    let theta = Vector3::new(a, f, phi);
    let steps = [1e-6 * a, 1e-7 * fs / n as f64, 1e-6];
    let mut fisher = Matrix3::zeros();
    for i in 0..n {
        let mut g = Vector3::zeros();
        for p in 0..3 {
            let mut up = theta;
            let mut dn = theta;
            up[p] += steps[p];
            dn[p] -= steps[p];
            g[p] = (s(&up, i) - s(&dn, i)) / (2.0 * steps[p]);
        }
        fisher += g * g.transpose() / (sigma * sigma);
    }
    fisher.try_inverse().unwrap()[(1, 1)]
}

#[test]
fn bound_is_asymptotic_for_short_records() {
    // Double-frequency leakage shifts the exact bound by a few percent at 100 samples.
    let sigma = (1.0f64 / 200.0).sqrt();
    let oracle = numeric_frequency_bound(1.0, 123.4, -2.0, sigma, 100, 1000.0);
    let bound = crlb_freq(1.0, sigma, 100, 1000.0).unwrap();
    assert!((bound / oracle - 1.0).abs() < 0.05);
    let quarter = numeric_frequency_bound(1.0, 250.0, 1.1, sigma, 100, 1000.0);
    assert!((bound / quarter - 1.0).abs() < 1e-3);
}

#[test]
fn bound_matches_numeric_fisher_information() {
    let sigma = (1.0f64 / 200.0).sqrt();
    for &(f, phi) in &[(84.6, 0.3), (250.0, 1.1), (123.4, -2.0)] {
        let oracle = numeric_frequency_bound(1.0, f, phi, sigma, 1000, 1000.0);
        let bound = crlb_freq(1.0, sigma, 1000, 1000.0).unwrap();
        assert!(
            (bound / oracle - 1.0).abs() < 0.01,
            "f={f}: {bound:e} vs {oracle:e}"
        );
    }
}

fn steady_tone(n_blocks: usize, block: f64, snr0: f64, seed: u64) -> (SimParams, Vec<f64>) {
    let p = SimParams {
        t2star: 1e12,
        d: 0.0,
        sigma_eta: 0.01,
        duration: n_blocks as f64 * block,
        seed,
        ..Default::default()
    }
    .with_snr0(snr0);
    let (ts, _) = simulate_fpd::<f64>(&p).unwrap();
    let fits = fit_blocks(&ts, block, (80.0, 90.0), &LmConfig::default()).unwrap();
    (p, fits.iter().map(|b| b.f).collect())
}

#[test]
fn sine_fit_does_not_beat_the_bound() {
    let (p, f) = steady_tone(4000, 0.5, 1e4, 2024);
    let m = mean(&f);
    let var = f.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (f.len() - 1) as f64;
    let bound = crlb_freq(p.a0, p.sigma_eta, 500, p.fs).unwrap();
    // 4000 blocks leave about 2 % sampling error on the variance.
    assert!(var / bound >= 0.95, "ratio {}", var / bound);
    assert!(var / bound < 1.2, "ratio {}", var / bound);
    assert!((m - p.f_c).abs() < 4.0 * (var / f.len() as f64).sqrt());
}

#[test]
fn random_walk_variance_grows_linearly() {
    let (d, fs, n) = (1e-4, 1000.0, 400);
    let seeds = 3000;
    let ends: Vec<f64> = (0..seeds)
        .map(|s| gen_random_walk_frequency(0.0, d, fs, n, s).unwrap().freqs[n - 1])
        .collect();
    let var = ends.iter().map(|v| v * v).sum::<f64>() / seeds as f64;
    let expected = 2.0 * d / fs * (n - 1) as f64;
    assert!(
        (var / expected - 1.0).abs() < 0.1,
        "{var:e} vs {expected:e}"
    );
}

fn small_grid() -> GridConfig {
    GridConfig {
        d_values: vec![1e-8],
        snr0_values: vec![1e3],
        n_reps: 3,
        base: SimParams {
            duration: 60.0,
            sigma_eta: 0.01,
            ..Default::default()
        },
        scf_blocks: vec![5.0, 10.0, 20.0],
        seed_base: 40,
        ..Default::default()
    }
}

#[test]
fn grid_report_is_reproducible_and_consistent() {
    let cfg = small_grid();
    let a = run_grid(&cfg).unwrap();
    let b = run_grid(&cfg).unwrap();
    assert_eq!(a, b);
    let cell = &a.cells[0];
    assert!(cell.errors.is_empty(), "{:?}", cell.errors);
    let mse: Vec<f64> = (0..cfg.scf_blocks.len())
        .map(|j| {
            mean(
                &cell
                    .reps
                    .iter()
                    .map(|r| r.rmse_scf[j].powi(2))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let best = (0..mse.len())
        .min_by(|&i, &j| mse[i].total_cmp(&mse[j]))
        .unwrap();
    assert_eq!(cell.best_scf_block, Some(cfg.scf_blocks[best]));
    for (r, &value) in cell.reps.iter().zip(&cell.rho_per_rep) {
        let again = (r.rmse_eks / r.rmse_scf[best]).log2();
        assert!((again - value).abs() < 1e-12);
    }
    assert!((cell.rho.unwrap() - mean(&cell.rho_per_rep)).abs() < 1e-12);
}

#[test]
fn exact_records_report_undefined_ratio() {
    let mut cfg = small_grid();
    cfg.d_values = vec![0.0];
    cfg.n_reps = 1;
    cfg.base.sigma_eta = 0.0;
    cfg.base.t2star = 1e12;
    let report = run_grid(&cfg).unwrap();
    let cell = &report.cells[0];
    assert!(cell.rho.is_none());
    assert!(!cell.errors.is_empty());
}

#[test]
fn sweep_reports_its_minimum() {
    let p = SimParams {
        d: 1e-9,
        sigma_eta: 0.01,
        duration: 400.0,
        seed: 9,
        ..Default::default()
    }
    .with_snr0(1e3);
    let (ts, truth) = simulate_fpd::<f64>(&p).unwrap();
    let cands = [10.0, 50.0, 100.0, 200.0];
    let sweep = scf_block_sweep(&ts, &truth, &cands, (80.0, 90.0), &LmConfig::default()).unwrap();
    assert_eq!(sweep.per_candidate.len(), cands.len());
    assert!(sweep.per_candidate.iter().all(|&(_, r)| sweep.rmse <= r));
    assert!(sweep
        .per_candidate
        .contains(&(sweep.best_block, sweep.rmse)));
}

proptest! {
    #[test]
    fn log_ratio_is_antisymmetric(a in 1e-9f64..1e3, b in 1e-9f64..1e3) {
        let (x, y) = (rho(a, b).unwrap(), rho(b, a).unwrap());
        prop_assert!((x + y).abs() < 1e-12);
        prop_assert!((rho(2.0 * a, a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_scales_with_snr_and_rate(a in 0.01f64..10.0, sigma in 1e-3f64..1.0, n in 3usize..5000) {
        let base = crlb_freq(a, sigma, n, 1000.0).unwrap();
        let louder = crlb_freq(2.0 * a, sigma, n, 1000.0).unwrap();
        let faster = crlb_freq(a, sigma, n, 2000.0).unwrap();
        prop_assert!((base / louder - 4.0).abs() < 1e-9);
        prop_assert!((faster / base - 4.0).abs() < 1e-9);
    }
}

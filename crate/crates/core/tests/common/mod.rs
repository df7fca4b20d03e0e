//! Test-side oracles shared by the integration targets.
#![allow(dead_code)]

use std::f64::consts::{PI, TAU};

use fpdtrack::kalman::State5;
use fpdtrack::spectral::{segment, BlockSpec, SpectralWindow};
use fpdtrack::TimeSeries64;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FS: f64 = 1000.0;
pub const N_BL: usize = 4500;
pub const M_CENTER: usize = 381;

/// Block geometry of a 4.5 s block at 1 kHz.
pub fn block_geometry(l_half: usize) -> (BlockSpec<f64>, SpectralWindow<f64>) {
    let ts = TimeSeries64::new(vec![0.0; N_BL], FS, 0.0).unwrap();
    let spec = segment(&ts, N_BL as f64 / FS).unwrap();
    let win = SpectralWindow::new(M_CENTER, l_half, &spec).unwrap();
    (spec, win)
}

/// `A cos(2π(M/T + δf) n/f_s + φ)` with the carrier angle reduced exactly.
pub fn synth_block(x: &State5<f64>, m_center: usize, n: usize, fs: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let carrier = ((m_center * i) % n) as f64 / n as f64;
            x.a * (TAU * (carrier + x.df * i as f64 / fs) + x.phi).cos()
        })
        .collect()
}

/// Textbook DFT of `samples` at bin `m`, scaled by `2/N`.
pub fn naive_dft(samples: &[f64], m: usize) -> Complex64 {
    let n = samples.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, &z) in samples.iter().enumerate() {
        let ang = -TAU * ((m * i) % n) as f64 / n as f64;
        acc += Complex64::from_polar(z, ang);
    }
    acc * (2.0 / n as f64)
}

/// State with `A ∈ [0.1, 2]`, `φ ∈ [−π, π)`, `δf ∈ ±1.4/T`.
pub fn random_state(rng: &mut ChaCha8Rng, t_bl: f64) -> State5<f64> {
    State5::new(
        rng.random_range(0.1..2.0),
        0.0,
        rng.random_range(-PI..PI),
        rng.random_range(-1.4..1.4) / t_bl,
        0.0,
    )
}

/// `δf = k/T + ε` with `k ∈ {−1, 0, 1}` and `|ε|` log-uniform in `[1e-12, 1e-6]`.
pub fn near_singular_state(rng: &mut ChaCha8Rng, t_bl: f64) -> State5<f64> {
    let k = rng.random_range(-1i32..=1) as f64;
    let mag = 10f64.powf(rng.random_range(-12.0..-6.0));
    let eps = if rng.random_bool(0.5) { mag } else { -mag };
    State5::new(
        rng.random_range(0.1..2.0),
        0.0,
        rng.random_range(-PI..PI),
        k / t_bl + eps,
        0.0,
    )
}

/// Mean of a slice.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn to_na(m: &fpdtrack::linalg::Matrix<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// Draws `n` measurements `y_k = H x_k + v_k` from the linear state model,
/// with `x_0 ~ N(x0, diag(p0))`.
pub fn simulate_linear(
    h: &nalgebra::DMatrix<f64>,
    hp: &fpdtrack::kalman::HyperParams<f64>,
    x0: &State5<f64>,
    t_bl: f64,
    n: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let f = to_na(&fpdtrack::kalman::transition_matrix(t_bl));
    let mut x = nalgebra::DVector::from_column_slice(&x0.as_array());
    for i in 0..fpdtrack::kalman::STATE_DIM {
        x[i] += hp.p0_diag[i].sqrt() * z();
    }
    let mut ys = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            x = &f * x;
            x[1] += hp.q_da.sqrt() * z();
            x[4] += hp.q_ddf.sqrt() * z();
        }
        let y = h * &x;
        ys.push(y.iter().map(|v| v + hp.r.sqrt() * z()).collect());
    }
    ys
}

/// `LinearModel` observing the listed state components.
pub fn selector(rows: &[usize]) -> (nalgebra::DMatrix<f64>, fpdtrack::kalman::LinearModel<f64>) {
    let dim = fpdtrack::kalman::STATE_DIM;
    let mut h = nalgebra::DMatrix::zeros(rows.len(), dim);
    for (r, &c) in rows.iter().enumerate() {
        h[(r, c)] = 1.0;
    }
    let flat: Vec<f64> = (0..rows.len())
        .flat_map(|r| (0..dim).map(move |c| (r, c)))
        .map(|(r, c)| h[(r, c)])
        .collect();
    let model = fpdtrack::kalman::LinearModel {
        h: fpdtrack::linalg::Matrix::from_row_major(rows.len(), dim, flat),
    };
    (h, model)
}

/// Decaying record at 1 kHz with `σ_η = 0.01`.
pub fn fpd_params(d: f64, snr0: f64, duration: f64, seed: u64) -> fpdtrack::signal::SimParams {
    fpdtrack::signal::SimParams {
        d,
        sigma_eta: 0.01,
        duration,
        seed,
        ..Default::default()
    }
    .with_snr0(snr0)
}

/// Runs `fpdtrack run --config <file>` and returns the exit code.
pub fn run_cli_config(config: &std::path::Path) -> i32 {
    std::process::Command::new(env!("CARGO_BIN_EXE_fpdtrack"))
        .args(["run", "--config"])
        .arg(config)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

const PIPELINE_CONFIGS: [(&str, &str); 4] = [
    (
        "simulate.json",
        r#"{"mode": "simulate", "output": "record.csv", "truth_output": "truth.csv",
            "sim": {"a0": 1.0, "t2star": 3000.0, "f_c": 84.6, "d": 1e-8,
                    "sigma_eta": 0.01, "fs": 1000.0, "duration": 90.0, "seed": 17}}"#,
    ),
    (
        "eks.json",
        r#"{"mode": "eks", "input": "record.csv", "output": "track.csv",
            "t_bl": 4.5, "search": [80.0, 90.0], "gamma_over_2pi": 32434099.42}"#,
    ),
    (
        "scf.json",
        r#"{"mode": "scf", "input": "record.csv", "output": "scf.csv",
            "block_lengths": [10.0, 30.0], "search": [80.0, 90.0]}"#,
    ),
    (
        "bench.json",
        r#"{"mode": "bench", "output": "report.json",
            "grid": {"d_values": [1e-12, 1e-7], "snr0_values": [100.0, 10000.0], "n_reps": 2,
                     "base": {"a0": 1.0, "t2star": 3000.0, "f_c": 84.6, "d": 0.0,
                              "sigma_eta": 0.01, "fs": 1000.0, "duration": 60.0},
                     "eks_t_bl": 4.5, "scf_blocks": [5.0, 10.0, 20.0], "seed_base": 3}}"#,
    ),
];

const PIPELINE_OUTPUTS: [&str; 6] = [
    "record.csv",
    "truth.csv",
    "track.csv",
    "scf_bl10.csv",
    "scf_bl30.csv",
    "report.json",
];

/// simulate → eks → scf → bench from configuration files only.
///
/// Checks exit codes, re-parses every output against a direct library
/// computation, and reruns everything to compare bytes.
pub fn cli_pipeline(dir: &std::path::Path) -> std::result::Result<(), String> {
    use fpdtrack::io::{read_bench, read_table, read_timeseries};
    let run_all = || -> std::result::Result<(), String> {
        for (name, _) in PIPELINE_CONFIGS {
            let code = run_cli_config(&dir.join(name));
            if code != 0 {
                return Err(format!("{name}: exit {code}"));
            }
        }
        Ok(())
    };
    for (name, text) in PIPELINE_CONFIGS {
        std::fs::write(dir.join(name), text).map_err(|e| e.to_string())?;
    }
    run_all()?;
    let first: Vec<Vec<u8>> = PIPELINE_OUTPUTS
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect::<std::result::Result<_, _>>()?;

    let parse_cfg = |name: &str| -> fpdtrack::cli::RunConfig {
        let text = PIPELINE_CONFIGS.iter().find(|c| c.0 == name).unwrap().1;
        serde_json::from_str(text).unwrap()
    };
    let err = |e: fpdtrack::Error| e.to_string();

    let sim = parse_cfg("simulate.json").sim.unwrap();
    let (ts, truth) = fpdtrack::signal::simulate_fpd::<f64>(&sim).map_err(err)?;
    let (read, meta) = read_timeseries(&dir.join("record.csv"), None).map_err(err)?;
    if read.samples() != ts.samples() || read.fs() != ts.fs() {
        return Err("record does not re-parse to the simulated samples".into());
    }
    if fpdtrack::io::meta_get(&meta, "seed") != Some("17") {
        return Err("record metadata lacks the seed".into());
    }
    let truth_tab = read_table(&dir.join("truth.csv")).map_err(err)?;
    if truth_tab.column("f").as_deref() != Some(&truth.freqs[..]) {
        return Err("truth does not re-parse exactly".into());
    }

    let eks_cfg = parse_cfg("eks.json");
    let (_, track) =
        fpdtrack::em::fit_em(&ts, 4.5, 1, &eks_cfg.em, Some((80.0, 90.0))).map_err(err)?;
    let track_tab = read_table(&dir.join("track.csv")).map_err(err)?;
    let f_col = track_tab.column("f").ok_or("track lacks f")?;
    let s_col = track_tab.column("f_std").ok_or("track lacks f_std")?;
    let b_col = track_tab.column("B").ok_or("track lacks B")?;
    if f_col != track.frequencies()
        || s_col
            != (0..track.len())
                .map(|k| track.frequency_std(k))
                .collect::<Vec<_>>()
        || b_col.len() != track.len()
    {
        return Err("track does not re-parse to the library result".into());
    }

    let lm = fpdtrack::scf::LmConfig::default();
    for (bl, file) in [(10.0, "scf_bl10.csv"), (30.0, "scf_bl30.csv")] {
        let fits = fpdtrack::scf::fit_blocks(&ts, bl, (80.0, 90.0), &lm).map_err(err)?;
        let tab = read_table(&dir.join(file)).map_err(err)?;
        let f: Vec<f64> = fits.iter().map(|b| b.f).collect();
        let u: Vec<f64> = fits.iter().map(|b| b.u_f).collect();
        if tab.column("f") != Some(f) || tab.column("f_std") != Some(u) {
            return Err(format!("{file} does not re-parse to the library result"));
        }
    }

    let grid = parse_cfg("bench.json").grid.unwrap();
    let doc = read_bench(&dir.join("report.json")).map_err(err)?;
    let direct = fpdtrack::bench::run_grid(&grid).map_err(err)?;
    if doc.report != direct {
        return Err("bench report does not re-parse to the library result".into());
    }

    run_all()?;
    for (f, before) in PIPELINE_OUTPUTS.iter().zip(&first) {
        let after = std::fs::read(dir.join(f)).map_err(|e| e.to_string())?;
        if &after != before {
            return Err(format!("{f} differs between reruns"));
        }
    }
    Ok(())
}

/// Posterior of all block states from one joint Gaussian regression on
/// `z = [x_0; w_1 … w_{N−1}]`, where `w_k` drives the `ΔA` and `Δδf` slots.
pub struct Batch {
    pub maps: Vec<nalgebra::DMatrix<f64>>,
    pub mean: nalgebra::DVector<f64>,
    pub cov: nalgebra::DMatrix<f64>,
    pub loglik: f64,
}

pub fn batch_posterior(
    ys: &[Vec<f64>],
    h: &nalgebra::DMatrix<f64>,
    hp: &fpdtrack::kalman::HyperParams<f64>,
    x0: &State5<f64>,
    t_bl: f64,
) -> Batch {
    let n = ys.len();
    let nz = fpdtrack::kalman::STATE_DIM + 2 * (n - 1);
    let f = to_na(&fpdtrack::kalman::transition_matrix(t_bl));
    let mut maps = Vec::with_capacity(n);
    let mut a = nalgebra::DMatrix::zeros(fpdtrack::kalman::STATE_DIM, nz);
    a.view_mut(
        (0, 0),
        (fpdtrack::kalman::STATE_DIM, fpdtrack::kalman::STATE_DIM),
    )
    .fill_with_identity();
    maps.push(a.clone());
    for k in 1..n {
        a = &f * &a;
        a[(1, fpdtrack::kalman::STATE_DIM + 2 * (k - 1))] += 1.0;
        a[(4, fpdtrack::kalman::STATE_DIM + 2 * (k - 1) + 1)] += 1.0;
        maps.push(a.clone());
    }
    let mut prior_mean = nalgebra::DVector::zeros(nz);
    let mut prior_var = nalgebra::DVector::zeros(nz);
    for i in 0..fpdtrack::kalman::STATE_DIM {
        prior_mean[i] = x0.as_array()[i];
        prior_var[i] = hp.p0_diag[i];
    }
    for k in 0..n - 1 {
        prior_var[fpdtrack::kalman::STATE_DIM + 2 * k] = hp.q_da;
        prior_var[fpdtrack::kalman::STATE_DIM + 2 * k + 1] = hp.q_ddf;
    }
    let d = h.nrows();
    let mut info = nalgebra::DMatrix::from_diagonal(&prior_var.map(|v| 1.0 / v));
    let mut rhs = prior_mean.component_div(&prior_var);
    // Stacked design for the marginal likelihood.
    let mut design = nalgebra::DMatrix::zeros(n * d, nz);
    let mut y_all = nalgebra::DVector::zeros(n * d);
    for (k, y) in ys.iter().enumerate() {
        let g = h * &maps[k];
        let yv = nalgebra::DVector::from_column_slice(y);
        info += g.transpose() * &g / hp.r;
        rhs += g.transpose() * &yv / hp.r;
        design.view_mut((k * d, 0), (d, nz)).copy_from(&g);
        y_all.rows_mut(k * d, d).copy_from(&yv);
    }
    let cov = info.try_inverse().unwrap();
    let mean = &cov * rhs;

    let s = &design * nalgebra::DMatrix::from_diagonal(&prior_var) * design.transpose()
        + nalgebra::DMatrix::identity(n * d, n * d) * hp.r;
    let resid = y_all - &design * &prior_mean;
    let chol = s.clone().cholesky().unwrap();
    let maha = resid.dot(&chol.solve(&resid));
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * (maha + ln_det + (n * d) as f64 * (2.0 * std::f64::consts::PI).ln());
    Batch {
        maps,
        mean,
        cov,
        loglik,
    }
}

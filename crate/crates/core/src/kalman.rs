//! Extended Kalman filter over block measurements and Rauch-Tung-Striebel
//! smoothing.
//!
//! The hidden state per block is `[A, ΔA, φ, δf, Δδf]`: amplitude and
//! frequency offset are integrated random walks, the phase integrates the
//! frequency offset over one block duration. Only `ΔA` and `Δδf` receive
//! process noise.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::real::Real;
use crate::signal::TimeSeries;
use crate::spectral::{
    segment, select_center_bin, tone_from_block, BlockSpec, BlockTransform, SpectralModel,
    SpectralWindow,
};

pub const STATE_DIM: usize = 5;

/// Indices into the state vector.
pub mod idx {
    pub const A: usize = 0;
    pub const DA: usize = 1;
    pub const PHI: usize = 2;
    pub const DF: usize = 3;
    pub const DDF: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State5<T> {
    pub a: T,
    pub da: T,
    /// Accumulated phase at the block start, not wrapped.
    pub phi: T,
    pub df: T,
    pub ddf: T,
}

impl<T: Real> State5<T> {
    pub fn new(a: T, da: T, phi: T, df: T, ddf: T) -> Self {
        Self {
            a,
            da,
            phi,
            df,
            ddf,
        }
    }

    pub fn as_array(&self) -> [T; STATE_DIM] {
        [self.a, self.da, self.phi, self.df, self.ddf]
    }

    pub fn from_slice(v: &[T]) -> Self {
        assert_eq!(v.len(), STATE_DIM);
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }
}

/// Static model parameters tuned by EM.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<T> {
    /// Process variance of `ΔA` per block.
    pub q_da: T,
    /// Process variance of `Δδf` per block.
    pub q_ddf: T,
    /// Variance of each real measurement component.
    pub r: T,
    pub df0: T,
    pub a0: T,
    /// Initial phase; estimated from the first block when absent.
    pub phi0: Option<T>,
    /// Diagonal of the initial state covariance.
    pub p0_diag: [T; STATE_DIM],
}

impl<T: Real> HyperParams<T> {
    /// Parameters with the weakly informative default initial covariance.
    pub fn new(q_da: T, q_ddf: T, r: T, df0: T, a0: T, t_bl: T) -> Self {
        Self {
            q_da,
            q_ddf,
            r,
            df0,
            a0,
            phi0: None,
            p0_diag: default_p0(a0, t_bl),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.q_da, self.q_ddf, self.r, self.df0, self.a0]
            .iter()
            .chain(self.p0_diag.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("hyperparameters must be finite"));
        }
        if self.q_da < T::zero() || self.q_ddf < T::zero() {
            return Err(Error::invalid("process variances must be non-negative"));
        }
        if !(self.r > T::zero()) {
            return Err(Error::invalid("measurement variance must be positive"));
        }
        if self.p0_diag.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::invalid(
                "initial covariance diagonal must be positive",
            ));
        }
        Ok(())
    }

    pub fn process_noise(&self) -> Matrix<T> {
        let z = T::zero();
        Matrix::from_diagonal(&[z, self.q_da, z, z, self.q_ddf])
    }
}

/// `[a², (0.1a)², π², (2/T_bl)², (0.1/T_bl)²]`
pub fn default_p0<T: Real>(a0: T, t_bl: T) -> [T; STATE_DIM] {
    let a = a0.abs().max(T::min_positive_value().sqrt());
    let tenth = T::lit(0.1);
    [
        a * a,
        (tenth * a) * (tenth * a),
        T::lit(PI * PI),
        (T::two() / t_bl).powi(2),
        (tenth / t_bl).powi(2),
    ]
}

/// State transition over one block of duration `t_bl`.
pub fn transition_matrix<T: Real>(t_bl: T) -> Matrix<T> {
    let mut f = Matrix::identity(STATE_DIM);
    f[(idx::A, idx::DA)] = T::one();
    f[(idx::PHI, idx::DF)] = T::tau() * t_bl;
    f[(idx::DF, idx::DDF)] = T::one();
    f
}

/// A state with its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T> {
    pub x: State5<T>,
    pub p: Matrix<T>,
}

impl<T: Real> Estimate<T> {
    pub fn std(&self, i: usize) -> T {
        self.p[(i, i)].max(T::zero()).sqrt()
    }
}

/// Time update `x' = F x`, `P' = F P Fᵀ + Q`.
pub fn predict<T: Real>(
    x: &State5<T>,
    p: &Matrix<T>,
    hp: &HyperParams<T>,
    t_bl: T,
) -> (State5<T>, Matrix<T>) {
    let f = transition_matrix(t_bl);
    predict_with(&f, x, p, &hp.process_noise())
}

fn predict_with<T: Real>(
    f: &Matrix<T>,
    x: &State5<T>,
    p: &Matrix<T>,
    q: &Matrix<T>,
) -> (State5<T>, Matrix<T>) {
    let xp = State5::from_slice(&f.mul_vec(&x.as_array()));
    let pp = &(&(f * p) * &f.transpose()) + q;
    (xp, pp.symmetrized())
}

/// Nonlinear measurement `y = h(x) + v`, `v ~ N(0, r I)`.
pub trait MeasurementModel<T: Real> {
    fn dim(&self) -> usize;
    fn predict(&self, x: &State5<T>) -> Vec<T>;
    /// `∂h/∂x`, `dim × 5`.
    fn jacobian(&self, x: &State5<T>) -> Matrix<T>;
}

/// A measurement linear in the state: `y = H x`.
#[derive(Debug, Clone)]
pub struct LinearModel<T> {
    pub h: Matrix<T>,
}

impl<T: Real> MeasurementModel<T> for LinearModel<T> {
    fn dim(&self) -> usize {
        self.h.rows()
    }

    fn predict(&self, x: &State5<T>) -> Vec<T> {
        self.h.mul_vec(&x.as_array())
    }

    fn jacobian(&self, _x: &State5<T>) -> Matrix<T> {
        self.h.clone()
    }
}

/// EKF measurement update with a Joseph-form covariance.
///
/// Returns the filtered state, its covariance and the log-likelihood
/// increment `−½(νᵀS⁻¹ν + ln det S + d ln 2π)`.
pub fn update<T: Real, M: MeasurementModel<T> + ?Sized>(
    x_pred: &State5<T>,
    p_pred: &Matrix<T>,
    y: &[T],
    r: T,
    model: &M,
) -> Result<(State5<T>, Matrix<T>, T)> {
    let d = model.dim();
    if y.len() != d {
        return Err(Error::invalid(format!(
            "measurement has {} components, model expects {d}",
            y.len()
        )));
    }
    if !(r > T::zero()) {
        return Err(Error::invalid("measurement variance must be positive"));
    }
    let h = model.jacobian(x_pred);
    let yhat = model.predict(x_pred);
    let nu: Vec<T> = y.iter().zip(&yhat).map(|(&a, &b)| a - b).collect();

    let ph_t = p_pred * &h.transpose();
    let mut s = &h * &ph_t;
    for i in 0..d {
        s[(i, i)] += r;
    }
    let s = s.symmetrized();
    let chol = s
        .cholesky()
        .map_err(|e| Error::numerical(format!("innovation covariance: {e}")))?;
    // Kᵀ = S⁻¹ H P
    let k = chol.solve(&ph_t.transpose()).transpose();
    let dx = k.mul_vec(&nu);
    let x = State5::from_slice(
        &x_pred
            .as_array()
            .iter()
            .zip(&dx)
            .map(|(&a, &b)| a + b)
            .collect::<Vec<_>>(),
    );
    let ikh = &Matrix::identity(STATE_DIM) - &(&k * &h);
    let p = &(&(&ikh * p_pred) * &ikh.transpose()) + &(&k * &k.transpose()).scale(r);

    let s_inv_nu = chol.solve_vec(&nu);
    let maha = nu
        .iter()
        .zip(&s_inv_nu)
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    let ll = -T::lit(0.5) * (maha + chol.ln_det() + T::from_count(d) * T::lit((2.0 * PI).ln()));
    if !ll.is_finite() {
        return Err(Error::numerical("non-finite log-likelihood increment"));
    }
    Ok((x, p.symmetrized(), ll))
}

/// Output of the forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult<T> {
    /// Carrier bin frequency the offsets are relative to.
    pub f0: T,
    pub t_bl: T,
    pub n_bl: usize,
    /// Prior of block `k` (for `k = 0` the initial prior).
    pub predicted: Vec<Estimate<T>>,
    pub filtered: Vec<Estimate<T>>,
    pub smoothed: Vec<Estimate<T>>,
    /// `Cov(x_k, x_{k−1} | all data)` for `k ≥ 1`; entry 0 is zero.
    pub lag_one: Vec<Matrix<T>>,
    pub loglik_increments: Vec<T>,
    pub loglik: T,
}

impl<T: Real> TrackResult<T> {
    pub fn len(&self) -> usize {
        self.smoothed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed.is_empty()
    }

    /// Smoothed absolute frequency `f0 + δf` of block `k`.
    pub fn frequency(&self, k: usize) -> T {
        self.f0 + self.smoothed[k].x.df
    }

    pub fn frequency_std(&self, k: usize) -> T {
        self.smoothed[k].std(idx::DF)
    }

    pub fn amplitude(&self, k: usize) -> T {
        self.smoothed[k].x.a
    }

    pub fn amplitude_std(&self, k: usize) -> T {
        self.smoothed[k].std(idx::A)
    }

    /// Block centre time relative to the first sample.
    pub fn center_time(&self, k: usize) -> T {
        (T::from_count(k) + T::lit(0.5)) * self.t_bl
    }

    pub fn frequencies(&self) -> Vec<T> {
        (0..self.len()).map(|k| self.frequency(k)).collect()
    }
}

/// Smoothed estimates and lag-one covariances.
pub type SmoothedPass<T> = (Vec<Estimate<T>>, Vec<Matrix<T>>);

/// Backward RTS pass over a finished forward pass.
///
/// `predicted[k]` is the prior of block `k`; the smoother gain is
/// `G_k = P_{k|k} Fᵀ P_{k+1|k}⁻¹`.
pub fn rts_smooth<T: Real>(
    filtered: &[Estimate<T>],
    predicted: &[Estimate<T>],
    t_bl: T,
) -> Result<SmoothedPass<T>> {
    let n = filtered.len();
    if n == 0 || predicted.len() != n {
        return Err(Error::invalid(format!(
            "smoother needs aligned non-empty sequences (filtered {n}, predicted {})",
            predicted.len()
        )));
    }
    let f = transition_matrix(t_bl);
    let mut smoothed = filtered.to_vec();
    let mut gains: Vec<Matrix<T>> = vec![Matrix::zeros(STATE_DIM, STATE_DIM); n];
    for k in (0..n - 1).rev() {
        let pf = &filtered[k].p;
        let pp_next = &predicted[k + 1].p;
        let chol = pp_next
            .cholesky()
            .map_err(|e| Error::numerical(format!("predicted covariance: {e}")).at_block(k + 1))?;
        // Gᵀ = P_{k+1|k}⁻¹ F P_{k|k}
        let g = chol.solve(&(&f * pf)).transpose();
        let dx: Vec<T> = smoothed[k + 1]
            .x
            .as_array()
            .iter()
            .zip(predicted[k + 1].x.as_array())
            .map(|(&s, p)| s - p)
            .collect();
        let corr = g.mul_vec(&dx);
        let x = State5::from_slice(
            &filtered[k]
                .x
                .as_array()
                .iter()
                .zip(&corr)
                .map(|(&a, &b)| a + b)
                .collect::<Vec<_>>(),
        );
        let dp = &smoothed[k + 1].p - pp_next;
        let p = pf + &(&(&g * &dp) * &g.transpose());
        smoothed[k] = Estimate {
            x,
            p: p.symmetrized(),
        };
        gains[k] = g;
    }
    let mut lag_one = vec![Matrix::zeros(STATE_DIM, STATE_DIM); n];
    for k in 1..n {
        lag_one[k] = &smoothed[k].p * &gains[k - 1].transpose();
    }
    Ok((smoothed, lag_one))
}

/// Runs filter and smoother over pre-stacked measurements.
pub fn filter_smooth<T: Real, M: MeasurementModel<T> + ?Sized>(
    measurements: &[Vec<T>],
    model: &M,
    hp: &HyperParams<T>,
    initial: State5<T>,
    t_bl: T,
) -> Result<TrackResult<T>> {
    hp.validate()?;
    if measurements.is_empty() {
        return Err(Error::invalid("no measurements"));
    }
    let f = transition_matrix(t_bl);
    let q = hp.process_noise();
    let n = measurements.len();
    let mut predicted = Vec::with_capacity(n);
    let mut filtered: Vec<Estimate<T>> = Vec::with_capacity(n);
    let mut incs = Vec::with_capacity(n);
    for (k, y) in measurements.iter().enumerate() {
        let prior = match filtered.last() {
            None => Estimate {
                x: initial,
                p: Matrix::from_diagonal(&hp.p0_diag),
            },
            Some(prev) => {
                let (x, p) = predict_with(&f, &prev.x, &prev.p, &q);
                Estimate { x, p }
            }
        };
        let (x, p, ll) = update(&prior.x, &prior.p, y, hp.r, model).map_err(|e| e.at_block(k))?;
        predicted.push(prior);
        filtered.push(Estimate { x, p });
        incs.push(ll);
    }
    let (smoothed, lag_one) = rts_smooth(&filtered, &predicted, t_bl)?;
    let loglik = incs.iter().fold(T::zero(), |a, &b| a + b);
    Ok(TrackResult {
        f0: T::zero(),
        t_bl,
        n_bl: 0,
        predicted,
        filtered,
        smoothed,
        lag_one,
        loglik_increments: incs,
        loglik,
    })
}

/// Block DFT measurements of a record, ready for repeated smoothing.
#[derive(Debug, Clone)]
pub struct EksProblem<T> {
    pub model: SpectralModel<T>,
    pub measurements: Vec<Vec<T>>,
    /// Raw first-block tone estimate `(A, δf, φ)` used for initialization.
    pub first_tone: (T, T, T),
}

impl<T: Real> EksProblem<T> {
    /// Segments `ts`, picks the carrier bin when `win` is `None` (searching
    /// `search`, or the whole usable band) and computes all block DFTs.
    pub fn new(
        ts: &TimeSeries<T>,
        t_bl: T,
        l_half: usize,
        win: Option<SpectralWindow<T>>,
        search: Option<(T, T)>,
    ) -> Result<Self> {
        let spec = segment(ts, t_bl)?;
        let win = match win {
            Some(w) => {
                SpectralWindow::new(w.m_center, w.l_half, &spec)?;
                w
            }
            None => {
                let (lo, hi) = search.unwrap_or_else(|| default_search(&spec, l_half));
                select_center_bin(ts, &spec, l_half, lo, hi)?
            }
        };
        let transform = BlockTransform::new(spec, win);
        let blocks = transform.measure_all(ts)?;
        let first_tone = tone_from_block(&blocks[0], &win, &spec);
        Ok(Self {
            model: SpectralModel::new(spec, win),
            measurements: blocks.iter().map(|b| b.stacked()).collect(),
            first_tone,
        })
    }

    pub fn spec(&self) -> &BlockSpec<T> {
        self.model.spec()
    }

    pub fn window(&self) -> &SpectralWindow<T> {
        self.model.window()
    }

    pub fn n_blocks(&self) -> usize {
        self.measurements.len()
    }

    /// Initial state: `φ` from the first block unless `hp.phi0` is set,
    /// corrected for the Dirichlet phase of the offset `δf0`.
    pub fn initial_state(&self, hp: &HyperParams<T>) -> State5<T> {
        let phi = hp.phi0.unwrap_or_else(|| {
            let (_, df_raw, phi_raw) = self.first_tone;
            let spec = self.spec();
            let n = T::from_count(spec.n_bl);
            // tone_from_block already removed the phase of its own offset.
            phi_raw + T::PI() * (df_raw - hp.df0) * spec.t_bl * (n - T::one()) / n
        });
        State5::new(hp.a0, T::zero(), phi, hp.df0, T::zero())
    }

    pub fn smooth(&self, hp: &HyperParams<T>) -> Result<TrackResult<T>> {
        let init = self.initial_state(hp);
        let spec = *self.spec();
        let mut track = filter_smooth(&self.measurements, &self.model, hp, init, spec.t_bl)?;
        track.f0 = self.window().f0;
        track.n_bl = spec.n_bl;
        Ok(track)
    }
}

fn default_search<T: Real>(spec: &BlockSpec<T>, l_half: usize) -> (T, T) {
    let guard = T::from_count(l_half + 1) / spec.t_bl;
    (guard, spec.fs / T::two() - guard)
}

/// Full extended Kalman smoother over a record with fixed hyperparameters.
pub fn run_eks<T: Real>(
    ts: &TimeSeries<T>,
    t_bl: T,
    l_half: usize,
    hp: &HyperParams<T>,
    win: Option<SpectralWindow<T>>,
) -> Result<TrackResult<T>> {
    EksProblem::new(ts, t_bl, l_half, win, None)?.smooth(hp)
}

/// Serializable hyperparameters (for configs and reports).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParamsRecord {
    pub q_da: f64,
    pub q_ddf: f64,
    pub r: f64,
    pub df0: f64,
    pub a0: f64,
    #[serde(default)]
    pub phi0: Option<f64>,
    pub p0_diag: [f64; STATE_DIM],
}

impl<T: Real> From<&HyperParams<T>> for HyperParamsRecord {
    fn from(h: &HyperParams<T>) -> Self {
        Self {
            q_da: h.q_da.as_f64(),
            q_ddf: h.q_ddf.as_f64(),
            r: h.r.as_f64(),
            df0: h.df0.as_f64(),
            a0: h.a0.as_f64(),
            phi0: h.phi0.map(|p| p.as_f64()),
            p0_diag: h.p0_diag.map(|v| v.as_f64()),
        }
    }
}

//! Expectation-maximization of the smoother hyperparameters.
//!
//! The E-step is a full filter/smoother pass; the M-step uses the smoothed
//! moments of the (linearized) model. Only the `ΔA` and `Δδf` process
//! variances are estimated, the measurement covariance is `r·I`, and the
//! initial mean is moved to the smoothed first state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{
    filter_smooth, idx, EksProblem, HyperParams, MeasurementModel, State5, TrackResult,
};
use crate::real::Real;
use crate::signal::TimeSeries;

/// Data-independent starting point of the optimization.
///
/// Amplitude-like variances are given relative to the squared amplitude of
/// the first block so that the whole fit is equivariant to signal scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmInit {
    /// `q_ΔA / A0²`
    pub q_da_rel: f64,
    /// `q_Δδf` in (Hz/block)².
    pub q_ddf: f64,
    /// `r / A0²`
    pub r_rel: f64,
}

impl Default for EmInit {
    fn default() -> Self {
        Self {
            q_da_rel: 1e-6,
            q_ddf: 1e-6,
            r_rel: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once `|Δll| / |ll|` falls below this.
    pub ll_tol: f64,
    pub theta_init: EmInit,
    pub min_variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ll_tol: 1e-6,
            theta_init: EmInit::default(),
            min_variance_floor: 1e-18,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::invalid("EM needs at least one iteration"));
        }
        if !(self.ll_tol > 0.0) {
            return Err(Error::invalid("EM tolerance must be positive"));
        }
        if !(self.min_variance_floor > 0.0) {
            return Err(Error::invalid("variance floor must be positive"));
        }
        let i = &self.theta_init;
        if !(i.q_da_rel >= 0.0 && i.q_ddf >= 0.0 && i.r_rel > 0.0) {
            return Err(Error::invalid("invalid EM initial parameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmReport<T> {
    pub theta_final: HyperParams<T>,
    pub ll_history: Vec<T>,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Closed-form M-step from a smoothed track.
pub fn m_step<T: Real, M: MeasurementModel<T> + ?Sized>(
    track: &TrackResult<T>,
    measurements: &[Vec<T>],
    model: &M,
    theta: &HyperParams<T>,
    floor: T,
) -> Result<HyperParams<T>> {
    let n = track.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "M-step needs at least 2 blocks, got {n}"
        )));
    }
    if measurements.len() != n {
        return Err(Error::invalid("measurements and track differ in length"));
    }
    let s = &track.smoothed;
    // E[(v_k − v_{k−1})²] for a random-walk velocity component.
    let increment_power = |i: usize| {
        let mut acc = T::zero();
        for k in 1..n {
            let dm = s[k].x.as_array()[i] - s[k - 1].x.as_array()[i];
            acc +=
                dm * dm + s[k].p[(i, i)] + s[k - 1].p[(i, i)] - T::two() * track.lag_one[k][(i, i)];
        }
        acc / T::from_count(n - 1)
    };
    let q_da = increment_power(idx::DA);
    let q_ddf = increment_power(idx::DDF);

    let d = model.dim();
    let mut r_acc = T::zero();
    for (est, y) in s.iter().zip(measurements) {
        let yhat = model.predict(&est.x);
        let resid = y
            .iter()
            .zip(&yhat)
            .fold(T::zero(), |a, (&u, &v)| a + (u - v) * (u - v));
        let h = model.jacobian(&est.x);
        let hph = &(&h * &est.p) * &h.transpose();
        r_acc += resid + hph.trace();
    }
    let r = r_acc / T::from_count(n * d);

    let x0 = s[0].x;
    let next = HyperParams {
        q_da: q_da.max(floor),
        q_ddf: q_ddf.max(floor),
        r: r.max(floor),
        df0: x0.df,
        a0: x0.a,
        phi0: Some(x0.phi),
        p0_diag: theta.p0_diag,
    };
    if ![next.q_da, next.q_ddf, next.r, next.df0, next.a0]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::numerical("M-step produced non-finite parameters"));
    }
    Ok(next)
}

/// Alternates E-steps (`smooth`) and M-steps until the relative
/// log-likelihood change drops below `cfg.ll_tol`.
///
/// Steps are over-relaxed (extrapolated past the M-step, geometrically for
/// variances) while that keeps increasing the likelihood. An M-step that
/// lowers the likelihood is halved up to eight times; if none of the
/// shortened steps ascends, the iteration stops at the current parameters
/// and reports convergence.
pub fn run_em<T, M, F>(
    measurements: &[Vec<T>],
    model: &M,
    theta0: HyperParams<T>,
    cfg: &EmConfig,
    smooth: F,
) -> Result<(EmReport<T>, TrackResult<T>)>
where
    T: Real,
    M: MeasurementModel<T> + ?Sized,
    F: Fn(&HyperParams<T>) -> Result<TrackResult<T>>,
{
    cfg.validate()?;
    let floor = T::lit(cfg.min_variance_floor);
    let tagged = |it: usize, e: Error| match e {
        Error::Numerical { message, block } => Error::Numerical {
            message: format!("EM iteration {it}: {message}"),
            block,
        },
        other => other,
    };
    let mut theta = theta0;
    let mut track = smooth(&theta).map_err(|e| tagged(0, e))?;
    check_ll(track.loglik, 0)?;
    let mut history = vec![track.loglik];
    let mut converged = false;
    let mut iterations = 0;
    let mut relax = T::one();
    for it in 1..=cfg.max_iter {
        let target =
            m_step(&track, measurements, model, &theta, floor).map_err(|e| tagged(it, e))?;
        let prev = track.loglik;
        let slack = T::lit(MONOTONE_SLACK) * prev.abs();
        let mut accepted = None;
        // Over-relaxed step first; on failure fall back to the plain step.
        if relax > T::one() {
            let cand = blend(&theta, &target, relax);
            if let Ok(t) = smooth(&cand) {
                if t.loglik.is_finite() && t.loglik > prev {
                    accepted = Some((cand, t));
                    relax = (relax * T::lit(RELAX_GROWTH)).min(T::lit(RELAX_MAX));
                }
            }
            if accepted.is_none() {
                relax = T::one();
            }
        }
        // Linearization can make a full M-step lower the likelihood; shrink
        // toward the current parameters until it no longer does.
        let mut step = T::one();
        for _ in 0..=MAX_HALVINGS {
            if accepted.is_some() {
                break;
            }
            let cand = blend(&theta, &target, step);
            let cand_track = smooth(&cand).map_err(|e| tagged(it, e))?;
            check_ll(cand_track.loglik, it)?;
            if cand_track.loglik >= prev - slack {
                accepted = Some((cand, cand_track));
                if step == T::one() {
                    relax = T::lit(RELAX_GROWTH);
                }
                break;
            }
            step *= T::lit(0.5);
        }
        iterations = it;
        let Some((next, next_track)) = accepted else {
            converged = true;
            break;
        };
        history.push(next_track.loglik);
        theta = next;
        track = next_track;
        let rel = (track.loglik - prev).abs() / prev.abs().max(T::min_positive_value());
        if rel < T::lit(cfg.ll_tol) {
            converged = true;
            break;
        }
    }
    Ok((
        EmReport {
            theta_final: theta,
            ll_history: history,
            iterations_used: iterations,
            converged,
        },
        track,
    ))
}

const MONOTONE_SLACK: f64 = 1e-9;
const MAX_HALVINGS: usize = 8;
const RELAX_GROWTH: f64 = 1.5;
const RELAX_MAX: f64 = 16.0;

/// Geometric interpolation for variances, linear for location parameters.
fn blend<T: Real>(from: &HyperParams<T>, to: &HyperParams<T>, w: T) -> HyperParams<T> {
    if w == T::one() {
        return to.clone();
    }
    let lin = |a: T, b: T| a + (b - a) * w;
    let geo = |a: T, b: T| {
        if a > T::zero() && b > T::zero() {
            a * (b / a).powf(w)
        } else {
            lin(a, b).max(T::zero())
        }
    };
    HyperParams {
        q_da: geo(from.q_da, to.q_da),
        q_ddf: geo(from.q_ddf, to.q_ddf),
        r: geo(from.r, to.r),
        df0: lin(from.df0, to.df0),
        a0: lin(from.a0, to.a0),
        phi0: match (from.phi0, to.phi0) {
            (Some(a), Some(b)) => Some(lin(a, b)),
            (_, b) => b,
        },
        p0_diag: to.p0_diag,
    }
}

fn check_ll<T: Real>(ll: T, it: usize) -> Result<()> {
    if ll.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "EM iteration {it}: log-likelihood is {ll}"
        )))
    }
}

/// EM on arbitrary pre-stacked measurements; the initial state is taken
/// from `theta0` (`φ` defaults to zero).
pub fn fit_em_with<T: Real, M: MeasurementModel<T> + ?Sized>(
    measurements: &[Vec<T>],
    model: &M,
    t_bl: T,
    theta0: HyperParams<T>,
    cfg: &EmConfig,
) -> Result<(EmReport<T>, TrackResult<T>)> {
    let smooth = |hp: &HyperParams<T>| {
        let init = State5::new(
            hp.a0,
            T::zero(),
            hp.phi0.unwrap_or(T::zero()),
            hp.df0,
            T::zero(),
        );
        filter_smooth(measurements, model, hp, init, t_bl)
    };
    run_em(measurements, model, theta0, cfg, smooth)
}

/// Starting hyperparameters derived from the first block of a problem.
pub fn initial_theta<T: Real>(problem: &EksProblem<T>, cfg: &EmConfig) -> HyperParams<T> {
    let (a, df, _) = problem.first_tone;
    let a2 = a * a;
    let floor = T::lit(cfg.min_variance_floor);
    let init = &cfg.theta_init;
    HyperParams::new(
        (T::lit(init.q_da_rel) * a2).max(floor),
        T::lit(init.q_ddf).max(floor),
        (T::lit(init.r_rel) * a2).max(floor),
        df,
        a,
        problem.spec().t_bl,
    )
}

/// EM-tuned extended Kalman smoother on a record.
pub fn fit_em<T: Real>(
    ts: &TimeSeries<T>,
    t_bl: T,
    l_half: usize,
    cfg: &EmConfig,
    search: Option<(T, T)>,
) -> Result<(EmReport<T>, TrackResult<T>)> {
    let problem = EksProblem::new(ts, t_bl, l_half, None, search)?;
    fit_em_problem(&problem, cfg)
}

pub fn fit_em_problem<T: Real>(
    problem: &EksProblem<T>,
    cfg: &EmConfig,
) -> Result<(EmReport<T>, TrackResult<T>)> {
    if problem.n_blocks() < 2 {
        return Err(Error::invalid("EM needs a record of at least 2 blocks"));
    }
    let theta0 = initial_theta(problem, cfg);
    run_em(&problem.measurements, &problem.model, theta0, cfg, |hp| {
        problem.smooth(hp)
    })
}

//! Block-wise sine-cosine fit (`A_s sin + A_c cos + C_0`) by variable
//! projection.
//!
//! For a fixed frequency the three linear coefficients have a closed-form
//! least-squares solution; Levenberg-Marquardt then searches the frequency
//! alone on the projected residual. Uncertainties are the usual covariances
//! scaled by the residual mean square.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::real::Real;
use crate::signal::TimeSeries;
use crate::spectral::spectrum_peak;

/// Shortest block the fit accepts.
pub const MIN_BLOCK_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit<T> {
    pub a_s: T,
    pub a_c: T,
    pub c0: T,
    /// `RSS / (n − 3)`
    pub residual_mse: T,
    pub rss: T,
    /// `(XᵀX)⁻¹ · residual_mse`, order `(a_s, a_c, c0)`.
    pub covariance: Matrix<T>,
}

impl<T: Real> LinearFit<T> {
    pub fn amplitude(&self) -> T {
        self.a_s.hypot(self.a_c)
    }

    /// Phase of `amplitude · sin(2πft + phase)` at `t = 0`.
    pub fn phase(&self) -> T {
        self.a_c.atan2(self.a_s)
    }
}

/// One evaluation of the projected problem at a fixed frequency.
struct Projection<T> {
    linear: LinearFit<T>,
    /// `Jᵀr` with the Kaufman Jacobian `J = −P⊥ ∂(Xβ)/∂f`.
    grad: T,
    /// `JᵀJ`
    curvature: T,
}

fn project<T: Real>(y: &[T], t: &[T], f: T, with_derivative: bool) -> Result<Projection<T>> {
    let n = y.len();
    if n != t.len() {
        return Err(Error::invalid("sample and time arrays differ in length"));
    }
    if n < 4 {
        return Err(Error::invalid(format!("need at least 4 samples, got {n}")));
    }
    if !(f > T::zero()) || !f.is_finite() {
        return Err(Error::invalid(format!(
            "frequency must be positive, got {f}"
        )));
    }
    let w = T::tau() * f;
    let mut sin = Vec::with_capacity(n);
    let mut cos = Vec::with_capacity(n);
    let (mut ss, mut sc, mut s1, mut cc, mut c1) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    let (mut sy, mut cy, mut y1) = (T::zero(), T::zero(), T::zero());
    for (&yi, &ti) in y.iter().zip(t) {
        let (s, c) = (w * ti).sin_cos();
        ss += s * s;
        sc += s * c;
        s1 += s;
        cc += c * c;
        c1 += c;
        sy += s * yi;
        cy += c * yi;
        y1 += yi;
        sin.push(s);
        cos.push(c);
    }
    let nn = T::from_count(n);
    let xtx = Matrix::from_rows(&[&[ss, sc, s1], &[sc, cc, c1], &[s1, c1, nn]]);
    let chol = xtx
        .cholesky()
        .map_err(|_| Error::numerical(format!("rank-deficient sine-cosine design at f = {f}")))?;
    let pivots = chol.factor().diagonal();
    let min_pivot = pivots.iter().fold(T::infinity(), |m, &p| m.min(p * p));
    if min_pivot < T::lit(1e-10) * nn {
        return Err(Error::numerical(format!(
            "rank-deficient sine-cosine design at f = {f}"
        )));
    }
    let beta = chol.solve_vec(&[sy, cy, y1]);
    let (a_s, a_c, c0) = (beta[0], beta[1], beta[2]);

    let mut rss = T::zero();
    // Derivative column g = 2πt (a_s cos − a_c sin) and its projections.
    let (mut gr, mut gg, mut gs, mut gc, mut g1) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..n {
        let (s, c) = (sin[i], cos[i]);
        let r = y[i] - (a_s * s + a_c * c + c0);
        rss += r * r;
        if with_derivative {
            let g = T::tau() * t[i] * (a_s * c - a_c * s);
            gr += g * r;
            gg += g * g;
            gs += g * s;
            gc += g * c;
            g1 += g;
        }
    }
    let (grad, curvature) = if with_derivative {
        let xg = [gs, gc, g1];
        let sol = chol.solve_vec(&xg);
        let proj = xg.iter().zip(&sol).fold(T::zero(), |a, (&u, &v)| a + u * v);
        (-gr, (gg - proj).max(T::zero()))
    } else {
        (T::zero(), T::zero())
    };
    let dof = T::from_count(n - 3);
    let residual_mse = rss / dof;
    Ok(Projection {
        linear: LinearFit {
            a_s,
            a_c,
            c0,
            residual_mse,
            rss,
            covariance: chol.inverse().scale(residual_mse),
        },
        grad,
        curvature,
    })
}

/// Ordinary least squares on `[sin(2πft), cos(2πft), 1]`.
pub fn linear_solve<T: Real>(y: &[T], t: &[T], f: T) -> Result<LinearFit<T>> {
    Ok(project(y, t, f, false)?.linear)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_iter: usize,
    /// Converged once a step is below this fraction of `f`.
    pub f_rel_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iter: 100,
            f_rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFit<T> {
    pub f: T,
    pub u_f: T,
    pub linear: LinearFit<T>,
    pub iterations: usize,
}

/// Levenberg-Marquardt on the variable-projection residual `‖y − X(f)β̂(f)‖²`.
pub fn lm_fit_frequency<T: Real>(
    y: &[T],
    t: &[T],
    f_init: T,
    cfg: &LmConfig,
) -> Result<FrequencyFit<T>> {
    let n = y.len();
    if n < MIN_BLOCK_SAMPLES {
        return Err(Error::invalid(format!(
            "block of {n} samples is shorter than {MIN_BLOCK_SAMPLES}"
        )));
    }
    let tol = T::lit(cfg.f_rel_tol);
    let up = T::lit(cfg.damping_up);
    let down = T::lit(cfg.damping_down);
    let mut lambda = T::lit(cfg.initial_damping);
    let mut f = f_init;
    let mut cur = project(y, t, f, true)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        if cur.curvature <= T::zero() || cur.grad == T::zero() {
            converged = true;
            break;
        }
        let step = -cur.grad / (cur.curvature * (T::one() + lambda));
        let small = step.abs() <= tol * f.abs();
        let cand = f + step;
        let trial = if cand > T::zero() {
            project(y, t, cand, true).ok()
        } else {
            None
        };
        match trial {
            Some(next) if next.linear.rss < cur.linear.rss => {
                f = cand;
                cur = next;
                lambda = (lambda / down).max(T::lit(1e-12));
                if small {
                    converged = true;
                    break;
                }
            }
            _ => {
                if small {
                    converged = true;
                    break;
                }
                lambda *= up;
            }
        }
    }
    if !converged {
        return Err(Error::Fit {
            iterations,
            last_f: f.as_f64(),
        });
    }
    let mse = cur.linear.rss / T::from_count(n - 4);
    let u_f = if cur.curvature > T::zero() {
        (mse / cur.curvature).sqrt()
    } else {
        T::infinity()
    };
    Ok(FrequencyFit {
        f,
        u_f,
        linear: cur.linear,
        iterations,
    })
}

/// Result of fitting one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScfBlockFit<T> {
    pub block_index: usize,
    pub start_sample: usize,
    pub n_samples: usize,
    /// Block centre relative to the first sample of the record.
    pub t_center: T,
    pub f: T,
    pub a_s: T,
    pub a_c: T,
    pub c0: T,
    pub u_f: T,
    pub u_as: T,
    pub u_ac: T,
    pub u_c0: T,
    pub amplitude: T,
    /// Phase at the block start, in `(−π, π]`.
    pub phase0: T,
    pub residual_mse: T,
}

/// Fits every complete block of `t_bl` seconds independently.
///
/// The frequency start value is the whole-record spectrum peak inside
/// `search`; time restarts at zero in each block.
pub fn fit_blocks<T: Real>(
    ts: &TimeSeries<T>,
    t_bl: T,
    search: (T, T),
    cfg: &LmConfig,
) -> Result<Vec<ScfBlockFit<T>>> {
    let n_bl = (t_bl * ts.fs())
        .round()
        .to_usize()
        .ok_or_else(|| Error::invalid("block length not representable"))?;
    if n_bl < MIN_BLOCK_SAMPLES {
        return Err(Error::invalid(format!(
            "block of {n_bl} samples is shorter than {MIN_BLOCK_SAMPLES}"
        )));
    }
    if n_bl > ts.len() {
        return Err(Error::invalid(format!(
            "block of {n_bl} samples is longer than the series ({})",
            ts.len()
        )));
    }
    let (bin, df) = spectrum_peak(ts.samples(), ts.fs(), search.0, search.1)?;
    let f_init = T::from_count(bin) * df;
    let t: Vec<T> = (0..n_bl).map(|i| T::from_count(i) / ts.fs()).collect();
    let n_blocks = ts.len() / n_bl;
    let t_blk = T::from_count(n_bl) / ts.fs();
    (0..n_blocks)
        .map(|k| {
            let start = k * n_bl;
            let y = &ts.samples()[start..start + n_bl];
            let fit = lm_fit_frequency(y, &t, f_init, cfg)?;
            let lin = &fit.linear;
            let sd = |i: usize| lin.covariance[(i, i)].max(T::zero()).sqrt();
            Ok(ScfBlockFit {
                block_index: k,
                start_sample: start,
                n_samples: n_bl,
                t_center: (T::from_count(k) + T::lit(0.5)) * t_blk,
                f: fit.f,
                a_s: lin.a_s,
                a_c: lin.a_c,
                c0: lin.c0,
                u_f: fit.u_f,
                u_as: sd(0),
                u_ac: sd(1),
                u_c0: sd(2),
                amplitude: lin.amplitude(),
                phase0: lin.phase(),
                residual_mse: lin.residual_mse,
            })
        })
        .collect()
}

//! Adaptive integration of the mean-field equations.
//!
//! The stepper is an explicit 8th-order Dormand–Prince pair with a 5th/3rd
//! order blended error estimate and 7th-order dense output, so samples on a
//! fixed output grid never constrain the step size. It is generic over
//! [`OdeSystem`] and is also used for the vectorised master equation.

mod tableau;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{field_into, BlochState, NetworkParams};

use tableau::{A, B, C, D, E3, E5, N_STAGES, N_STAGES_EXTENDED};

/// Autonomous or time-dependent first-order system `y' = f(t, y)` on a flat
/// real state vector.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationConfig {
    /// Final time in units of `1/κ`.
    pub t_end: f64,
    /// Output sampling interval.
    pub dt_out: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig {
            t_end: 200.0,
            dt_out: 0.05,
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_steps: 10_000_000,
        }
    }
}

impl IntegrationConfig {
    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self
    }

    pub fn with_dt_out(mut self, dt_out: f64) -> Self {
        self.dt_out = dt_out;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::invalid(format!("t_end must be > 0, got {}", self.t_end)));
        }
        if !(self.dt_out > 0.0) || self.dt_out > self.t_end {
            return Err(Error::invalid(format!(
                "dt_out must lie in (0, t_end], got {}",
                self.dt_out
            )));
        }
        for (name, tol) in [("rel_tol", self.rel_tol), ("abs_tol", self.abs_tol)] {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {tol}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be >= 1"));
        }
        Ok(())
    }

    /// Number of output samples including `t = 0`.
    pub fn sample_count(&self) -> usize {
        (self.t_end / self.dt_out + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepFailure {
    Budget { t: f64 },
    NonFinite { t: f64 },
    StepUnderflow { t: f64 },
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 8.0;

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt()
}

fn initial_step<S: OdeSystem>(sys: &S, y0: &[f64], f0: &[f64], rel: f64, abs: f64, span: f64) -> f64 {
    let n = y0.len();
    let scale: Vec<f64> = y0.iter().map(|y| abs + y.abs() * rel).collect();
    let d0 = rms(y0.iter().zip(&scale).map(|(y, s)| y / s), n);
    let d1 = rms(f0.iter().zip(&scale).map(|(f, s)| f / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(h0, &y1, &mut f1);
    let d2 = rms(
        f1.iter().zip(f0).zip(&scale).map(|((a, b), s)| (a - b) / s),
        n,
    ) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 8.0)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Integrates `sys` from `y0` at `t = 0` to `t_end` and calls `on_sample(t, y)`
/// at every `t = k·dt_out` (including `t = 0`), using dense output between
/// accepted steps.
pub fn dop853<S, F>(
    sys: &S,
    y0: &[f64],
    t_end: f64,
    dt_out: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_steps: usize,
    mut on_sample: F,
) -> std::result::Result<StepStats, StepFailure>
where
    S: OdeSystem,
    F: FnMut(f64, &[f64]),
{
    let n = sys.dim();
    assert_eq!(y0.len(), n, "initial state has wrong length");
    let n_samples = (t_end / dt_out + 1e-9).floor() as usize + 1;

    let mut stats = StepStats::default();
    let mut t = 0.0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; N_STAGES_EXTENDED];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut sample = vec![0.0; n];
    let mut interp: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);

    sys.rhs(t, &y, &mut k[0]);
    stats.evaluations += 1;
    on_sample(0.0, &y);
    let mut next_sample = 1;

    let mut h = initial_step(sys, &y, &k[0], rel_tol, abs_tol, t_end);
    stats.evaluations += 1;
    let mut last_rejected = false;

    while next_sample < n_samples || t < t_end {
        if stats.accepted + stats.rejected >= max_steps {
            return Err(StepFailure::Budget { t });
        }
        let remaining = t_end - t;
        if remaining <= 0.0 {
            break;
        }
        if h >= remaining {
            h = remaining;
        }
        if h < 10.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(StepFailure::StepUnderflow { t });
        }

        for s in 1..N_STAGES {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * k[j][i];
                }
                stage[i] = y[i] + h * acc;
            }
            sys.rhs(t + C[s] * h, &stage, &mut k[s]);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..N_STAGES {
                acc += B[j] * k[j][i];
            }
            y_new[i] = y[i] + h * acc;
        }
        sys.rhs(t + h, &y_new, &mut k[N_STAGES]);
        stats.evaluations += N_STAGES;

        if y_new.iter().any(|v| !v.is_finite()) || k[N_STAGES].iter().any(|v| !v.is_finite()) {
            return Err(StepFailure::NonFinite { t });
        }

        let mut e5 = 0.0;
        let mut e3 = 0.0;
        for i in 0..n {
            let scale = abs_tol + y[i].abs().max(y_new[i].abs()) * rel_tol;
            let mut a5 = 0.0;
            let mut a3 = 0.0;
            for j in 0..=N_STAGES {
                a5 += E5[j] * k[j][i];
                a3 += E3[j] * k[j][i];
            }
            e5 += (a5 / scale).powi(2);
            e3 += (a3 / scale).powi(2);
        }
        let err = if e5 == 0.0 && e3 == 0.0 {
            0.0
        } else {
            h * e5 / ((e5 + 0.01 * e3) * n as f64).sqrt()
        };

        if err < 1.0 {
            stats.accepted += 1;
            let t_new = if h == remaining { t_end } else { t + h };
            let sample_time = |idx: usize| idx as f64 * dt_out;

            if next_sample < n_samples && sample_time(next_sample) <= t_new + 1e-12 * t_new.max(1.0) {
                // extra stages for the interpolant
                for s in N_STAGES + 1..N_STAGES_EXTENDED {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..s {
                            acc += A[s][j] * k[j][i];
                        }
                        stage[i] = y[i] + h * acc;
                    }
                    sys.rhs(t + C[s] * h, &stage, &mut k[s]);
                }
                stats.evaluations += N_STAGES_EXTENDED - N_STAGES - 1;
                for i in 0..n {
                    let dy = y_new[i] - y[i];
                    interp[0][i] = dy;
                    interp[1][i] = h * k[0][i] - dy;
                    interp[2][i] = 2.0 * dy - h * (k[N_STAGES][i] + k[0][i]);
                    for (row, d) in D.iter().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..N_STAGES_EXTENDED {
                            acc += d[j] * k[j][i];
                        }
                        interp[3 + row][i] = h * acc;
                    }
                }
                while next_sample < n_samples
                    && sample_time(next_sample) <= t_new + 1e-12 * t_new.max(1.0)
                {
                    let ts = sample_time(next_sample);
                    let x = ((ts - t) / h).clamp(0.0, 1.0);
                    for i in 0..n {
                        let mut acc = 0.0;
                        for (p, f) in interp.iter().rev().enumerate() {
                            acc += f[i];
                            acc *= if p % 2 == 0 { x } else { 1.0 - x };
                        }
                        sample[i] = y[i] + acc;
                    }
                    on_sample(ts, &sample);
                    next_sample += 1;
                }
            }

            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            // first-same-as-last
            k.swap(0, N_STAGES);

            let mut factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(ERROR_EXPONENT)).min(MAX_FACTOR)
            };
            if last_rejected {
                factor = factor.min(1.0);
            }
            h *= factor;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h *= (SAFETY * err.powf(ERROR_EXPONENT)).max(MIN_FACTOR);
            last_rejected = true;
        }
    }
    Ok(stats)
}

/// Mean-field equations as an [`OdeSystem`].
pub struct MeanField<'a> {
    pub params: &'a NetworkParams,
}

impl OdeSystem for MeanField<'_> {
    fn dim(&self) -> usize {
        3 * self.params.n()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        field_into(self.params, y, dy);
    }
}

/// Sampled solution of the mean-field equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<BlochState>,
    pub params: NetworkParams,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_ensembles(&self) -> usize {
        self.params.n()
    }

    /// Time series of component `k` (0 = x, 1 = y, 2 = z) of ensemble `alpha`.
    pub fn component(&self, alpha: usize, k: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.components[alpha][k]).collect()
    }

    pub fn mz(&self, alpha: usize) -> Vec<f64> {
        self.component(alpha, 2)
    }

    pub fn last(&self) -> Option<&BlochState> {
        self.states.last()
    }

    /// Largest deviation of any ensemble's `|m|` from its initial value.
    pub fn max_norm_drift(&self) -> f64 {
        let Some(first) = self.states.first() else {
            return 0.0;
        };
        let r0 = first.norms();
        self.states
            .iter()
            .flat_map(|s| s.norms().into_iter().zip(&r0).map(|(r, q)| (r - q).abs()))
            .fold(0.0, f64::max)
    }
}

/// Integrates the mean-field equations from `initial` and samples the
/// solution every `cfg.dt_out` up to `cfg.t_end`.
pub fn integrate(
    params: &NetworkParams,
    initial: &BlochState,
    cfg: &IntegrationConfig,
) -> Result<Trajectory> {
    params.validate()?;
    cfg.validate()?;
    if initial.n() != params.n() {
        return Err(Error::DimensionMismatch {
            expected: params.n(),
            got: initial.n(),
        });
    }
    initial.validate()?;

    let sys = MeanField { params };
    let capacity = cfg.sample_count();
    let mut times = Vec::with_capacity(capacity);
    let mut states = Vec::with_capacity(capacity);
    let outcome = dop853(
        &sys,
        &initial.to_flat(),
        cfg.t_end,
        cfg.dt_out,
        cfg.rel_tol,
        cfg.abs_tol,
        cfg.max_steps,
        |t, y| {
            times.push(t);
            states.push(BlochState::from_flat(y));
        },
    );
    let traj = Trajectory {
        times,
        states,
        params: params.clone(),
    };
    match outcome {
        Ok(_) => Ok(traj),
        Err(StepFailure::Budget { t }) => Err(Error::BudgetExhausted {
            max_steps: cfg.max_steps,
            t,
            partial: Box::new(traj),
        }),
        Err(StepFailure::NonFinite { t }) => {
            Err(Error::Numerical(format!("non-finite state at t = {t}")))
        }
        Err(StepFailure::StepUnderflow { t }) => {
            Err(Error::Numerical(format!("step size underflow at t = {t}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CouplingSpec;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = -y[0];
            dy[1] = y[0] - 0.5 * y[1];
        }
    }

    struct Rotation;
    impl OdeSystem for Rotation {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = -y[1];
            dy[1] = y[0];
        }
    }

    #[test]
    fn linear_decay_matches_closed_form() {
        let mut max_err: f64 = 0.0;
        dop853(&Decay, &[1.0, 0.0], 10.0, 0.1, 1e-10, 1e-12, 100_000, |t, y| {
            let a = (-t).exp();
            // y1' = y0 - y1/2, y1(0) = 0  =>  y1 = 2 (e^{-t/2} - e^{-t})
            let b = 2.0 * ((-0.5 * t).exp() - (-t).exp());
            max_err = max_err.max((y[0] - a).abs()).max((y[1] - b).abs());
        })
        .unwrap();
        assert!(max_err < 1e-9, "{max_err}");
    }

    #[test]
    fn dense_output_is_accurate_between_steps() {
        // loose tolerances force long steps, so most samples are interpolated
        let mut max_err: f64 = 0.0;
        let stats = dop853(&Rotation, &[1.0, 0.0], 20.0, 0.01, 1e-7, 1e-9, 100_000, |t, y| {
            max_err = max_err.max((y[0] - t.cos()).abs()).max((y[1] - t.sin()).abs());
        })
        .unwrap();
        assert!(stats.accepted < 500, "{stats:?}");
        assert!(max_err < 1e-6, "{max_err}");
    }

    #[test]
    fn sample_grid_is_uniform() {
        let p = NetworkParams::from_omegas(&[0.9], 1.0, CouplingSpec::none()).unwrap();
        let cfg = IntegrationConfig::default().with_t_end(3.0).with_dt_out(0.25);
        let traj = integrate(&p, &BlochState::polarized(1), &cfg).unwrap();
        assert_eq!(traj.len(), 13);
        for (i, t) in traj.times.iter().enumerate() {
            assert!((t - 0.25 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_error_keeps_partial_trajectory() {
        let p = NetworkParams::from_omegas(&[1.5], 1.0, CouplingSpec::none()).unwrap();
        let cfg = IntegrationConfig {
            max_steps: 20,
            ..IntegrationConfig::default()
        };
        match integrate(&p, &BlochState::polarized(1), &cfg) {
            Err(Error::BudgetExhausted { partial, max_steps, .. }) => {
                assert_eq!(max_steps, 20);
                assert!(!partial.is_empty());
                assert!(partial.len() < cfg.sample_count());
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    struct Blowup;
    impl OdeSystem for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[0] * y[0];
        }
    }

    #[test]
    fn finite_time_blowup_is_a_failure() {
        let out = dop853(&Blowup, &[1.0], 2.0, 0.1, 1e-10, 1e-12, 1_000_000, |_, _| {});
        assert!(out.is_err());
    }

    #[test]
    fn config_validation() {
        let bad = [
            IntegrationConfig { t_end: 0.0, ..Default::default() },
            IntegrationConfig { dt_out: 0.0, ..Default::default() },
            IntegrationConfig { dt_out: 500.0, ..Default::default() },
            IntegrationConfig { rel_tol: 1.5, ..Default::default() },
            IntegrationConfig { abs_tol: 0.0, ..Default::default() },
            IntegrationConfig { max_steps: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn initial_state_outside_ball_is_rejected() {
        let p = NetworkParams::from_omegas(&[0.9], 1.0, CouplingSpec::none()).unwrap();
        let s = BlochState::new(vec![[0.0, 0.0, 1.1]]);
        assert!(matches!(
            integrate(&p, &s, &IntegrationConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}

//! Stationary analysis of the mean-field flow.
//!
//! Closed forms exist only for two dissipatively coupled ensembles with a
//! common κ. Everything else goes through [`critical_coupling_search`], which
//! bisects on coupling strength using late-time oscillation amplitude.

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{max_amplitude, AMP_THRESHOLD};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegrationConfig};
use crate::model::{field_into, norm3, BlochState, CouplingKind, NetworkParams};

/// Residual bound a [`FixedPoint`] must satisfy.
pub const FIXED_POINT_RESIDUAL: f64 = 1e-10;
/// Central-difference step for [`numerical_jacobian`].
pub const JACOBIAN_STEP: f64 = 1e-6;
/// Tolerance used by [`Classification`].
pub const CLASSIFICATION_TOL: f64 = 1e-8;
/// Eigenvalues within `DEFECT_RADIUS·√ε·‖J‖_F` of the origin are reported as
/// exactly zero. Defective (Jordan) zero eigenvalues are only determined to
/// `O(√ε·‖J‖)` in floating point and otherwise show up as spurious
/// `±1e-8·i` pairs.
pub const DEFECT_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub state: BlochState,
    /// Every Bloch vector lies inside the closed unit ball.
    pub physical: bool,
}

impl FixedPoint {
    /// The same point moved onto the southern hemisphere of the Bloch sphere.
    ///
    /// For two dissipative ensembles `(0, y, z)` is stationary for any `z`,
    /// so `z = −√(1−y²)` gives the pure-state fixed point that trajectories
    /// started on the sphere relax to. Errors when the point is unphysical.
    pub fn on_sphere(&self) -> Result<BlochState> {
        if !self.physical {
            return Err(Error::OutOfDomain(
                "unphysical fixed point has no pure-state counterpart".into(),
            ));
        }
        Ok(BlochState::new(
            self.state
                .components
                .iter()
                .map(|m| {
                    let r2 = (m[0] * m[0] + m[1] * m[1]).min(1.0);
                    [m[0], m[1], -(1.0 - r2).sqrt()]
                })
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    /// No eigenvalue on the imaginary axis.
    Hyperbolic,
    /// At least one eigenvalue with vanishing real part, none oscillating.
    Marginal,
    /// Some eigenvalue with `|Im| > tol` and `Re > −tol`.
    Oscillatory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Sorted by real part, descending.
    pub jacobian_eigenvalues: Vec<Complex64>,
    pub classification: Classification,
}

pub fn classify(eigenvalues: &[Complex64], tol: f64) -> Classification {
    if eigenvalues.iter().any(|l| l.im.abs() > tol && l.re > -tol) {
        Classification::Oscillatory
    } else if eigenvalues.iter().all(|l| l.re.abs() > tol) {
        Classification::Hyperbolic
    } else {
        Classification::Marginal
    }
}

fn two_dissipative(params: &NetworkParams) -> Result<(f64, f64, f64, f64)> {
    params.validate()?;
    if params.n() != 2 {
        return Err(Error::Unsupported(format!(
            "closed form needs exactly two ensembles, got {}",
            params.n()
        )));
    }
    if params.coupling.kind != CouplingKind::Dissipative {
        return Err(Error::Unsupported(
            "closed form covers dissipative coupling only".into(),
        ));
    }
    let kappa = params
        .common_kappa()
        .ok_or_else(|| Error::Unsupported("closed form needs a common kappa".into()))?;
    Ok((
        params.ensembles[0].omega,
        params.ensembles[1].omega,
        kappa,
        params.coupling.strength,
    ))
}

/// Equatorial fixed point `(0, y_A, 0, 0, y_B, 0)` of two dissipatively
/// coupled ensembles.
pub fn fixed_point_two(params: &NetworkParams) -> Result<FixedPoint> {
    let (wa, wb, k, g) = two_dissipative(params)?;
    let denom = k * (k + g);
    let ya = (0.5 * g * (wa - wb) + k * wa) / denom;
    let yb = (0.5 * g * (wb - wa) + k * wb) / denom;
    Ok(FixedPoint {
        state: BlochState::new(vec![[0.0, ya, 0.0], [0.0, yb, 0.0]]),
        physical: ya.abs() <= 1.0 && yb.abs() <= 1.0,
    })
}

/// Smallest dissipative coupling at which both ensembles of a pair reach a
/// physical fixed point. Branches that come out negative are clamped to 0.
pub fn gamma_crit(params: &NetworkParams) -> Result<f64> {
    let (wa, wb, k, _) = two_dissipative(params)?;
    let d = wa - wb;
    let branch = |w: f64, denom: f64| -> Result<f64> {
        if !(denom > 0.0) {
            return Err(Error::OutOfDomain(format!(
                "detuning {d} leaves denominator {denom} <= 0"
            )));
        }
        Ok((2.0 * k * (w - k) / denom).max(0.0))
    };
    Ok(branch(wa, 2.0 * k - d)?.max(branch(wb, 2.0 * k + d)?))
}

/// Analytic Jacobian of the dissipative field, row-major `3n × 3n`.
pub fn dissipative_jacobian(params: &NetworkParams, state: &BlochState) -> Result<Mat<f64>> {
    check_dims(params, state)?;
    if params.coupling.kind != CouplingKind::Dissipative {
        return Err(Error::Unsupported(
            "analytic Jacobian covers dissipative coupling only".into(),
        ));
    }
    let n = params.n();
    let c = params.coupling.strength / n as f64;
    let m = &state.components;
    let sx: f64 = m.iter().map(|v| v[0]).sum();
    let sy: f64 = m.iter().map(|v| v[1]).sum();
    let mut jac = Mat::<f64>::zeros(3 * n, 3 * n);
    for (a, e) in params.ensembles.iter().enumerate() {
        let [x, y, z] = m[a];
        let (k, w) = (e.kappa, e.omega);
        let (rx, ry, rz) = (3 * a, 3 * a + 1, 3 * a + 2);
        for b in 0..n {
            let own = if a == b { 1.0 } else { 0.0 };
            jac[(rx, 3 * b)] = k * z * own + c * z;
            jac[(ry, 3 * b + 1)] = k * z * own + c * z;
            jac[(rz, 3 * b)] = -2.0 * k * x * own - c * (sx * own + x);
            jac[(rz, 3 * b + 1)] = (w - 2.0 * k * y) * own - c * (sy * own + y);
        }
        jac[(rx, rz)] = k * x + c * sx;
        jac[(ry, rz)] = -w + k * y + c * sy;
    }
    Ok(jac)
}

/// Central-difference Jacobian with step [`JACOBIAN_STEP`].
pub fn numerical_jacobian(params: &NetworkParams, state: &BlochState) -> Result<Mat<f64>> {
    check_dims(params, state)?;
    let y0 = state.to_flat();
    let dim = y0.len();
    let mut jac = Mat::<f64>::zeros(dim, dim);
    let (mut yp, mut ym) = (y0.clone(), y0.clone());
    let (mut fp, mut fm) = (vec![0.0; dim], vec![0.0; dim]);
    for j in 0..dim {
        yp[j] = y0[j] + JACOBIAN_STEP;
        ym[j] = y0[j] - JACOBIAN_STEP;
        field_into(params, &yp, &mut fp);
        field_into(params, &ym, &mut fm);
        for i in 0..dim {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * JACOBIAN_STEP);
        }
        yp[j] = y0[j];
        ym[j] = y0[j];
    }
    Ok(jac)
}

fn check_dims(params: &NetworkParams, state: &BlochState) -> Result<()> {
    if state.n() != params.n() {
        return Err(Error::DimensionMismatch {
            expected: params.n(),
            got: state.n(),
        });
    }
    Ok(())
}

/// Eigenvalues of a real square matrix, sorted by real part descending
/// (ties broken by imaginary part descending).
pub fn sorted_eigenvalues(mat: &Mat<f64>) -> Result<Vec<Complex64>> {
    let mut ev = mat
        .eigenvalues()
        .map_err(|e| Error::Numerical(format!("eigenvalue decomposition failed: {e:?}")))?;
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(ev)
}

/// Linear stability of `point`. Uses the analytic Jacobian for dissipative
/// coupling and central differences otherwise.
pub fn stability_at(params: &NetworkParams, point: &FixedPoint) -> Result<StabilityReport> {
    let jac = match params.coupling.kind {
        CouplingKind::Dissipative => dissipative_jacobian(params, &point.state)?,
        CouplingKind::Coherent => numerical_jacobian(params, &point.state)?,
    };
    let frob = (0..jac.nrows())
        .flat_map(|i| (0..jac.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| jac[(i, j)].powi(2))
        .sum::<f64>()
        .sqrt();
    let radius = DEFECT_RADIUS * f64::EPSILON.sqrt() * frob.max(1.0);
    let mut jacobian_eigenvalues = sorted_eigenvalues(&jac)?;
    for l in jacobian_eigenvalues.iter_mut() {
        if l.norm() <= radius {
            *l = Complex64::new(0.0, 0.0);
        }
    }
    jacobian_eigenvalues.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    if jacobian_eigenvalues.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(Error::Numerical("non-finite Jacobian eigenvalue".into()));
    }
    let classification = classify(&jacobian_eigenvalues, CLASSIFICATION_TOL);
    Ok(StabilityReport {
        jacobian_eigenvalues,
        classification,
    })
}

/// Largest residual component of the field at `state`.
pub fn residual(params: &NetworkParams, state: &BlochState) -> Result<f64> {
    check_dims(params, state)?;
    let y = state.to_flat();
    let mut dy = vec![0.0; y.len()];
    field_into(params, &y, &mut dy);
    Ok(dy.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

/// "Persistent oscillations present" predicate: integrate to `cfg.t_end` and
/// compare the largest half peak-to-peak `⟨m^z⟩` excursion over the trailing
/// `window_fraction` of the run against `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationOracle {
    pub cfg: IntegrationConfig,
    pub window_fraction: f64,
    pub threshold: f64,
    /// Defaults to full polarization.
    pub initial: Option<BlochState>,
}

impl Default for OscillationOracle {
    fn default() -> Self {
        Self {
            cfg: IntegrationConfig::default().with_t_end(2000.0),
            window_fraction: 0.25,
            threshold: AMP_THRESHOLD,
            initial: None,
        }
    }
}

impl OscillationOracle {
    pub fn amplitude(&self, params: &NetworkParams) -> Result<f64> {
        let initial = self
            .initial
            .clone()
            .unwrap_or_else(|| BlochState::polarized(params.n()));
        let traj = integrate(params, &initial, &self.cfg)?;
        max_amplitude(&traj, self.window_fraction)
    }

    pub fn oscillating(&self, params: &NetworkParams) -> Result<bool> {
        Ok(self.amplitude(params)? > self.threshold)
    }
}

pub fn oscillations_present(params: &NetworkParams) -> Result<bool> {
    OscillationOracle::default().oscillating(params)
}

/// Bisects the coupling strength of `template` between `lo` (oscillating)
/// and `hi` (stationary) until the bracket is narrower than `tol`, and
/// returns its midpoint.
pub fn critical_coupling_search(template: &NetworkParams, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    critical_coupling_search_with(&OscillationOracle::default(), template, lo, hi, tol)
}

pub fn critical_coupling_search_with(
    oracle: &OscillationOracle,
    template: &NetworkParams,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64> {
    if !(lo >= 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::invalid(format!(
            "need 0 <= lo < hi and tol > 0, got lo = {lo}, hi = {hi}, tol = {tol}"
        )));
    }
    if !oracle.oscillating(&template.with_strength(lo))? {
        return Err(Error::InvalidBracket(format!(
            "no persistent oscillation at lower strength {lo}"
        )));
    }
    if oracle.oscillating(&template.with_strength(hi))? {
        return Err(Error::InvalidBracket(format!(
            "oscillations persist at upper strength {hi}"
        )));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a >= tol {
        let mid = 0.5 * (a + b);
        if oracle.oscillating(&template.with_strength(mid))? {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Whether every Bloch vector of `state` lies in the unit ball.
pub fn is_physical(state: &BlochState) -> bool {
    state.components.iter().all(|m| norm3(m) <= 1.0)
}

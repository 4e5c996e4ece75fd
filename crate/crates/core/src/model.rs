//! Parameter space of a network of coupled collective spins and the
//! mean-field equations of motion for their rescaled spin vectors.
//!
//! Every ensemble `α` carries a Bloch vector `m_α = (mx, my, mz)` (the
//! collective spin divided by its length). Rates are dimensionless; the
//! reproduction recipes use the dissipation rate `κ` of the first ensemble
//! as the unit of frequency.
//!
//! Two coupling mechanisms are supported. Dissipative coupling adds a
//! collective decay channel shared by all ensembles, which renormalises each
//! local rate to `κ_α + Γ/n` and adds cross terms `(Γ/n) Σ_{β≠α}`. Coherent
//! coupling is an all-to-all exchange interaction with cross terms
//! `±(g/n) Σ_{β≠α}` and leaves the local rate at `κ_α`.
//!
//! Both fields conserve `|m_α|` exactly: `m_α · ṁ_α = 0` for every `α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on `|m_α| ≤ 1` before a state is rejected.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    /// Coherent drive `Ω_α`.
    pub omega: f64,
    /// Collective dissipation rate `κ_α`.
    pub kappa: f64,
    /// Number of spin-1/2 atoms. Only the finite-size treatment reads it.
    #[serde(default = "default_spins")]
    pub n_spins: usize,
}

fn default_spins() -> usize {
    1
}

impl EnsembleParams {
    pub fn new(omega: f64, kappa: f64) -> Self {
        EnsembleParams {
            omega,
            kappa,
            n_spins: 1,
        }
    }

    pub fn with_spins(mut self, n_spins: usize) -> Self {
        self.n_spins = n_spins;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::invalid(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::invalid(format!("omega must be >= 0, got {}", self.omega)));
        }
        if self.n_spins == 0 {
            return Err(Error::invalid("n_spins must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Dissipative,
    Coherent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub kind: CouplingKind,
    /// `Γ` for dissipative coupling, `g` for coherent coupling.
    pub strength: f64,
}

impl CouplingSpec {
    pub fn dissipative(strength: f64) -> Self {
        CouplingSpec {
            kind: CouplingKind::Dissipative,
            strength,
        }
    }

    pub fn coherent(strength: f64) -> Self {
        CouplingSpec {
            kind: CouplingKind::Coherent,
            strength,
        }
    }

    pub fn none() -> Self {
        Self::dissipative(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub ensembles: Vec<EnsembleParams>,
    /// Absent means uncoupled.
    #[serde(default = "CouplingSpec::none")]
    pub coupling: CouplingSpec,
}

impl NetworkParams {
    pub fn new(ensembles: Vec<EnsembleParams>, coupling: CouplingSpec) -> Result<Self> {
        let params = NetworkParams {
            ensembles,
            coupling,
        };
        params.validate()?;
        Ok(params)
    }

    /// Ensembles with the given drives, all sharing `kappa`.
    pub fn from_omegas(omegas: &[f64], kappa: f64, coupling: CouplingSpec) -> Result<Self> {
        let ensembles = omegas
            .iter()
            .map(|&omega| EnsembleParams::new(omega, kappa))
            .collect();
        Self::new(ensembles, coupling)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensembles.is_empty() {
            return Err(Error::invalid("network needs at least one ensemble"));
        }
        for (i, e) in self.ensembles.iter().enumerate() {
            e.validate()
                .map_err(|err| Error::invalid(format!("ensemble {i}: {err}")))?;
        }
        let g = self.coupling.strength;
        if !(g >= 0.0) || !g.is_finite() {
            return Err(Error::invalid(format!("coupling strength must be >= 0, got {g}")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.ensembles.len()
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.ensembles.iter().map(|e| e.omega).collect()
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        let mut out = self.clone();
        out.coupling.strength = strength;
        out
    }

    /// True when every ensemble has the same `κ`.
    pub fn common_kappa(&self) -> Option<f64> {
        let k0 = self.ensembles[0].kappa;
        self.ensembles
            .iter()
            .all(|e| (e.kappa - k0).abs() <= 1e-12 * k0)
            .then_some(k0)
    }
}

/// Rescaled spin vectors `(mx, my, mz)` of every ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub components: Vec<[f64; 3]>,
}

impl BlochState {
    pub fn new(components: Vec<[f64; 3]>) -> Self {
        BlochState { components }
    }

    /// Every ensemble fully polarised along `+z`.
    pub fn polarized(n: usize) -> Self {
        BlochState {
            components: vec![[0.0, 0.0, 1.0]; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        BlochState {
            components: vec![[0.0; 3]; n],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        debug_assert_eq!(flat.len() % 3, 0);
        BlochState {
            components: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.components.iter().flatten().copied().collect()
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.components.iter().map(|m| norm3(m)).collect()
    }

    /// Rejects states with a non-finite entry or a vector outside the unit ball.
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.components.iter().enumerate() {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("ensemble {i}: non-finite component")));
            }
            let r = norm3(m);
            if r > 1.0 + NORM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "ensemble {i}: |m| = {r} exceeds the unit ball"
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flatten()
            .fold(0.0, |acc: f64, x| acc.max(x.abs()))
    }
}

pub(crate) fn norm3(m: &[f64; 3]) -> f64 {
    (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt()
}

/// Time derivative of every Bloch component.
pub fn vector_field(params: &NetworkParams, state: &BlochState) -> Result<BlochState> {
    if state.n() != params.n() {
        return Err(Error::DimensionMismatch {
            expected: params.n(),
            got: state.n(),
        });
    }
    let y = state.to_flat();
    let mut dy = vec![0.0; y.len()];
    field_into(params, &y, &mut dy);
    Ok(BlochState::from_flat(&dy))
}

/// Flat-slice form of [`vector_field`]: `y` and `dy` hold `3n` entries laid
/// out as `[mx_0, my_0, mz_0, mx_1, ...]`. Lengths are not checked.
pub fn field_into(params: &NetworkParams, y: &[f64], dy: &mut [f64]) {
    let n = params.n();
    let (sum_x, sum_y) = y
        .chunks_exact(3)
        .fold((0.0, 0.0), |(sx, sy), m| (sx + m[0], sy + m[1]));
    let c = params.coupling.strength / n as f64;

    for (alpha, e) in params.ensembles.iter().enumerate() {
        let (x, yy, z) = (y[3 * alpha], y[3 * alpha + 1], y[3 * alpha + 2]);
        // sums over the other ensembles
        let ox = sum_x - x;
        let oy = sum_y - yy;
        let out = &mut dy[3 * alpha..3 * alpha + 3];
        match params.coupling.kind {
            CouplingKind::Dissipative => {
                let rate = e.kappa + c;
                out[0] = rate * x * z + c * z * ox;
                out[1] = -e.omega * z + rate * yy * z + c * z * oy;
                out[2] = e.omega * yy - rate * (x * x + yy * yy) - c * (x * ox + yy * oy);
            }
            CouplingKind::Coherent => {
                let k = e.kappa;
                out[0] = k * x * z + c * z * oy;
                out[1] = -e.omega * z + k * yy * z - c * z * ox;
                out[2] = e.omega * yy - k * (x * x + yy * yy) + c * (yy * ox - x * oy);
            }
        }
    }
}

/// `n` ensembles with drives stepping down uniformly from `omega_max` across
/// an interval of width `delta_omega`: `Ω_α = omega_max − α·Δ/(n−1)`.
/// The coupling is left at zero strength.
pub fn uniform_detuning_ladder(
    n: usize,
    omega_max: f64,
    delta_omega: f64,
    kappa: f64,
) -> Result<NetworkParams> {
    if n < 2 {
        return Err(Error::invalid(format!("detuning ladder needs n >= 2, got {n}")));
    }
    if !(delta_omega >= 0.0) {
        return Err(Error::invalid(format!(
            "detuning interval must be >= 0, got {delta_omega}"
        )));
    }
    let step = delta_omega / (n - 1) as f64;
    let omegas: Vec<f64> = (0..n).map(|a| omega_max - a as f64 * step).collect();
    NetworkParams::from_omegas(&omegas, kappa, CouplingSpec::none())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(omegas: &[f64], coupling: CouplingSpec) -> NetworkParams {
        NetworkParams::from_omegas(omegas, 1.0, coupling).unwrap()
    }

    #[test]
    fn single_ensemble_fixed_point() {
        let p = params(&[0.9], CouplingSpec::none());
        let mz = -(1.0f64 - 0.81).sqrt();
        let d = vector_field(&p, &BlochState::new(vec![[0.0, 0.9, mz]])).unwrap();
        assert!(d.max_abs() < 1e-9, "{d:?}");
        // also the printed truncation of the fixed point
        let d = vector_field(&p, &BlochState::new(vec![[0.0, 0.9, -0.43589]])).unwrap();
        assert!(d.max_abs() < 1e-9);
    }

    #[test]
    fn zero_coupling_decouples() {
        let s = BlochState::new(vec![[0.3, -0.2, 0.5], [-0.6, 0.1, 0.7]]);
        for kind in [CouplingKind::Dissipative, CouplingKind::Coherent] {
            let p = params(&[1.5, 0.9], CouplingSpec { kind, strength: 0.0 });
            let d = vector_field(&p, &s).unwrap();
            for a in 0..2 {
                let single = params(&[p.ensembles[a].omega], CouplingSpec::none());
                let ds = vector_field(&single, &BlochState::new(vec![s.components[a]])).unwrap();
                assert_eq!(d.components[a], ds.components[0]);
            }
        }
    }

    #[test]
    fn dissipative_transverse_rates_vanish_on_equator() {
        let p = params(&[1.5, 0.9], CouplingSpec::dissipative(0.1));
        let s = BlochState::new(vec![[0.4, 0.5, 0.0], [-0.3, 0.8, 0.0]]);
        let d = vector_field(&p, &s).unwrap();
        for a in 0..2 {
            assert_eq!(d.components[a][0], 0.0);
            assert_eq!(d.components[a][1], 0.0);
        }
    }

    #[test]
    fn norm_is_conserved_pointwise() {
        let s = BlochState::new(vec![[0.3, -0.2, 0.5], [-0.6, 0.1, 0.7], [0.0, 0.9, -0.1]]);
        for coupling in [CouplingSpec::dissipative(0.7), CouplingSpec::coherent(1.3)] {
            let p = params(&[1.5, 0.9, 0.4], coupling);
            let d = vector_field(&p, &s).unwrap();
            for (m, dm) in s.components.iter().zip(&d.components) {
                let dot: f64 = m.iter().zip(dm).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = params(&[1.5, 0.9], CouplingSpec::dissipative(0.1));
        let err = vector_field(&p, &BlochState::polarized(3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 3 }));
    }

    #[test]
    fn ladder_steps() {
        let p = uniform_detuning_ladder(5, 1.5, 0.3, 1.0).unwrap();
        let expect = [1.5, 1.425, 1.35, 1.275, 1.2];
        for (e, x) in p.ensembles.iter().zip(expect) {
            assert!((e.omega - x).abs() < 1e-12);
            assert_eq!(e.kappa, 1.0);
        }
        assert_eq!(p.coupling.strength, 0.0);

        let p = uniform_detuning_ladder(2, 1.2, 0.0, 1.0).unwrap();
        assert_eq!(p.omegas(), vec![1.2, 1.2]);

        assert!(matches!(
            uniform_detuning_ladder(1, 1.5, 0.3, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn parameter_validation() {
        assert!(NetworkParams::from_omegas(&[1.0], 0.0, CouplingSpec::none()).is_err());
        assert!(NetworkParams::from_omegas(&[-0.1], 1.0, CouplingSpec::none()).is_err());
        assert!(NetworkParams::from_omegas(&[], 1.0, CouplingSpec::none()).is_err());
        assert!(NetworkParams::from_omegas(&[1.0], 1.0, CouplingSpec::dissipative(-1.0)).is_err());
        let e = EnsembleParams::new(1.0, 1.0).with_spins(0);
        assert!(NetworkParams::new(vec![e], CouplingSpec::none()).is_err());
    }
}

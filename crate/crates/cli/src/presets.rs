//! Built-in parameter sets for the figure-reproduction recipes.

use clap::ValueEnum;
use timeseed_core::model::uniform_detuning_ladder;
use timeseed_core::sweep::{Axis, AxisKind, Metric};
use timeseed_core::{CouplingSpec, IntegrationConfig, NetworkParams};

use crate::config::{CritSection, RunConfig, SpectrumSection, SweepSection};

/// Long enough for transients to die out before the analysis window.
const SWEEP_T_END: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Seed A at 1.5κ, B at 0.9κ, dissipative Γ = 0.1κ.
    Fig1,
    /// Same network, finite-size ladder for the dominant eigenvalue.
    Fig1f,
    /// One seed at 1.2κ and n − 1 ensembles at 0.9κ, swept over Γ and n.
    Fig2,
    /// Δ^obs over detuning and Γ with Ω_A = 1.15κ.
    Fig3a,
    /// Five ensembles below 1.5κ at Γ = 0.5κ, swept over the detuning interval.
    Fig3e,
    /// Coherent coupling, seed at 1.2κ, B at 0.9κ.
    #[value(name = "appD")]
    AppD,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Fig1,
        Preset::Fig1f,
        Preset::Fig2,
        Preset::Fig3a,
        Preset::Fig3e,
        Preset::AppD,
    ];

    pub fn config(self) -> RunConfig {
        let pair = |wa: f64, wb: f64, coupling: CouplingSpec| {
            NetworkParams::from_omegas(&[wa, wb], 1.0, coupling).expect("preset parameters are valid")
        };
        let base = |params: NetworkParams| RunConfig {
            params,
            integration: IntegrationConfig::default(),
            initial: None,
            window_fraction: timeseed_core::analysis::DEFAULT_WINDOW,
            spectrum: SpectrumSection::default(),
            sweep: None,
            crit: CritSection::default(),
        };
        let sweep_cfg = IntegrationConfig::default().with_t_end(SWEEP_T_END);
        match self {
            Preset::Fig1 | Preset::Fig1f => {
                let mut cfg = base(pair(1.5, 0.9, CouplingSpec::dissipative(0.1)));
                cfg.crit = CritSection {
                    lo: 0.5,
                    hi: 1.0,
                    tol: 1e-4,
                };
                if self == Preset::Fig1f {
                    // five sizes so the fourth-order fit of Im λ₁ is determined
                    cfg.spectrum.sizes = vec![6, 10, 14, 18, 22];
                }
                cfg
            }
            Preset::Fig2 => {
                let mut cfg = base(pair(1.2, 0.9, CouplingSpec::dissipative(0.1)));
                cfg.integration = sweep_cfg;
                cfg.sweep = Some(SweepSection {
                    axis1: Axis::new(AxisKind::Coupling, 0.0, 0.6, 31),
                    axis2: Some(Axis::new(AxisKind::EnsembleCount, 2.0, 5.0, 4)),
                    metric: Metric::OmegaObs,
                    ensemble_index: 1,
                });
                cfg
            }
            Preset::Fig3a => {
                let mut cfg = base(pair(1.15, 1.15, CouplingSpec::dissipative(0.05)));
                cfg.integration = sweep_cfg;
                cfg.sweep = Some(SweepSection {
                    axis1: Axis::new(AxisKind::Detuning, 0.0, 0.5, 40),
                    axis2: Some(Axis::new(AxisKind::Coupling, 0.0, 0.25, 40)),
                    metric: Metric::DeltaObs,
                    ensemble_index: 0,
                });
                cfg
            }
            Preset::Fig3e => {
                let params = uniform_detuning_ladder(5, 1.5, 0.05, 1.0)
                    .expect("preset parameters are valid");
                let mut cfg = base(NetworkParams {
                    coupling: CouplingSpec::dissipative(0.5),
                    ..params
                });
                cfg.integration = sweep_cfg;
                cfg.sweep = Some(SweepSection {
                    axis1: Axis::new(AxisKind::DetuningInterval, 0.0, 0.4, 41),
                    axis2: None,
                    metric: Metric::Variance,
                    ensemble_index: 0,
                });
                cfg
            }
            Preset::AppD => {
                let mut cfg = base(pair(1.2, 0.9, CouplingSpec::coherent(1.0)));
                cfg.crit = CritSection {
                    lo: 1.0,
                    hi: 1.2,
                    tol: 1e-4,
                };
                cfg
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use timeseed_core::CouplingKind;

    #[test]
    fn every_preset_validates() {
        for p in Preset::ALL {
            p.config().validate().unwrap_or_else(|e| panic!("{p:?}: {e}"));
        }
    }

    #[test]
    fn caption_parameters() {
        let f1 = Preset::Fig1.config().params;
        assert_eq!(f1.omegas(), [1.5, 0.9]);
        assert_eq!(f1.coupling, CouplingSpec::dissipative(0.1));
        assert!(f1.ensembles.iter().all(|e| e.kappa == 1.0));

        assert_eq!(Preset::Fig1f.config().params, f1);

        let f2 = Preset::Fig2.config().params;
        assert_eq!(f2.omegas(), [1.2, 0.9]);

        let f3a = Preset::Fig3a.config();
        assert_eq!(f3a.params.ensembles[0].omega, 1.15);
        let sw = f3a.sweep.unwrap();
        assert_eq!((sw.axis1.count, sw.axis2.unwrap().count), (40, 40));

        let f3e = Preset::Fig3e.config().params;
        assert_eq!(f3e.n(), 5);
        assert_eq!(f3e.omegas().into_iter().fold(0.0, f64::max), 1.5);
        assert_eq!(f3e.coupling, CouplingSpec::dissipative(0.5));

        let d = Preset::AppD.config();
        assert_eq!(d.params.omegas(), [1.2, 0.9]);
        assert_eq!(d.params.coupling.kind, CouplingKind::Coherent);
        assert_eq!((d.crit.lo, d.crit.hi, d.crit.tol), (1.0, 1.2, 1e-4));
    }
}

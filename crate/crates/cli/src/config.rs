//! Run configuration: the JSON document, its validation, and flag overrides.

use std::fmt;

use serde::{Deserialize, Serialize};
use timeseed_core::model::NORM_TOLERANCE;
use timeseed_core::sweep::{Axis, GridSpec, Metric};
use timeseed_core::{BlochState, IntegrationConfig, NetworkParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: NetworkParams,
    #[serde(default)]
    pub integration: IntegrationConfig,
    /// Initial Bloch vectors. Fully polarised when absent.
    #[serde(default)]
    pub initial: Option<Vec<[f64; 3]>>,
    /// Trailing fraction of the run used by frequency estimates.
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub crit: CritSection,
}

fn default_window() -> f64 {
    timeseed_core::analysis::DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    /// Even total atom numbers, split equally between the two ensembles.
    pub sizes: Vec<usize>,
    /// Slow eigenvalues kept per size.
    pub k: usize,
    /// Requested fit orders. Lowered to what the ladder can determine.
    pub mu_re: usize,
    pub mu_im: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            sizes: vec![6, 10, 14, 18],
            k: 10,
            mu_re: 5,
            mu_im: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis1: Axis,
    #[serde(default)]
    pub axis2: Option<Axis>,
    pub metric: Metric,
    #[serde(default)]
    pub ensemble_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CritSection {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
}

impl Default for CritSection {
    fn default() -> Self {
        CritSection {
            lo: 0.0,
            hi: 2.0,
            tol: 1e-4,
        }
    }
}

/// A rejected configuration. Every problem carries the path of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<(String, String)>,
}

impl ConfigError {
    pub fn single(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError {
            problems: vec![(path.into(), msg.into())],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (path, msg)) in self.problems.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            if path.is_empty() {
                write!(f, "config: {msg}")?;
            } else {
                write!(f, "config {path}: {msg}")?;
            }
        }
        Ok(())
    }
}

/// Byte offset of a 1-based (line, column) position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parses a JSON document. Syntax errors name the byte offset, type errors
/// also name the field path.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: Result<RunConfig, _> = serde_path_to_error::deserialize(&mut de);
    let cfg = match parsed {
        Ok(cfg) => cfg,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            let at = byte_offset(text, inner.line(), inner.column());
            let msg = if inner.is_syntax() || inner.is_eof() {
                format!("malformed JSON at byte {at}: {inner}")
            } else {
                format!("{inner} (byte {at})")
            };
            let path = if path == "." { String::new() } else { path };
            return Err(ConfigError::single(path, msg));
        }
    };
    de.end()
        .map_err(|e| ConfigError::single("", format!("malformed JSON at byte {}: {e}", byte_offset(text, e.line(), e.column()))))?;
    Ok(cfg)
}

impl RunConfig {
    /// Checks every field, collecting all problems before reporting.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad: Vec<(String, String)> = Vec::new();
        let mut push = |path: String, msg: String| bad.push((path, msg));

        let ens = &self.params.ensembles;
        if ens.is_empty() {
            push("params.ensembles".into(), "need at least one ensemble".into());
        }
        for (i, e) in ens.iter().enumerate() {
            if !(e.omega >= 0.0 && e.omega.is_finite()) {
                push(format!("params.ensembles[{i}].omega"), format!("must be >= 0, got {}", e.omega));
            }
            if !(e.kappa > 0.0 && e.kappa.is_finite()) {
                push(format!("params.ensembles[{i}].kappa"), format!("must be > 0, got {}", e.kappa));
            }
            if e.n_spins == 0 {
                push(format!("params.ensembles[{i}].n_spins"), "must be >= 1".into());
            }
        }
        let g = self.params.coupling.strength;
        if !(g >= 0.0 && g.is_finite()) {
            push("params.coupling.strength".into(), format!("must be >= 0, got {g}"));
        }
        if let Err(e) = self.integration.validate() {
            push("integration".into(), core_message(&e));
        }
        if let Some(init) = &self.initial {
            if init.len() != ens.len() {
                push(
                    "initial".into(),
                    format!("expected {} vectors, got {}", ens.len(), init.len()),
                );
            }
            for (i, m) in init.iter().enumerate() {
                let r = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                if !r.is_finite() || r > 1.0 + NORM_TOLERANCE {
                    push(format!("initial[{i}]"), format!("|m| = {r} is outside the unit ball"));
                }
            }
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 0.5) {
            push(
                "window_fraction".into(),
                format!("must lie in (0, 0.5], got {}", self.window_fraction),
            );
        }
        for (i, &n) in self.spectrum.sizes.iter().enumerate() {
            if n < 2 || n % 2 != 0 {
                push(format!("spectrum.sizes[{i}]"), format!("must be even and >= 2, got {n}"));
            }
        }
        if self.spectrum.k < 3 {
            push("spectrum.k".into(), format!("must be >= 3, got {}", self.spectrum.k));
        }
        if let Some(sw) = &self.sweep {
            if let Err(e) = sw.axis1.validate() {
                push("sweep.axis1".into(), core_message(&e));
            }
            if let Some(a2) = &sw.axis2 {
                if let Err(e) = a2.validate() {
                    push("sweep.axis2".into(), core_message(&e));
                }
            }
        }
        let c = self.crit;
        if !(c.lo >= 0.0 && c.hi > c.lo && c.hi.is_finite()) {
            push("crit".into(), format!("need 0 <= lo < hi, got lo = {}, hi = {}", c.lo, c.hi));
        }
        if !(c.tol > 0.0) {
            push("crit.tol".into(), format!("must be > 0, got {}", c.tol));
        }

        if bad.is_empty() {
            // whole-grid checks only make sense once the pieces are sound
            if let Some(spec) = self.grid_spec() {
                if let Err(e) = spec.validate() {
                    bad.push(("sweep".into(), core_message(&e)));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: bad })
        }
    }

    pub fn initial_state(&self) -> BlochState {
        match &self.initial {
            Some(v) => BlochState::new(v.clone()),
            None => BlochState::polarized(self.params.n()),
        }
    }

    pub fn grid_spec(&self) -> Option<GridSpec> {
        let sw = self.sweep.as_ref()?;
        let mut spec = GridSpec::new(sw.axis1, sw.axis2, self.params.clone(), sw.metric);
        spec.ensemble_index = sw.ensemble_index;
        spec.window_fraction = self.window_fraction;
        spec.initial = self.initial.as_ref().map(|v| BlochState::new(v.clone()));
        Some(spec)
    }
}

/// Parses `x,y,z;x,y,z;...` into Bloch vectors.
pub fn parse_triples(raw: &str) -> Result<Vec<[f64; 3]>, ConfigError> {
    let err = |msg: String| ConfigError::single("--seed-override", msg);
    raw.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|triple| {
            let xs: Vec<f64> = triple
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(format!("{triple:?}: {e}")))?;
            <[f64; 3]>::try_from(xs)
                .map_err(|xs| err(format!("expected 3 components, got {}", xs.len())))
        })
        .collect()
}

fn core_message(e: &timeseed_core::Error) -> String {
    match e {
        timeseed_core::Error::InvalidArgument(msg) => msg.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"params": {"ensembles": [{"omega": 1.5, "kappa": 1.0}]}}"#;

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.params.n(), 1);
        assert_eq!(cfg.params.coupling.strength, 0.0);
        assert_eq!(cfg.integration, IntegrationConfig::default());
        assert_eq!(cfg.spectrum, SpectrumSection::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn syntax_error_names_byte_offset() {
        let text = "{\n  \"params\": {\"ensembles\": [}\n}";
        let err = parse_config(text).unwrap_err();
        let msg = err.to_string();
        let at = text.find("[}").unwrap() + 1;
        assert!(msg.contains(&format!("byte {at}")), "{msg}");
    }

    #[test]
    fn type_error_names_field_path() {
        let text = r#"{"params": {"ensembles": [{"omega": "fast", "kappa": 1.0}]}}"#;
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.problems[0].0, "params.ensembles[0].omega");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = r#"{"params": {"ensembles": [{"omega": 1.0, "kappa": 1.0}]}, "integrashun": {}}"#;
        assert!(parse_config(text).is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let text = format!("{MINIMAL} x");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("byte"));
    }

    #[test]
    fn validation_collects_all_paths() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.params.ensembles[0].kappa = -1.0;
        cfg.window_fraction = 2.0;
        cfg.spectrum.sizes = vec![6, 7];
        let err = cfg.validate().unwrap_err();
        let paths: Vec<&str> = err.problems.iter().map(|p| p.0.as_str()).collect();
        assert_eq!(paths, ["params.ensembles[0].kappa", "window_fraction", "spectrum.sizes[1]"]);
    }

    #[test]
    fn initial_must_match_ensembles() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.initial = Some(vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        assert_eq!(cfg.validate().unwrap_err().problems[0].0, "initial");
    }

    #[test]
    fn triples() {
        assert_eq!(
            parse_triples("0,0,1; 0.6,0,0.8").unwrap(),
            vec![[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]
        );
        assert!(parse_triples("0,1").is_err());
        assert!(parse_triples("a,b,c").is_err());
    }

    #[test]
    fn byte_offsets() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("ab", 1, 1), 0);
    }
}

//! Observables extracted from trajectories: oscillation amplitude, observed
//! frequency `ω^obs = 2π/T`, Fourier spectra and synchronisation measures.
//!
//! All estimators look only at a trailing window of the trajectory so that
//! transients are discarded.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::Trajectory;

/// Half peak-to-peak amplitude below which a signal counts as stationary.
pub const AMP_THRESHOLD: f64 = 1e-4;
/// `Δ^obs` below which two ensembles count as synchronised.
pub const SYNC_THRESHOLD: f64 = 1e-3;
/// Trailing fraction of a trajectory used for frequency estimation.
pub const DEFAULT_WINDOW: f64 = 0.25;
/// Minimum window length for [`fourier_spectrum`].
pub const MIN_FOURIER_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyMethod {
    PeakSpacing,
    FourierPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    /// Angular frequency; 0 when no oscillation is detected.
    pub omega_obs: f64,
    /// Half the peak-to-peak excursion inside the window.
    pub amplitude: f64,
    pub method: FrequencyMethod,
    pub uncertainty: f64,
    /// Set when peak spacing and the Fourier peak disagree by more than two bins.
    pub flagged: bool,
}

impl FrequencyEstimate {
    pub fn is_oscillating(&self) -> bool {
        self.omega_obs > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncMetrics {
    /// `|ω_0 − ω_1|`.
    pub delta_obs: f64,
    /// Population variance of all observed frequencies.
    pub variance: f64,
    pub per_ensemble: Vec<FrequencyEstimate>,
}

impl SyncMetrics {
    pub fn is_synchronized(&self) -> bool {
        self.delta_obs < SYNC_THRESHOLD
    }
}

fn window_bounds(len: usize, window_fraction: f64) -> Result<usize> {
    if !(window_fraction > 0.0 && window_fraction <= 0.5) {
        return Err(Error::invalid(format!(
            "window fraction must lie in (0, 0.5], got {window_fraction}"
        )));
    }
    let count = (len as f64 * window_fraction).round() as usize;
    if count < 2 {
        return Err(Error::invalid(format!(
            "analysis window holds {count} samples, need at least 2"
        )));
    }
    Ok(len - count)
}

fn half_peak_to_peak(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    0.5 * (hi - lo)
}

/// Sub-sample position of a maximum through three equally spaced samples,
/// returned as an offset in `[-0.5, 0.5]` from the middle one.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

/// Times of the maxima of `values`, one per excursion above the mid level.
/// Excursions cut by either window edge are skipped.
fn excursion_peaks(times: &[f64], values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mid = 0.5 * (lo + hi);
    let dt = times[1] - times[0];
    let mut peaks = Vec::new();
    let mut start: Option<usize> = None;
    for i in 1..values.len() {
        let above_prev = values[i - 1] > mid;
        let above = values[i] > mid;
        if above && !above_prev {
            start = Some(i);
        } else if !above && above_prev {
            if let Some(s) = start.take() {
                let best = (s..i)
                    .max_by(|&a, &b| values[a].total_cmp(&values[b]))
                    .unwrap();
                let offset = if best > 0 && best + 1 < values.len() {
                    parabolic_offset(values[best - 1], values[best], values[best + 1])
                } else {
                    0.0
                };
                peaks.push(times[best] + offset * dt);
            }
        }
    }
    peaks
}

fn hann(i: usize, len: usize) -> f64 {
    if len <= 1 {
        return 1.0;
    }
    0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1) as f64).cos()
}

/// Magnitudes of the DFT of the mean-subtracted, Hann-windowed signal,
/// zero-padded to `padded_len`. Bins `0..=padded_len/2`.
fn windowed_magnitudes(values: &[f64], padded_len: usize) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut buf: Vec<Complex64> = (0..padded_len)
        .map(|i| {
            if i < values.len() {
                Complex64::new((values[i] - mean) * hann(i, values.len()), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(padded_len).process(&mut buf);
    buf[..=padded_len / 2].iter().map(|c| c.norm()).collect()
}

/// Angular frequency of the strongest non-DC Fourier component, refined by
/// parabolic interpolation on a 4× zero-padded transform.
fn fourier_peak(values: &[f64], dt: f64) -> Option<f64> {
    let padded = (4 * values.len()).next_power_of_two();
    let mags = windowed_magnitudes(values, padded);
    let (best, &peak) = mags
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(peak > 0.0) {
        return None;
    }
    let offset = if best + 1 < mags.len() {
        parabolic_offset(mags[best - 1], mags[best], mags[best + 1])
    } else {
        0.0
    };
    Some(2.0 * PI * (best as f64 + offset) / (padded as f64 * dt))
}

/// Frequency estimate for an arbitrary uniformly sampled series.
pub fn estimate_frequency(times: &[f64], values: &[f64], window_fraction: f64) -> Result<FrequencyEstimate> {
    if times.len() != values.len() {
        return Err(Error::invalid("times and values differ in length"));
    }
    let start = window_bounds(values.len(), window_fraction)?;
    let t = &times[start..];
    let v = &values[start..];
    let amplitude = half_peak_to_peak(v);
    if !(amplitude >= AMP_THRESHOLD) {
        return Ok(FrequencyEstimate {
            omega_obs: 0.0,
            amplitude: if amplitude.is_finite() { amplitude } else { 0.0 },
            method: FrequencyMethod::PeakSpacing,
            uncertainty: 0.0,
            flagged: false,
        });
    }

    let dt = t[1] - t[0];
    let span = t[t.len() - 1] - t[0] + dt;
    let bin = 2.0 * PI / span;
    let fourier = fourier_peak(v, dt);

    let peaks = excursion_peaks(t, v);
    if peaks.len() >= 3 {
        let spacings: Vec<f64> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
        let m = spacings.len() as f64;
        let period = spacings.iter().sum::<f64>() / m;
        let var = spacings.iter().map(|s| (s - period).powi(2)).sum::<f64>() / m;
        let omega = 2.0 * PI / period;
        // propagate the period spread to ω
        let uncertainty = omega * (var.sqrt() / m.sqrt()) / period;
        let flagged = fourier.map_or(true, |f| (f - omega).abs() > 2.0 * bin);
        Ok(FrequencyEstimate {
            omega_obs: omega,
            amplitude,
            method: FrequencyMethod::PeakSpacing,
            uncertainty,
            flagged,
        })
    } else {
        let omega = fourier.unwrap_or(0.0);
        Ok(FrequencyEstimate {
            omega_obs: omega,
            amplitude,
            method: FrequencyMethod::FourierPeak,
            uncertainty: bin,
            flagged: false,
        })
    }
}

/// Observed frequency of `⟨m^z⟩` for one ensemble over the trailing
/// `window_fraction` of the trajectory.
pub fn observed_frequency(
    traj: &Trajectory,
    ensemble_index: usize,
    window_fraction: f64,
) -> Result<FrequencyEstimate> {
    check_index(traj, ensemble_index)?;
    estimate_frequency(&traj.times, &traj.mz(ensemble_index), window_fraction)
}

fn check_index(traj: &Trajectory, ensemble_index: usize) -> Result<()> {
    if ensemble_index >= traj.n_ensembles() {
        return Err(Error::invalid(format!(
            "ensemble index {ensemble_index} out of range for {} ensembles",
            traj.n_ensembles()
        )));
    }
    if traj.len() < 2 {
        return Err(Error::invalid("trajectory has fewer than 2 samples"));
    }
    Ok(())
}

/// Normalised DFT magnitude of `⟨m^z⟩` over the trailing [`DEFAULT_WINDOW`]
/// as `(angular frequency, magnitude)` pairs.
pub fn fourier_spectrum(traj: &Trajectory, ensemble_index: usize) -> Result<Vec<(f64, f64)>> {
    check_index(traj, ensemble_index)?;
    fourier_spectrum_series(&traj.times, &traj.mz(ensemble_index), DEFAULT_WINDOW)
}

pub fn fourier_spectrum_series(times: &[f64], values: &[f64], window_fraction: f64) -> Result<Vec<(f64, f64)>> {
    let start = window_bounds(values.len(), window_fraction)?;
    let v = &values[start..];
    if v.len() < MIN_FOURIER_SAMPLES {
        return Err(Error::invalid(format!(
            "Fourier window holds {} samples, need at least {MIN_FOURIER_SAMPLES}",
            v.len()
        )));
    }
    let dt = times[start + 1] - times[start];
    let mags = windowed_magnitudes(v, v.len());
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let norm = if peak > 0.0 { peak } else { 1.0 };
    let df = 2.0 * PI / (v.len() as f64 * dt);
    Ok(mags
        .iter()
        .enumerate()
        .map(|(k, m)| (k as f64 * df, m / norm))
        .collect())
}

/// Angular frequency of the largest bin of a spectrum from [`fourier_spectrum`].
pub fn peak_frequency(spectrum: &[(f64, f64)]) -> Option<f64> {
    spectrum
        .iter()
        .skip(1)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|p| p.0)
}

pub fn sync_metrics(traj: &Trajectory) -> Result<SyncMetrics> {
    sync_metrics_with(traj, DEFAULT_WINDOW)
}

pub fn sync_metrics_with(traj: &Trajectory, window_fraction: f64) -> Result<SyncMetrics> {
    if traj.n_ensembles() < 2 {
        return Err(Error::invalid("synchronisation needs at least two ensembles"));
    }
    let per_ensemble = (0..traj.n_ensembles())
        .map(|a| observed_frequency(traj, a, window_fraction))
        .collect::<Result<Vec<_>>>()?;
    let omegas: Vec<f64> = per_ensemble.iter().map(|f| f.omega_obs).collect();
    Ok(SyncMetrics {
        delta_obs: (omegas[0] - omegas[1]).abs(),
        variance: population_variance(&omegas),
        per_ensemble,
    })
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Largest half peak-to-peak excursion of `⟨m^z⟩` across ensembles in the
/// trailing window.
pub fn max_amplitude(traj: &Trajectory, window_fraction: f64) -> Result<f64> {
    let start = window_bounds(traj.len(), window_fraction)?;
    Ok((0..traj.n_ensembles())
        .map(|a| half_peak_to_peak(&traj.mz(a)[start..]))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t_end: f64, dt: f64) -> Vec<f64> {
        let n = (t_end / dt).round() as usize + 1;
        (0..n).map(|i| i as f64 * dt).collect()
    }

    #[test]
    fn sinusoid_frequency() {
        let t = grid(200.0, 0.01);
        let v: Vec<f64> = t.iter().map(|t| 0.1 * (PI * t).sin()).collect();
        let f = estimate_frequency(&t, &v, 0.25).unwrap();
        assert_eq!(f.method, FrequencyMethod::PeakSpacing);
        assert!((f.omega_obs - PI).abs() < 1e-3, "{f:?}");
        assert!((f.amplitude - 0.1).abs() < 1e-4);
        assert!(!f.flagged);
    }

    #[test]
    fn constant_signal_is_not_oscillating() {
        let t = grid(10.0, 0.05);
        let v = vec![0.3; t.len()];
        let f = estimate_frequency(&t, &v, 0.25).unwrap();
        assert_eq!(f.omega_obs, 0.0);
        assert_eq!(f.amplitude, 0.0);
    }

    #[test]
    fn sub_threshold_signal_reports_zero() {
        let t = grid(100.0, 0.05);
        let v: Vec<f64> = t.iter().map(|t| 5e-5 * t.sin()).collect();
        let f = estimate_frequency(&t, &v, 0.25).unwrap();
        assert_eq!(f.omega_obs, 0.0);
        assert!(f.amplitude > 0.0 && f.amplitude < AMP_THRESHOLD);
    }

    #[test]
    fn few_periods_fall_back_to_fourier() {
        // a bit over one period in the window
        let t = grid(100.0, 0.01);
        let v: Vec<f64> = t.iter().map(|t| (0.3 * t).cos()).collect();
        let f = estimate_frequency(&t, &v, 0.25).unwrap();
        assert_eq!(f.method, FrequencyMethod::FourierPeak);
        assert!((f.omega_obs - 0.3).abs() < f.uncertainty, "{f:?}");
    }

    #[test]
    fn harmonics_do_not_double_count_peaks() {
        let t = grid(300.0, 0.02);
        let v: Vec<f64> = t
            .iter()
            .map(|t| (0.7 * t).sin() + 0.3 * (2.1 * t).sin())
            .collect();
        let f = estimate_frequency(&t, &v, 0.25).unwrap();
        assert!((f.omega_obs - 0.7).abs() < 1e-3, "{f:?}");
    }

    #[test]
    fn window_validation() {
        let t = grid(1.0, 0.5);
        let v = vec![0.0; t.len()];
        assert!(estimate_frequency(&t, &v, 0.25).is_err());
        let t = grid(10.0, 0.1);
        let v = vec![0.0; t.len()];
        assert!(estimate_frequency(&t, &v, 0.0).is_err());
        assert!(estimate_frequency(&t, &v, 0.6).is_err());
    }

    #[test]
    fn spectrum_peak_is_at_signal_frequency() {
        let dt = 0.05;
        let t = grid(400.0, dt);
        let w0 = 1.3;
        let v: Vec<f64> = t.iter().map(|t| (w0 * t).sin()).collect();
        let spec = fourier_spectrum_series(&t, &v, 0.25).unwrap();
        let bin = spec[1].0;
        let peak = peak_frequency(&spec).unwrap();
        assert!((peak - w0).abs() <= bin, "peak {peak}, bin {bin}");
        let max = spec.iter().map(|p| p.1).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_needs_enough_samples() {
        let t = grid(10.0, 0.1);
        let v: Vec<f64> = t.iter().map(|t| t.sin()).collect();
        assert!(fourier_spectrum_series(&t, &v, 0.25).is_err());
    }

    #[test]
    fn variance_is_population_variance() {
        assert_eq!(population_variance(&[1.0, 1.0, 1.0]), 0.0);
        assert!((population_variance(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}

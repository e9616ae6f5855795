//! Synthetic panel generator with planted temporal structure.
//!
//! The target series mixes daily and weekly sinusoids, AR(1) noise,
//! and exponentially decaying spikes. A dedicated exogenous channel
//! carries each spike `spike_advance` hours early, a planted
//! "forecast" that makes attention over the input window genuinely
//! informative. Every component draws from its own seed sub-stream, so
//! tests can regenerate components independently.

use serde::{Deserialize, Serialize};

use super::panel::{Feature, FeatureKind, Panel};
use crate::error::{Error, Result};
use crate::tensor::{component_seed, Rng};

fn default_stations() -> usize {
    2
}

fn default_hours() -> usize {
    4000
}

fn default_daily() -> f64 {
    1.0
}

fn default_weekly() -> f64 {
    0.5
}

fn default_ar_coeff() -> f64 {
    0.8
}

fn default_ar_std() -> f64 {
    0.3
}

fn default_spike_rate() -> f64 {
    0.01
}

fn default_spike_amplitude() -> f64 {
    3.0
}

fn default_spike_advance() -> usize {
    24
}

fn default_spike_decay() -> f64 {
    6.0
}

fn default_target_name() -> String {
    "target".into()
}

/// Configuration of the synthetic generator. Accepted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_stations")]
    pub stations: usize,
    /// Extra white-noise exogenous channels (distractors).
    #[serde(default)]
    pub noise_features: usize,
    #[serde(default = "default_hours")]
    pub hours: usize,
    #[serde(default = "default_daily")]
    pub daily_amplitude: f64,
    #[serde(default = "default_weekly")]
    pub weekly_amplitude: f64,
    /// AR(1) coefficient of the noise component, in (-1, 1).
    #[serde(default = "default_ar_coeff")]
    pub ar_coeff: f64,
    #[serde(default = "default_ar_std")]
    pub ar_std: f64,
    /// Per-hour probability of a spike event per station.
    #[serde(default = "default_spike_rate")]
    pub spike_rate: f64,
    #[serde(default = "default_spike_amplitude")]
    pub spike_amplitude: f64,
    /// Hours of advance warning carried by the forecast channel.
    #[serde(default = "default_spike_advance")]
    pub spike_advance: usize,
    /// E-folding time (hours) of a spike's effect on the target.
    #[serde(default = "default_spike_decay")]
    pub spike_decay: f64,
    #[serde(default = "default_target_name")]
    pub target_name: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are valid")
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stations == 0 || self.hours == 0 {
            return Err(Error::Config("stations and hours must be positive".into()));
        }
        if self.ar_coeff.abs() >= 1.0 {
            return Err(Error::Config(format!(
                "ar_coeff must lie in (-1, 1), got {}",
                self.ar_coeff
            )));
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return Err(Error::Config(format!(
                "spike_rate must lie in [0, 1], got {}",
                self.spike_rate
            )));
        }
        if self.spike_decay <= 0.0 {
            return Err(Error::Config("spike_decay must be positive".into()));
        }
        Ok(())
    }
}

/// First grid hour: 2014-01-01T00:00:00Z.
fn start_hour() -> i64 {
    chrono::NaiveDate::from_ymd_opt(2014, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
        .and_utc()
        .timestamp()
        / 3600
}

/// Sinusoidal seasonal component for station `s`.
pub(crate) fn seasonal(config: &SynthConfig, seed: u64, s: usize, t: usize) -> f64 {
    use std::f64::consts::TAU;
    let mut phase_rng = Rng::seed(component_seed(seed, &format!("phase.s{s}")));
    let daily_phase = phase_rng.uniform_in(0.0, TAU);
    let weekly_phase = phase_rng.uniform_in(0.0, TAU);
    config.daily_amplitude * (TAU * t as f64 / 24.0 + daily_phase).sin()
        + config.weekly_amplitude * (TAU * t as f64 / 168.0 + weekly_phase).sin()
}

/// AR(1) series for station `s`.
pub(crate) fn ar_series(config: &SynthConfig, seed: u64, s: usize) -> Vec<f64> {
    let mut rng = Rng::seed(component_seed(seed, &format!("ar.s{s}")));
    let mut out = Vec::with_capacity(config.hours);
    let mut prev = 0.0;
    for _ in 0..config.hours {
        prev = config.ar_coeff * prev + config.ar_std * rng.normal();
        out.push(prev);
    }
    out
}

/// Spike event impulses for station `s`, extended past the panel end
/// so the forecast channel is defined everywhere.
pub(crate) fn spike_events(config: &SynthConfig, seed: u64, s: usize) -> Vec<f64> {
    let mut rng = Rng::seed(component_seed(seed, &format!("spikes.s{s}")));
    (0..config.hours + config.spike_advance)
        .map(|_| {
            let hit = rng.uniform() < config.spike_rate;
            let amp = config.spike_amplitude * rng.uniform_in(0.5, 1.5);
            if hit {
                amp
            } else {
                0.0
            }
        })
        .collect()
}

/// Generates a panel. Fully reproducible from (config, seed).
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Panel> {
    config.validate()?;
    let mut features = vec![
        Feature { name: config.target_name.clone(), kind: FeatureKind::Target },
        Feature { name: "spike_forecast".into(), kind: FeatureKind::Exogenous },
    ];
    for j in 0..config.noise_features {
        features.push(Feature {
            name: format!("noise{j}"),
            kind: FeatureKind::Exogenous,
        });
    }
    let stations: Vec<String> = (0..config.stations).map(|s| format!("s{s}")).collect();
    let mut panel = Panel::new(stations, features, start_hour(), config.hours)?;

    let decay = (-1.0 / config.spike_decay).exp();
    for s in 0..config.stations {
        let ar = ar_series(config, seed, s);
        let events = spike_events(config, seed, s);
        let mut contrib = 0.0;
        for t in 0..config.hours {
            contrib = contrib * decay + events[t];
            let y = seasonal(config, seed, s, t) + ar[t] + contrib;
            panel.set(s, 0, t, y);
            panel.set(s, 1, t, events[t + config.spike_advance]);
        }
        for j in 0..config.noise_features {
            let mut rng = Rng::seed(component_seed(seed, &format!("noise.s{s}.f{j}")));
            for t in 0..config.hours {
                panel.set(s, 2 + j, t, rng.normal());
            }
        }
    }
    Ok(panel)
}

//! Derived features: fixed-lag chunks and calendar encodings.

use serde::{Deserialize, Serialize};

use super::panel::{Feature, FeatureKind, Panel};
use crate::error::{Error, Result};

/// Maximum admissible lag: one year of hours.
pub const MAX_LAG_HOURS: usize = 8760;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagEntry {
    /// Name of the source feature to shift.
    pub source: String,
    /// Shift in hours; the derived value at `t` is the source at
    /// `t - lag`.
    pub lag_hours: usize,
}

/// Lag-chunk feature builder. Each entry adds one derived feature that
/// replays the source series `lag_hours` back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LagSpec {
    pub entries: Vec<LagEntry>,
}

impl LagSpec {
    /// Default lags: day-aligned (96 h) and week-aligned (168 h)
    /// chunks of the target.
    pub fn default_for(target: &str) -> Self {
        Self {
            entries: vec![
                LagEntry { source: target.to_string(), lag_hours: 96 },
                LagEntry { source: target.to_string(), lag_hours: 168 },
            ],
        }
    }

    /// Checks the prediction-time constraint: every derived chunk must
    /// be fully known when forecasting `t_out` hours ahead, which holds
    /// when `lag >= t_out`.
    pub fn validate(&self, t_out: usize) -> Result<()> {
        for e in &self.entries {
            if e.lag_hours < t_out {
                return Err(Error::Config(format!(
                    "lag {}h on {:?} is shorter than the output horizon {t_out}h",
                    e.lag_hours, e.source
                )));
            }
            if e.lag_hours > MAX_LAG_HOURS {
                return Err(Error::Config(format!(
                    "lag {}h on {:?} exceeds the {MAX_LAG_HOURS}h maximum",
                    e.lag_hours, e.source
                )));
            }
        }
        Ok(())
    }
}

/// Adds one derived feature per spec entry and trims the panel start
/// so every feature is defined on the whole remaining grid.
pub fn build_lag_features(mut panel: Panel, spec: &LagSpec) -> Result<Panel> {
    if spec.entries.is_empty() {
        return Ok(panel);
    }
    let max_lag = spec.entries.iter().map(|e| e.lag_hours).max().unwrap();
    if max_lag >= panel.len() {
        return Err(Error::Data(format!(
            "panel of {} hours cannot cover a lag of {max_lag} hours",
            panel.len()
        )));
    }
    for e in &spec.entries {
        let src = panel.feature_index(&e.source).ok_or_else(|| {
            Error::Data(format!("lag source feature {:?} not in panel", e.source))
        })?;
        let lag = e.lag_hours;
        let name = format!("{}_lag{}", e.source, lag);
        // values indexed on the untrimmed grid; trim below aligns them
        let source: Vec<Vec<f64>> = (0..panel.station_count())
            .map(|s| panel.series(s, src).to_vec())
            .collect();
        panel.push_feature(
            Feature { name, kind: FeatureKind::Derived },
            |s, t| {
                if t >= lag {
                    source[s][t - lag]
                } else {
                    0.0
                }
            },
        );
    }
    panel.trim_start(max_lag)?;
    Ok(panel)
}

/// Appends deterministic calendar features: hour-of-day and
/// day-of-week sinusoid pairs plus a weekend flag.
pub fn add_calendar_features(mut panel: Panel) -> Panel {
    use std::f64::consts::TAU;
    let start = panel.start_hour();
    // the Unix epoch fell on a Thursday
    let dow = move |t: usize| (((start + t as i64).div_euclid(24) + 4).rem_euclid(7)) as f64;
    let hod = move |t: usize| (start + t as i64).rem_euclid(24) as f64;

    let cal = |name: &str| Feature { name: name.into(), kind: FeatureKind::Calendar };
    panel.push_feature(cal("cal_hour_sin"), |_, t| (TAU * hod(t) / 24.0).sin());
    panel.push_feature(cal("cal_hour_cos"), |_, t| (TAU * hod(t) / 24.0).cos());
    panel.push_feature(cal("cal_dow_sin"), |_, t| (TAU * dow(t) / 7.0).sin());
    panel.push_feature(cal("cal_dow_cos"), |_, t| (TAU * dow(t) / 7.0).cos());
    // Monday = 0 in this encoding, so 5 and 6 are the weekend
    panel.push_feature(cal("cal_weekend"), |_, t| {
        if dow(t) >= 5.0 {
            1.0
        } else {
            0.0
        }
    });
    panel
}

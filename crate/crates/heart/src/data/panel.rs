//! Long-format hourly measurement panels in dense storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a feature in the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// The pollutant being forecast. Exactly one per panel.
    Target,
    /// Externally supplied series (forecasts, sensors).
    Exogenous,
    /// Deterministic calendar encodings.
    Calendar,
    /// Lag-shifted copies of other features.
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Hourly measurements for a set of stations and features on a dense,
/// gap-free grid. Values are stored `[station][feature][time]`
/// row-major; the registry order defines the `F` axis of model inputs.
#[derive(Debug, Clone)]
pub struct Panel {
    stations: Vec<String>,
    features: Vec<Feature>,
    /// Hours since the Unix epoch of the first grid point.
    start_hour: i64,
    len: usize,
    values: Vec<f64>,
}

impl Panel {
    /// Creates a zero-filled panel.
    pub fn new(
        stations: Vec<String>,
        features: Vec<Feature>,
        start_hour: i64,
        len: usize,
    ) -> Result<Self> {
        if stations.is_empty() || features.is_empty() || len == 0 {
            return Err(Error::Data(
                "panel needs at least one station, feature, and hour".into(),
            ));
        }
        let targets = features
            .iter()
            .filter(|f| f.kind == FeatureKind::Target)
            .count();
        if targets != 1 {
            return Err(Error::Data(format!(
                "panel must have exactly one target feature, found {targets}"
            )));
        }
        let values = vec![0.0; stations.len() * features.len() * len];
        Ok(Self {
            stations,
            features,
            start_hour,
            len,
            values,
        })
    }

    pub fn stations(&self) -> &[String] {
        &self.stations
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    /// Number of hourly grid points.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn start_hour(&self) -> i64 {
        self.start_hour
    }

    /// Epoch hour of grid point `t`.
    pub fn hour_at(&self, t: usize) -> i64 {
        self.start_hour + t as i64
    }

    /// Index of the unique target feature.
    pub fn target_index(&self) -> usize {
        self.features
            .iter()
            .position(|f| f.kind == FeatureKind::Target)
            .expect("panel invariant: exactly one target")
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    #[inline]
    fn offset(&self, s: usize, f: usize) -> usize {
        (s * self.features.len() + f) * self.len
    }

    #[inline]
    pub fn value(&self, s: usize, f: usize, t: usize) -> f64 {
        self.values[self.offset(s, f) + t]
    }

    #[inline]
    pub fn set(&mut self, s: usize, f: usize, t: usize, v: f64) {
        let i = self.offset(s, f) + t;
        self.values[i] = v;
    }

    /// Contiguous time series for one (station, feature).
    pub fn series(&self, s: usize, f: usize) -> &[f64] {
        let o = self.offset(s, f);
        &self.values[o..o + self.len]
    }

    /// Appends a feature column with per-(station, time) values
    /// supplied by `fill(s, t)`.
    pub fn push_feature(&mut self, feature: Feature, fill: impl Fn(usize, usize) -> f64) {
        let (s_n, f_n, len) = (self.stations.len(), self.features.len(), self.len);
        let mut values = vec![0.0; s_n * (f_n + 1) * len];
        for s in 0..s_n {
            for f in 0..f_n {
                let src = self.offset(s, f);
                let dst = (s * (f_n + 1) + f) * len;
                values[dst..dst + len].copy_from_slice(&self.values[src..src + len]);
            }
            for t in 0..len {
                values[(s * (f_n + 1) + f_n) * len + t] = fill(s, t);
            }
        }
        self.features.push(feature);
        self.values = values;
    }

    /// Drops the first `n` hours.
    pub fn trim_start(&mut self, n: usize) -> Result<()> {
        if n >= self.len {
            return Err(Error::Data(format!(
                "cannot trim {n} hours from a panel of {} hours",
                self.len
            )));
        }
        let new_len = self.len - n;
        let mut values = vec![0.0; self.stations.len() * self.features.len() * new_len];
        for s in 0..self.stations.len() {
            for f in 0..self.features.len() {
                let src = self.offset(s, f) + n;
                let dst = (s * self.features.len() + f) * new_len;
                values[dst..dst + new_len].copy_from_slice(&self.values[src..src + self.len - n]);
            }
        }
        self.start_hour += n as i64;
        self.len = new_len;
        self.values = values;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> Panel {
        let mut p = Panel::new(
            vec!["a".into(), "b".into()],
            vec![
                Feature { name: "no2".into(), kind: FeatureKind::Target },
                Feature { name: "wind".into(), kind: FeatureKind::Exogenous },
            ],
            0,
            4,
        )
        .unwrap();
        for s in 0..2 {
            for f in 0..2 {
                for t in 0..4 {
                    p.set(s, f, t, (s * 100 + f * 10 + t) as f64);
                }
            }
        }
        p
    }

    #[test]
    fn requires_exactly_one_target() {
        let err = Panel::new(
            vec!["a".into()],
            vec![Feature { name: "x".into(), kind: FeatureKind::Exogenous }],
            0,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn series_is_contiguous_per_station_feature() {
        let p = two_by_two();
        assert_eq!(p.series(1, 0), &[100.0, 101.0, 102.0, 103.0]);
        assert_eq!(p.value(0, 1, 2), 12.0);
    }

    #[test]
    fn trim_start_shifts_origin() {
        let mut p = two_by_two();
        p.trim_start(2).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.start_hour(), 2);
        assert_eq!(p.series(0, 0), &[2.0, 3.0]);
        assert!(p.trim_start(2).is_err());
    }

    #[test]
    fn push_feature_appends_column() {
        let mut p = two_by_two();
        p.push_feature(
            Feature { name: "flag".into(), kind: FeatureKind::Calendar },
            |s, t| (s + t) as f64,
        );
        assert_eq!(p.feature_count(), 3);
        assert_eq!(p.series(1, 2), &[1.0, 2.0, 3.0, 4.0]);
        // existing data untouched
        assert_eq!(p.series(1, 0), &[100.0, 101.0, 102.0, 103.0]);
    }
}

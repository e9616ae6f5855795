//! CSV ingestion and emission.
//!
//! Schema (exact column names, any column order, header required):
//!
//! ```text
//! station,feature,timestamp,value
//! st01,NO2,2014-01-01T00:00:00Z,34.5
//! ```
//!
//! Timestamps are ISO-8601 UTC on exact hours. The loader validates
//! the full grid: duplicates, gaps, and missing (station, feature)
//! series are hard errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDateTime;

use super::panel::{Feature, FeatureKind, Panel};
use crate::error::{Error, Result};

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

fn parse_hour(ts: &str, line: usize) -> Result<i64> {
    let dt = NaiveDateTime::parse_from_str(ts, TS_FORMAT).map_err(|e| Error::Parse {
        line,
        msg: format!("bad timestamp {ts:?}: {e}"),
    })?;
    let secs = dt.and_utc().timestamp();
    if secs % 3600 != 0 {
        return Err(Error::Parse {
            line,
            msg: format!("timestamp {ts:?} is not on an exact hour"),
        });
    }
    Ok(secs / 3600)
}

fn format_hour(hour: i64) -> String {
    chrono::DateTime::from_timestamp(hour * 3600, 0)
        .expect("hour in range")
        .format(TS_FORMAT)
        .to_string()
}

/// Loads a validated panel. `target_feature` names the pollutant
/// column being forecast; every other feature is tagged exogenous.
pub fn load_csv(path: &Path, target_feature: &str) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?} in header")))
    };
    let (c_station, c_feature, c_ts, c_value) = (
        col("station")?,
        col("feature")?,
        col("timestamp")?,
        col("value")?,
    );

    let mut rows: BTreeMap<(String, String, i64), f64> = BTreeMap::new();
    let mut stations: BTreeSet<String> = BTreeSet::new();
    let mut feature_names: BTreeSet<String> = BTreeSet::new();
    let mut hours: BTreeSet<i64> = BTreeSet::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("csv read error: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        let get = |i: usize| -> Result<&str> {
            record.get(i).ok_or(Error::Parse {
                line,
                msg: "short row".into(),
            })
        };
        let station = get(c_station)?.to_string();
        let feature = get(c_feature)?.to_string();
        let hour = parse_hour(get(c_ts)?, line)?;
        let raw = get(c_value)?;
        let value: f64 = raw.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("non-numeric value {raw:?}"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("non-finite value {raw:?}"),
            });
        }
        let key = (station.clone(), feature.clone(), hour);
        if rows.insert(key, value).is_some() {
            return Err(Error::Data(format!(
                "duplicate row for station {station:?}, feature {feature:?}, timestamp {}",
                format_hour(hour)
            )));
        }
        stations.insert(station);
        feature_names.insert(feature);
        hours.insert(hour);
    }

    if rows.is_empty() {
        return Err(Error::Data("empty input: no data rows".into()));
    }
    if !feature_names.contains(target_feature) {
        return Err(Error::Data(format!(
            "target feature {target_feature:?} not present (features: {feature_names:?})"
        )));
    }

    // the hourly grid must have no gaps
    let first = *hours.first().unwrap();
    let last = *hours.last().unwrap();
    let len = (last - first + 1) as usize;
    if hours.len() != len {
        let mut expect = first;
        for h in &hours {
            if *h != expect {
                return Err(Error::Data(format!(
                    "gap in hourly grid: first missing timestamp {}",
                    format_hour(expect)
                )));
            }
            expect += 1;
        }
    }

    // registry: target first, then the rest sorted by name
    let mut features: Vec<Feature> = vec![Feature {
        name: target_feature.to_string(),
        kind: FeatureKind::Target,
    }];
    for name in &feature_names {
        if name != target_feature {
            features.push(Feature {
                name: name.clone(),
                kind: FeatureKind::Exogenous,
            });
        }
    }
    let stations: Vec<String> = stations.into_iter().collect();

    let mut panel = Panel::new(stations, features, first, len)?;
    for (s, station) in panel.stations().to_vec().iter().enumerate() {
        for (f, feature) in panel.features().to_vec().iter().enumerate() {
            for t in 0..len {
                let key = (station.clone(), feature.name.clone(), first + t as i64);
                match rows.get(&key) {
                    Some(v) => panel.set(s, f, t, *v),
                    None => {
                        return Err(Error::Data(format!(
                            "missing value for station {station:?}, feature {:?} at {}",
                            feature.name,
                            format_hour(first + t as i64)
                        )))
                    }
                }
            }
        }
    }
    Ok(panel)
}

/// Writes a panel in the ingestion schema, rows ordered by
/// (station, feature, timestamp).
pub fn write_csv(panel: &Panel, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer
        .write_record(["station", "feature", "timestamp", "value"])
        .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
    for (s, station) in panel.stations().iter().enumerate() {
        for (f, feature) in panel.features().iter().enumerate() {
            for t in 0..panel.len() {
                writer
                    .write_record([
                        station.as_str(),
                        feature.name.as_str(),
                        &format_hour(panel.hour_at(t)),
                        &format!("{}", panel.value(s, f, t)),
                    ])
                    .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
            }
        }
    }
    writer
        .flush()
        .map_err(|e| Error::Data(format!("csv flush error: {e}")))?;
    Ok(())
}

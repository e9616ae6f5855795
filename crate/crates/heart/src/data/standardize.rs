//! Per-(station, feature) z-score standardization fitted on the
//! training split only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::windows::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SliceStats {
    mean: f64,
    std: f64,
    /// True when the training variance was numerically zero; the slice
    /// is centered but not scaled.
    degenerate: bool,
}

/// Standardization statistics. Inputs are z-scored per
/// (station, feature); targets use the target feature's statistics of
/// the matching station, so predictions can be mapped back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    stations: usize,
    features: usize,
    target_feature: usize,
    /// Indexed `[station][feature]`.
    stats: Vec<Vec<SliceStats>>,
}

impl Standardizer {
    /// Fits on the training samples. Call before any validation data
    /// is touched; the returned transformer is then applied to both
    /// splits.
    pub fn fit(train: &[Sample], target_feature: usize) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("cannot fit standardizer on an empty split".into()))?;
        let shape = first.input.shape().to_vec();
        let (s_n, f_n, t_n) = (shape[0], shape[1], shape[2]);
        if target_feature >= f_n {
            return Err(Error::Contract(format!(
                "target feature index {target_feature} out of range for F={f_n}"
            )));
        }
        let mut stats = vec![
            vec![SliceStats { mean: 0.0, std: 1.0, degenerate: false }; f_n];
            s_n
        ];
        let count = (train.len() * t_n) as f64;
        for s in 0..s_n {
            for f in 0..f_n {
                let mut sum = 0.0;
                for sample in train {
                    for t in 0..t_n {
                        sum += sample.input.at3(s, f, t);
                    }
                }
                let mean = sum / count;
                let mut var = 0.0;
                for sample in train {
                    for t in 0..t_n {
                        let d = sample.input.at3(s, f, t) - mean;
                        var += d * d;
                    }
                }
                let std = (var / count).sqrt();
                let degenerate = std < DEGENERATE_STD;
                stats[s][f] = SliceStats {
                    mean,
                    std: if degenerate { 1.0 } else { std },
                    degenerate,
                };
            }
        }
        Ok(Self {
            stations: s_n,
            features: f_n,
            target_feature,
            stats,
        })
    }

    /// Slices whose training variance was numerically zero.
    pub fn degenerate_slices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.stations {
            for f in 0..self.features {
                if self.stats[s][f].degenerate {
                    out.push((s, f));
                }
            }
        }
        out
    }

    pub fn transform(&self, sample: &Sample) -> Result<Sample> {
        let shape = sample.input.shape();
        if shape != [self.stations, self.features, shape[2]] {
            return Err(Error::Shape(format!(
                "standardizer fitted for [{}, {}, _], got {shape:?}",
                self.stations, self.features
            )));
        }
        let t_n = shape[2];
        let mut input = vec![0.0; sample.input.len()];
        for s in 0..self.stations {
            for f in 0..self.features {
                let st = &self.stats[s][f];
                for t in 0..t_n {
                    input[(s * self.features + f) * t_n + t] =
                        (sample.input.at3(s, f, t) - st.mean) / st.std;
                }
            }
        }
        let t_out = sample.target.shape()[1];
        let mut target = vec![0.0; sample.target.len()];
        for s in 0..self.stations {
            let st = &self.stats[s][self.target_feature];
            for o in 0..t_out {
                target[s * t_out + o] = (sample.target.at2(s, o) - st.mean) / st.std;
            }
        }
        Ok(Sample {
            input: Tensor::new(shape, input)?,
            target: Tensor::new(sample.target.shape(), target)?,
            start_hour: sample.start_hour,
        })
    }

    /// Maps standardized predictions `[S, t_out]` back to the original
    /// target units.
    pub fn unstandardize_target(&self, pred: &Tensor) -> Result<Tensor> {
        let shape = pred.shape();
        if shape.len() != 2 || shape[0] != self.stations {
            return Err(Error::Shape(format!(
                "expected [S={}, t_out], got {shape:?}",
                self.stations
            )));
        }
        let t_out = shape[1];
        let mut data = vec![0.0; pred.len()];
        for s in 0..self.stations {
            let st = &self.stats[s][self.target_feature];
            for o in 0..t_out {
                data[s * t_out + o] = pred.at2(s, o) * st.std + st.mean;
            }
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = Rng::seed(seed);
        (0..n)
            .map(|i| {
                let input: Vec<f64> = (0..2 * 2 * 4)
                    .map(|_| rng.uniform_in(-3.0, 5.0))
                    .collect();
                let target: Vec<f64> = (0..2 * 3).map(|_| rng.uniform_in(-3.0, 5.0)).collect();
                Sample {
                    input: Tensor::new(&[2, 2, 4], input).unwrap(),
                    target: Tensor::new(&[2, 3], target).unwrap(),
                    start_hour: i as i64,
                }
            })
            .collect()
    }

    #[test]
    fn standardized_train_split_has_zero_mean_unit_std() {
        let train = samples(20, 1);
        let z = Standardizer::fit(&train, 0).unwrap();
        for s in 0..2 {
            for f in 0..2 {
                let mut vals = Vec::new();
                for sample in &train {
                    let t = z.transform(sample).unwrap();
                    for ti in 0..4 {
                        vals.push(t.input.at3(s, f, ti));
                    }
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-10);
                assert!((var.sqrt() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_feature_is_centered_and_flagged() {
        let mut train = samples(5, 2);
        for sample in &mut train {
            for t in 0..4 {
                let idx = (0 * 2 + 1) * 4 + t;
                sample.input.data_mut()[idx] = 7.5;
            }
        }
        let z = Standardizer::fit(&train, 0).unwrap();
        assert_eq!(z.degenerate_slices(), vec![(0, 1)]);
        let out = z.transform(&train[0]).unwrap();
        for t in 0..4 {
            assert_eq!(out.input.at3(0, 1, t), 0.0);
        }
    }

    #[test]
    fn unstandardize_round_trips() {
        let train = samples(10, 3);
        let z = Standardizer::fit(&train, 0).unwrap();
        let transformed = z.transform(&train[4]).unwrap();
        let back = z.unstandardize_target(&transformed.target).unwrap();
        for (a, b) in back.data().iter().zip(train[4].target.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip() {
        let train = samples(5, 4);
        let z = Standardizer::fit(&train, 0).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        z.save(f.path()).unwrap();
        let back = Standardizer::load(f.path()).unwrap();
        assert_eq!(z, back);
    }
}

//! Sliding-window sample construction.

use super::panel::Panel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training sample: an `[S, F, T]` input window and the target
/// feature's following `t_out` hours per station.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
    /// Epoch hour of the first input step.
    pub start_hour: i64,
}

/// Builds samples at the given stride, ordered by window start. The
/// target window begins exactly one step after the input window ends.
pub fn build_windows(panel: &Panel, t_in: usize, t_out: usize, stride: usize) -> Result<Vec<Sample>> {
    if t_in == 0 || t_out == 0 || stride == 0 {
        return Err(Error::Config("t_in, t_out, and stride must be positive".into()));
    }
    let needed = t_in + t_out;
    if panel.len() < needed {
        return Err(Error::Data(format!(
            "panel of {} hours is shorter than one window of {needed} hours",
            panel.len()
        )));
    }
    let (s_n, f_n) = (panel.station_count(), panel.feature_count());
    let target_f = panel.target_index();
    let count = (panel.len() - needed) / stride + 1;
    let mut samples = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut input = vec![0.0; s_n * f_n * t_in];
        for s in 0..s_n {
            for f in 0..f_n {
                let series = panel.series(s, f);
                let dst = (s * f_n + f) * t_in;
                input[dst..dst + t_in].copy_from_slice(&series[start..start + t_in]);
            }
        }
        let mut target = vec![0.0; s_n * t_out];
        for s in 0..s_n {
            let series = panel.series(s, target_f);
            target[s * t_out..(s + 1) * t_out]
                .copy_from_slice(&series[start + t_in..start + t_in + t_out]);
        }
        samples.push(Sample {
            input: Tensor::new(&[s_n, f_n, t_in], input)?,
            target: Tensor::new(&[s_n, t_out], target)?,
            start_hour: panel.hour_at(start),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::{Feature, FeatureKind};

    fn panel(len: usize) -> Panel {
        let mut p = Panel::new(
            vec!["a".into(), "b".into()],
            vec![
                Feature { name: "y".into(), kind: FeatureKind::Target },
                Feature { name: "x".into(), kind: FeatureKind::Exogenous },
            ],
            100,
            len,
        )
        .unwrap();
        for s in 0..2 {
            for f in 0..2 {
                for t in 0..len {
                    p.set(s, f, t, (1000 * s + 100 * f + t) as f64);
                }
            }
        }
        p
    }

    #[test]
    fn exact_length_panel_yields_one_sample() {
        let samples = build_windows(&panel(10), 6, 4, 1).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].input.shape(), &[2, 2, 6]);
        assert_eq!(samples[0].target.shape(), &[2, 4]);
        assert_eq!(samples[0].start_hour, 100);
    }

    #[test]
    fn window_count_matches_enumeration() {
        // floor((200 - 144) / 24) + 1 = 3
        let samples = build_windows(&panel(200), 72, 72, 24).unwrap();
        assert_eq!(samples.len(), 3);
        // enumeration oracle: every start w*24 with w*24 + 144 <= 200
        let expected = (0..)
            .map(|w| w * 24)
            .take_while(|start| start + 144 <= 200)
            .count();
        assert_eq!(samples.len(), expected);
        // strictly ordered by start hour
        assert!(samples.windows(2).all(|p| p[0].start_hour < p[1].start_hour));
    }

    #[test]
    fn target_aligns_directly_after_input() {
        let samples = build_windows(&panel(20), 6, 4, 1).unwrap();
        let s0 = &samples[0];
        // target of station s equals the target-feature panel values
        // at hours t_in .. t_in + t_out - 1
        for s in 0..2 {
            for o in 0..4 {
                assert_eq!(s0.target.at2(s, o), (1000 * s + 6 + o) as f64);
            }
        }
        // and the input's last target-feature step is hour t_in - 1
        assert_eq!(s0.input.at3(0, 0, 5), 5.0);
    }

    #[test]
    fn too_short_panel_is_a_data_error() {
        assert!(matches!(
            build_windows(&panel(9), 6, 4, 1),
            Err(Error::Data(_))
        ));
    }
}

//! Displacement errors and best-of-K selection.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no present future step to score")]
    NothingToScore,
    #[error("prediction has {got} points, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error("best-of-K needs at least one sample")]
    NoSamples,
}

/// How minFDE is chosen across samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MinSelection {
    /// minADE and minFDE each take their own best sample.
    #[default]
    Independent,
    /// minFDE is read from the sample with the lowest ADE.
    Joint,
}

fn l2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// ADE over present `(agent, t)` slots and FDE over each agent's last
/// present step. `pred`, `gt` and `presence` are agent-major `[N * steps]`.
pub fn ade_fde(pred: &[[f64; 2]], gt: &[[f64; 2]], presence: &[bool], steps: usize) -> Result<(f64, f64), MetricError> {
    if pred.len() != gt.len() || presence.len() != gt.len() || steps == 0 || !gt.len().is_multiple_of(steps) {
        return Err(MetricError::Shape {
            got: pred.len(),
            expected: gt.len(),
        });
    }
    let (mut ade, mut count) = (0.0, 0usize);
    let (mut fde, mut agents) = (0.0, 0usize);
    for a in 0..gt.len() / steps {
        let mut last = None;
        for t in 0..steps {
            let k = a * steps + t;
            if presence[k] {
                ade += l2(pred[k], gt[k]);
                count += 1;
                last = Some(k);
            }
        }
        if let Some(k) = last {
            fde += l2(pred[k], gt[k]);
            agents += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::NothingToScore);
    }
    Ok((ade / count as f64, fde / agents as f64))
}

/// Best-of-K `(minADE, minFDE)` over `samples`.
pub fn best_of_k(
    samples: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
    presence: &[bool],
    steps: usize,
    selection: MinSelection,
) -> Result<(f64, f64), MetricError> {
    let scores = samples
        .iter()
        .map(|s| ade_fde(s, gt, presence, steps))
        .collect::<Result<Vec<_>, _>>()?;
    let first = *scores.first().ok_or(MetricError::NoSamples)?;
    Ok(match selection {
        MinSelection::Independent => scores
            .iter()
            .fold(first, |(a, f), &(sa, sf)| (a.min(sa), f.min(sf))),
        MinSelection::Joint => scores
            .iter()
            .fold(first, |best, &s| if s.0 < best.0 { s } else { best }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_offset() {
        let gt = vec![[0.0, 0.0], [1.0, 2.0], [3.0, -1.0], [4.0, 4.0]];
        let pres = vec![true; 4];
        assert_eq!(ade_fde(&gt, &gt, &pres, 2).unwrap(), (0.0, 0.0));
        let off: Vec<_> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert_eq!(ade_fde(&off, &gt, &pres, 2).unwrap(), (1.0, 1.0));
        assert_eq!(ade_fde(&gt, &gt, &[false; 4], 2), Err(MetricError::NothingToScore));
    }

    #[test]
    fn absent_last_step_uses_last_present() {
        let gt = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        let pred = vec![[0.0, 0.0], [1.0, 3.0], [9.0, 9.0]];
        let (ade, fde) = ade_fde(&pred, &gt, &[true, true, false], 3).unwrap();
        assert_eq!(ade, 1.5);
        assert_eq!(fde, 3.0);
    }

    #[test]
    fn selection_modes() {
        let gt = vec![[0.0, 0.0], [0.0, 0.0]];
        let pres = vec![true, true];
        // sample 0: good start, bad end; sample 1: worse ADE, perfect end
        let s0 = vec![[0.0, 0.0], [1.0, 0.0]];
        let s1 = vec![[3.0, 0.0], [0.0, 0.0]];
        let samples = vec![s0, s1];
        assert_eq!(best_of_k(&samples, &gt, &pres, 2, MinSelection::Independent).unwrap(), (0.5, 0.0));
        assert_eq!(best_of_k(&samples, &gt, &pres, 2, MinSelection::Joint).unwrap(), (0.5, 1.0));
        assert_eq!(best_of_k(&[], &gt, &pres, 2, MinSelection::Joint), Err(MetricError::NoSamples));
    }
}

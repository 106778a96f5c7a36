//! Best-of-K evaluation over windows.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::{constant_velocity, ground_truth_echo};
use crate::data::{normalize_window, TrajectoryWindow};
use crate::exec::Execution;
use crate::metrics::{best_of_k, MetricError, MinSelection};
use crate::model::{HyperSttn, ModelError, PreparedWindow};
use crate::rng::stream;

/// Anything that samples futures for a window given in its own frame.
pub trait Predictor: Sync {
    /// `k` samples, each agent-major `[N * T_o]`.
    fn predict(&self, w: &TrajectoryWindow, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<[f64; 2]>>, ModelError>;
}

impl Predictor for HyperSttn {
    fn predict(&self, w: &TrajectoryWindow, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<[f64; 2]>>, ModelError> {
        self.sample_futures(&PreparedWindow::new(w), k, rng)
    }
}

/// Deterministic constant-velocity extrapolation, repeated `k` times.
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn predict(&self, w: &TrajectoryWindow, k: usize, _: &mut ChaCha8Rng) -> Result<Vec<Vec<[f64; 2]>>, ModelError> {
        Ok(vec![constant_velocity(w); k])
    }
}

/// Returns the ground truth; scores zero by construction.
pub struct GroundTruthEcho;

impl Predictor for GroundTruthEcho {
    fn predict(&self, w: &TrajectoryWindow, k: usize, _: &mut ChaCha8Rng) -> Result<Vec<Vec<[f64; 2]>>, ModelError> {
        Ok(vec![ground_truth_echo(w); k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowMetrics {
    pub fold: String,
    pub window: usize,
    pub min_ade: f64,
    pub min_fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: String,
    pub windows: usize,
    pub min_ade: f64,
    pub min_fde: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub k: usize,
    pub seed: u64,
    pub selection: MinSelection,
    pub exec: Execution,
}

/// Scores every window with a future to compare against; windows whose
/// agents all leave before the prediction horizon are skipped.
pub fn evaluate(
    predictor: &dyn Predictor,
    windows: &[TrajectoryWindow],
    fold: &str,
    opts: EvalOptions,
) -> Result<Vec<WindowMetrics>, ModelError> {
    let results = opts.exec.map(windows.len(), |i| -> Result<Option<WindowMetrics>, ModelError> {
        let (w, _) = normalize_window(&windows[i]);
        let mut rng = stream(opts.seed, &[i as u64]);
        let samples = predictor.predict(&w, opts.k, &mut rng)?;
        let gt = ground_truth_echo(&w);
        let (obs, pred) = (w.horizon.obs, w.horizon.pred);
        let presence: Vec<bool> = (0..w.n_agents())
            .flat_map(|a| (obs..obs + pred).map(move |t| (a, t)))
            .map(|(a, t)| w.present(a, t))
            .collect();
        match best_of_k(&samples, &gt, &presence, pred, opts.selection) {
            Ok((min_ade, min_fde)) => Ok(Some(WindowMetrics {
                fold: fold.to_string(),
                window: i,
                min_ade,
                min_fde,
            })),
            Err(MetricError::NothingToScore) => Ok(None),
            Err(e) => Err(ModelError::Config(e.to_string())),
        }
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn summarize(fold: &str, metrics: &[WindowMetrics]) -> FoldSummary {
    let n = metrics.len().max(1) as f64;
    FoldSummary {
        fold: fold.to_string(),
        windows: metrics.len(),
        min_ade: metrics.iter().map(|m| m.min_ade).sum::<f64>() / n,
        min_fde: metrics.iter().map(|m| m.min_fde).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate_with, window_scene, Horizon, SynthConfig, SynthMix};

    fn opts(k: usize) -> EvalOptions {
        EvalOptions {
            k,
            seed: 0,
            selection: MinSelection::Independent,
            exec: Execution::Parallel,
        }
    }

    #[test]
    fn oracle_and_constant_velocity() {
        let cfg = SynthConfig {
            seed: 2,
            n_scenes: 1,
            mix: SynthMix::ConstantVelocity,
            ..SynthConfig::default()
        };
        let scenes = synth_generate_with(&cfg).unwrap();
        let ws = window_scene(&scenes[0].scene, Horizon::default(), 5);
        assert!(!ws.is_empty());
        let echo = evaluate(&GroundTruthEcho, &ws, "s", opts(3)).unwrap();
        assert!(echo.iter().all(|m| m.min_ade == 0.0 && m.min_fde == 0.0));
        let cv = summarize("s", &evaluate(&ConstantVelocity, &ws, "s", opts(1)).unwrap());
        assert!(cv.min_ade < 1e-6, "{cv:?}");
    }
}

//! Metric files and the run report.

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::eval::{FoldSummary, WindowMetrics};
use crate::train::EpochRecord;

/// One JSON object per window: `{"fold", "window", "minADE<k>", "minFDE<k>"}`.
pub fn metrics_jsonl(metrics: &[WindowMetrics], k: usize) -> String {
    let mut out = String::new();
    for m in metrics {
        let mut obj = Map::new();
        obj.insert("fold".into(), json!(m.fold));
        obj.insert("window".into(), json!(m.window));
        obj.insert(format!("minADE{k}"), json!(m.min_ade));
        obj.insert(format!("minFDE{k}"), json!(m.min_fde));
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

/// `fold,minADE_<k>,minFDE_<k>` table.
pub fn summary_csv(folds: &[FoldSummary], k: usize) -> String {
    let mut out = format!("fold,minADE_{k},minFDE_{k}\n");
    for f in folds {
        out.push_str(&format!("{},{},{}\n", f.fold, f.min_ade, f.min_fde));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: String,
    pub epochs: Vec<EpochRecord>,
    pub folds: Vec<FoldSummary>,
    pub best_epoch: Option<usize>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_and_csv_layout() {
        let m = vec![WindowMetrics {
            fold: "eth".into(),
            window: 3,
            min_ade: 0.5,
            min_fde: 1.25,
        }];
        let line = metrics_jsonl(&m, 20);
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["fold"], "eth");
        assert_eq!(v["window"], 3);
        assert_eq!(v["minADE20"], 0.5);
        assert_eq!(v["minFDE20"], 1.25);
        let s = vec![FoldSummary {
            fold: "eth".into(),
            windows: 1,
            min_ade: 0.5,
            min_fde: 1.25,
        }];
        assert_eq!(summary_csv(&s, 20), "fold,minADE_20,minFDE_20\neth,0.5,1.25\n");
    }
}

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::DataError;

/// One row of a frame file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

/// All observations of one recording, sorted by `(frame, agent)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rows: Vec<Observation>,
    /// Seconds between consecutive frame ids. Metadata only.
    pub frame_interval: f64,
}

pub const DEFAULT_FRAME_INTERVAL: f64 = 0.4;

impl Scene {
    /// Sorts rows and rejects duplicate `(frame, agent)` pairs and
    /// non-finite positions.
    pub fn from_rows(mut rows: Vec<Observation>, frame_interval: f64) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyScene);
        }
        if let Some(r) = rows.iter().find(|r| !r.x.is_finite() || !r.y.is_finite()) {
            return Err(DataError::Invalid(format!(
                "non-finite position for agent {} at frame {}",
                r.agent, r.frame
            )));
        }
        rows.sort_by_key(|r| (r.frame, r.agent));
        if let Some(w) = rows.windows(2).find(|w| (w[0].frame, w[0].agent) == (w[1].frame, w[1].agent)) {
            return Err(DataError::Invalid(format!(
                "duplicate row for agent {} at frame {}",
                w[0].agent, w[0].frame
            )));
        }
        Ok(Self { rows, frame_interval })
    }

    /// Distinct frame ids in ascending order.
    pub fn frame_ids(&self) -> Vec<i64> {
        let mut f: Vec<i64> = self.rows.iter().map(|r| r.frame).collect();
        f.dedup();
        f
    }

    pub fn agent_ids(&self) -> Vec<i64> {
        let mut a: Vec<i64> = self.rows.iter().map(|r| r.agent).collect();
        a.sort_unstable();
        a.dedup();
        a
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| Observation { x: r.x + dx, y: r.y + dy, ..*r })
                .collect(),
            frame_interval: self.frame_interval,
        }
    }
}

/// Parses whitespace-separated `frame agent x y` rows. Extra columns are
/// ignored; blank lines are skipped. Frame and agent ids may be written as
/// integral floats (`10.0`), as in the public distribution files.
pub fn parse_scene_str(text: &str) -> Result<Scene, DataError> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() < 4 {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected at least 4 columns, found {}", cols.len()),
            });
        }
        let id = |s: &str, what: &str| -> Result<i64, DataError> {
            let v: f64 = s.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("bad {what} '{s}'"),
            })?;
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("{what} '{s}' is not an integer"),
                });
            }
            Ok(v as i64)
        };
        let coord = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line: line_no,
                    msg: format!("bad coordinate '{s}'"),
                })
        };
        let obs = Observation {
            frame: id(cols[0], "frame id")?,
            agent: id(cols[1], "agent id")?,
            x: coord(cols[2])?,
            y: coord(cols[3])?,
        };
        if !seen.insert((obs.frame, obs.agent)) {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("duplicate row for agent {} at frame {}", obs.agent, obs.frame),
            });
        }
        rows.push(obs);
    }
    Scene::from_rows(rows, DEFAULT_FRAME_INTERVAL)
}

pub fn parse_scene(path: &Path) -> Result<Scene, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_scene_str(&text)
}

/// Writes rows with shortest round-trip float formatting.
pub fn write_scene_string(scene: &Scene) -> String {
    let mut out = String::new();
    for r in &scene.rows {
        writeln!(out, "{} {} {} {}", r.frame, r.agent, r.x, r.y).expect("string write");
    }
    out
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, write_scene_string(scene))?;
    Ok(())
}

use std::collections::HashMap;

use super::{DataError, Scene};
use crate::checkpoint::Archive;
use crate::tensor::Tensor;

/// Observation / prediction horizon lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Horizon {
    pub obs: usize,
    pub pred: usize,
}

impl Default for Horizon {
    fn default() -> Self {
        Self { obs: 8, pred: 12 }
    }
}

impl Horizon {
    pub fn total(&self) -> usize {
        self.obs + self.pred
    }
}

/// Minimum number of present observed steps for an agent to be kept.
pub const MIN_OBSERVED: usize = 2;

/// `N` agents over `obs + pred` consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub horizon: Horizon,
    /// `[N * total]` positions in meters, agent-major.
    pub positions: Vec<[f64; 2]>,
    pub presence: Vec<bool>,
    pub agent_ids: Vec<i64>,
    pub origin_frame: i64,
}

impl TrajectoryWindow {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn len(&self) -> usize {
        self.horizon.total()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_ids.is_empty()
    }

    pub fn pos(&self, agent: usize, t: usize) -> [f64; 2] {
        self.positions[agent * self.len() + t]
    }

    pub fn present(&self, agent: usize, t: usize) -> bool {
        self.presence[agent * self.len() + t]
    }

    pub fn observed_count(&self, agent: usize) -> usize {
        (0..self.horizon.obs).filter(|&t| self.present(agent, t)).count()
    }

    /// Last present observed step of `agent`.
    pub fn last_observed(&self, agent: usize) -> Option<usize> {
        (0..self.horizon.obs).rev().find(|&t| self.present(agent, t))
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.n_agents();
        let len = self.len();
        if self.positions.len() != n * len || self.presence.len() != n * len {
            return Err(DataError::Invalid("buffer sizes disagree with agent count".into()));
        }
        for a in 0..n {
            if self.observed_count(a) < MIN_OBSERVED {
                return Err(DataError::Invalid(format!(
                    "agent {} has fewer than {MIN_OBSERVED} observed steps",
                    self.agent_ids[a]
                )));
            }
            for t in 0..len {
                let p = self.pos(a, t);
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(DataError::Invalid("non-finite position".into()));
                }
                if !self.present(a, t) && p != [0.0, 0.0] {
                    return Err(DataError::Invalid("absent slot holds a nonzero position".into()));
                }
            }
        }
        Ok(())
    }

    /// Restricts the window to the given agent indices, in that order.
    pub fn select_agents(&self, agents: &[usize]) -> Self {
        let len = self.len();
        let mut positions = Vec::with_capacity(agents.len() * len);
        let mut presence = Vec::with_capacity(agents.len() * len);
        for &a in agents {
            positions.extend_from_slice(&self.positions[a * len..(a + 1) * len]);
            presence.extend_from_slice(&self.presence[a * len..(a + 1) * len]);
        }
        Self {
            horizon: self.horizon,
            positions,
            presence,
            agent_ids: agents.iter().map(|&a| self.agent_ids[a]).collect(),
            origin_frame: self.origin_frame,
        }
    }

    /// Applies `f` to every present position.
    pub fn map_present(&self, mut f: impl FnMut(usize, usize, [f64; 2]) -> [f64; 2]) -> Self {
        let mut out = self.clone();
        let len = self.len();
        for a in 0..self.n_agents() {
            for t in 0..len {
                if self.present(a, t) {
                    out.positions[a * len + t] = f(a, t, self.pos(a, t));
                }
            }
        }
        out
    }
}

/// Cuts sliding windows of `obs + pred` consecutive distinct frame ids.
pub fn window_scene(scene: &Scene, horizon: Horizon, stride: usize) -> Vec<TrajectoryWindow> {
    assert!(stride > 0, "stride must be positive");
    let frames = scene.frame_ids();
    let total = horizon.total();
    if frames.len() < total {
        return Vec::new();
    }
    let frame_index: HashMap<i64, usize> = frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    // rows are sorted by frame, so each frame occupies a contiguous run
    let mut frame_start = Vec::with_capacity(frames.len() + 1);
    for (ri, r) in scene.rows.iter().enumerate() {
        if ri == 0 || r.frame != scene.rows[ri - 1].frame {
            frame_start.push(ri);
        }
    }
    frame_start.push(scene.rows.len());

    let mut out = Vec::new();
    let mut start = 0;
    while start + total <= frames.len() {
        let rows = &scene.rows[frame_start[start]..frame_start[start + total]];
        let mut ids: Vec<i64> = rows.iter().map(|r| r.agent).collect();
        ids.sort_unstable();
        ids.dedup();
        let slot: HashMap<i64, usize> = ids.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let mut positions = vec![[0.0; 2]; ids.len() * total];
        let mut presence = vec![false; ids.len() * total];
        for r in rows {
            let t = frame_index[&r.frame] - start;
            let k = slot[&r.agent] * total + t;
            positions[k] = [r.x, r.y];
            presence[k] = true;
        }
        let w = TrajectoryWindow {
            horizon,
            positions,
            presence,
            agent_ids: ids,
            origin_frame: frames[start],
        };
        let keep: Vec<usize> = (0..w.n_agents())
            .filter(|&a| w.observed_count(a) >= MIN_OBSERVED)
            .collect();
        if !keep.is_empty() {
            out.push(w.select_agents(&keep));
        }
        start += stride;
    }
    out
}

/// Translates the window so the centroid of positions at the last observed
/// frame is the origin. Returns the subtracted offset.
pub fn normalize_window(w: &TrajectoryWindow) -> (TrajectoryWindow, [f64; 2]) {
    let t0 = w.horizon.obs - 1;
    let mut pts: Vec<[f64; 2]> = (0..w.n_agents())
        .filter(|&a| w.present(a, t0))
        .map(|a| w.pos(a, t0))
        .collect();
    if pts.is_empty() {
        pts = (0..w.n_agents())
            .filter_map(|a| w.last_observed(a).map(|t| w.pos(a, t)))
            .collect();
    }
    let n = pts.len().max(1) as f64;
    let offset = [
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let shifted = w.map_present(|_, _, p| [p[0] - offset[0], p[1] - offset[1]]);
    (shifted, offset)
}

pub fn denormalize_window(w: &TrajectoryWindow, offset: [f64; 2]) -> TrajectoryWindow {
    w.map_present(|_, _, p| [p[0] + offset[0], p[1] + offset[1]])
}

/// Stores windows as `window/<i>/positions` (`[N, L, 2]`) and
/// `window/<i>/presence` (`[N, L]`, 0/1) archive records.
pub fn windows_to_archive(windows: &[TrajectoryWindow]) -> Archive {
    let mut a = Archive::new();
    for (i, w) in windows.iter().enumerate() {
        let n = w.n_agents();
        let len = w.len();
        let pos = Tensor::new(vec![n, len, 2], w.positions.iter().flatten().copied().collect())
            .expect("window buffers are consistent");
        let pres = Tensor::new(vec![n, len], w.presence.iter().map(|&p| f64::from(u8::from(p))).collect())
            .expect("window buffers are consistent");
        a.push(format!("window/{i}/positions"), pos);
        a.push(format!("window/{i}/presence"), pres);
    }
    a
}

/// Inverse of [`windows_to_archive`]. Agent ids and origin frames are not
/// stored and come back as indices and zero.
pub fn windows_from_archive(a: &Archive, horizon: Horizon) -> Result<Vec<TrajectoryWindow>, DataError> {
    let mut out = Vec::new();
    for i in 0.. {
        let (Some(pos), Some(pres)) = (
            a.get(&format!("window/{i}/positions")),
            a.get(&format!("window/{i}/presence")),
        ) else {
            break;
        };
        let s = pos.shape();
        if s.len() != 3 || s[1] != horizon.total() || s[2] != 2 || pres.shape() != [s[0], s[1]] {
            return Err(DataError::Invalid(format!("window {i} has shape {s:?}")));
        }
        let w = TrajectoryWindow {
            horizon,
            positions: pos.data().chunks(2).map(|c| [c[0], c[1]]).collect(),
            presence: pres.data().iter().map(|&v| v != 0.0).collect(),
            agent_ids: (0..s[0] as i64).collect(),
            origin_frame: 0,
        };
        w.validate()?;
        out.push(w);
    }
    Ok(out)
}

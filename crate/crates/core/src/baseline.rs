//! Reference predictors.

use crate::data::TrajectoryWindow;

/// Extrapolates each agent's last observed velocity. The velocity comes from
/// the two latest present observed steps; agents seen once stay put.
pub fn constant_velocity(w: &TrajectoryWindow) -> Vec<[f64; 2]> {
    let (obs, pred) = (w.horizon.obs, w.horizon.pred);
    let mut out = Vec::with_capacity(w.n_agents() * pred);
    for a in 0..w.n_agents() {
        let mut seen = (0..obs).rev().filter(|&t| w.present(a, t));
        let last = seen.next();
        let prev = seen.next();
        let (anchor, t_last, vel) = match (last, prev) {
            (Some(l), Some(p)) => {
                let (pl, pp) = (w.pos(a, l), w.pos(a, p));
                let gap = (l - p) as f64;
                (pl, l, [(pl[0] - pp[0]) / gap, (pl[1] - pp[1]) / gap])
            }
            (Some(l), None) => (w.pos(a, l), l, [0.0, 0.0]),
            _ => ([0.0, 0.0], obs - 1, [0.0, 0.0]),
        };
        for t in obs..obs + pred {
            let dt = (t - t_last) as f64;
            out.push([anchor[0] + vel[0] * dt, anchor[1] + vel[1] * dt]);
        }
    }
    out
}

/// Returns the window's own future.
pub fn ground_truth_echo(w: &TrajectoryWindow) -> Vec<[f64; 2]> {
    let (obs, pred) = (w.horizon.obs, w.horizon.pred);
    (0..w.n_agents())
        .flat_map(|a| (obs..obs + pred).map(move |t| w.pos(a, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Horizon;

    fn window(track: impl Fn(usize) -> Option<[f64; 2]>) -> TrajectoryWindow {
        let h = Horizon { obs: 3, pred: 2 };
        let mut positions = Vec::new();
        let mut presence = Vec::new();
        for t in 0..5 {
            let p = track(t);
            presence.push(p.is_some());
            positions.push(p.unwrap_or([0.0, 0.0]));
        }
        TrajectoryWindow {
            horizon: h,
            positions,
            presence,
            agent_ids: vec![1],
            origin_frame: 0,
        }
    }

    #[test]
    fn continues_unit_velocity() {
        let w = window(|t| Some([t as f64, 0.0]));
        assert_eq!(constant_velocity(&w), vec![[3.0, 0.0], [4.0, 0.0]]);
    }

    #[test]
    fn static_and_single_point() {
        let w = window(|_| Some([2.0, -1.0]));
        assert_eq!(constant_velocity(&w), vec![[2.0, -1.0]; 2]);
        let w = window(|t| (t == 1).then_some([5.0, 5.0]));
        assert_eq!(constant_velocity(&w), vec![[5.0, 5.0]; 2]);
    }

    #[test]
    fn gap_in_observations() {
        let w = window(|t| (t != 1).then_some([2.0 * t as f64, 0.0]));
        assert_eq!(constant_velocity(&w), vec![[6.0, 0.0], [8.0, 0.0]]);
    }
}

//! Synthetic crowd scenes for desk-scale training.
//!
//! Three kinds of agents share a square arena: exact constant-velocity
//! walkers, goal-seeking walkers that repel each other (a simple social
//! force), and small groups that move as a unit around a shared goal with
//! per-frame positional jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{Observation, Scene, DEFAULT_FRAME_INTERVAL};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMix {
    /// Constant-velocity walkers, repelling walkers and groups.
    Interacting,
    /// Constant-velocity walkers only.
    ConstantVelocity,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub agents_range: (usize, usize),
    pub n_frames: usize,
    pub frame_interval: f64,
    pub arena: f64,
    pub mix: SynthMix,
    /// Maximum member offset from the group centre, meters.
    pub group_radius: f64,
    /// Per-coordinate uniform jitter amplitude for group members, meters.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 8,
            agents_range: (3, 8),
            n_frames: 40,
            frame_interval: DEFAULT_FRAME_INTERVAL,
            arena: 20.0,
            mix: SynthMix::Interacting,
            group_radius: 1.0,
            jitter: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    ConstantVelocity,
    Avoiding,
    /// Member of the group with this index.
    Group(usize),
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub scene: Scene,
    /// Kind of agent `i + 1` (agent ids start at 1).
    pub kinds: Vec<AgentKind>,
}

const RELAX_TIME: f64 = 0.5;
const REPULSION_STRENGTH: f64 = 2.0;
const REPULSION_RANGE: f64 = 0.6;

struct Mover {
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    speed: f64,
    active_from: usize,
    /// Group index when this mover is a group centre.
    group: Option<usize>,
}

enum Track {
    Linear { start: [f64; 2], vel: [f64; 2] },
    Mover(usize),
    Member { mover: usize, offset: [f64; 2] },
}

fn random_point(rng: &mut ChaCha8Rng, arena: f64, margin: f64) -> [f64; 2] {
    [
        rng.random_range(margin..arena - margin),
        rng.random_range(margin..arena - margin),
    ]
}

fn far_goal(rng: &mut ChaCha8Rng, from: [f64; 2], arena: f64, margin: f64) -> [f64; 2] {
    let mut best = random_point(rng, arena, margin);
    for _ in 0..16 {
        let g = random_point(rng, arena, margin);
        if dist(g, from) >= 0.4 * arena {
            return g;
        }
        if dist(g, from) > dist(best, from) {
            best = g;
        }
    }
    best
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn synth_generate(seed: u64, n_scenes: usize, agents_range: (usize, usize)) -> Result<Vec<Scene>, DataError> {
    let cfg = SynthConfig { seed, n_scenes, agents_range, ..SynthConfig::default() };
    Ok(synth_generate_with(&cfg)?.into_iter().map(|s| s.scene).collect())
}

pub fn synth_generate_with(cfg: &SynthConfig) -> Result<Vec<SynthScene>, DataError> {
    let (lo, hi) = cfg.agents_range;
    if lo < 2 || hi > 16 || lo > hi {
        return Err(DataError::Invalid(format!(
            "agents_range ({lo}, {hi}) must lie within [2, 16]"
        )));
    }
    if cfg.n_frames < 20 {
        return Err(DataError::Invalid("synthetic scenes need at least 20 frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_scenes).map(|_| generate_scene(cfg, &mut rng)).collect()
}

fn generate_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthScene, DataError> {
    let n_agents = rng.random_range(cfg.agents_range.0..=cfg.agents_range.1);
    let dt = cfg.frame_interval;
    let margin = cfg.group_radius + cfg.jitter + 0.5;
    let duration = (cfg.n_frames - 1) as f64 * dt;

    let mut tracks = Vec::with_capacity(n_agents);
    let mut kinds = Vec::with_capacity(n_agents);
    let mut movers: Vec<Mover> = Vec::new();
    let mut n_groups = 0;

    let new_mover = |rng: &mut ChaCha8Rng, group: Option<usize>, active_from: usize| {
        let pos = random_point(rng, cfg.arena, margin);
        let goal = far_goal(rng, pos, cfg.arena, margin);
        let speed = rng.random_range(1.0..1.4);
        let d = dist(goal, pos).max(1e-9);
        Mover {
            pos,
            vel: [(goal[0] - pos[0]) / d * speed, (goal[1] - pos[1]) / d * speed],
            goal,
            speed,
            active_from,
            group,
        }
    };

    while tracks.len() < n_agents {
        let remaining = n_agents - tracks.len();
        let roll: f64 = rng.random();
        let kind = match cfg.mix {
            SynthMix::ConstantVelocity => 0,
            SynthMix::Interacting if roll < 0.3 => 0,
            SynthMix::Interacting if roll < 0.65 || remaining < 2 => 1,
            SynthMix::Interacting => 2,
        };
        match kind {
            0 => {
                let start = random_point(rng, cfg.arena, 0.5);
                let end = random_point(rng, cfg.arena, 0.5);
                let vel = [(end[0] - start[0]) / duration, (end[1] - start[1]) / duration];
                tracks.push(Track::Linear { start, vel });
                kinds.push(AgentKind::ConstantVelocity);
            }
            1 => {
                let active_from = if rng.random_bool(0.3) {
                    rng.random_range(1..=cfg.n_frames / 4)
                } else {
                    0
                };
                movers.push(new_mover(rng, None, active_from));
                tracks.push(Track::Mover(movers.len() - 1));
                kinds.push(AgentKind::Avoiding);
            }
            _ => {
                let size = rng.random_range(2..=remaining.min(4));
                let g = n_groups;
                n_groups += 1;
                movers.push(new_mover(rng, Some(g), 0));
                let m = movers.len() - 1;
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                for k in 0..size {
                    let r = rng.random_range(0.6..=cfg.group_radius.max(0.6));
                    let a = phase + std::f64::consts::TAU * k as f64 / size as f64;
                    tracks.push(Track::Member { mover: m, offset: [r * a.cos(), r * a.sin()] });
                    kinds.push(AgentKind::Group(g));
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(n_agents * cfg.n_frames);
    let mut current = vec![[0.0; 2]; n_agents];
    let mut active = vec![false; n_agents];
    for frame in 0..cfg.n_frames {
        let t = frame as f64 * dt;
        for (i, tr) in tracks.iter().enumerate() {
            let (p, on) = match *tr {
                Track::Linear { start, vel } => ([start[0] + vel[0] * t, start[1] + vel[1] * t], true),
                Track::Mover(m) => (movers[m].pos, frame >= movers[m].active_from),
                Track::Member { mover, offset } => {
                    let c = movers[mover].pos;
                    let jx = rng.random_range(-cfg.jitter..=cfg.jitter);
                    let jy = rng.random_range(-cfg.jitter..=cfg.jitter);
                    ([c[0] + offset[0] + jx, c[1] + offset[1] + jy], true)
                }
            };
            current[i] = p;
            active[i] = on;
            if on {
                rows.push(Observation {
                    frame: frame as i64 * 10,
                    agent: i as i64 + 1,
                    x: p[0],
                    y: p[1],
                });
            }
        }

        // advance movers with the social force from every other active agent
        for m in 0..movers.len() {
            if frame < movers[m].active_from {
                continue;
            }
            let mv = &movers[m];
            let to_goal = [mv.goal[0] - mv.pos[0], mv.goal[1] - mv.pos[1]];
            let dg = dist(mv.goal, mv.pos).max(1e-9);
            let mut f = [
                (to_goal[0] / dg * mv.speed - mv.vel[0]) / RELAX_TIME,
                (to_goal[1] / dg * mv.speed - mv.vel[1]) / RELAX_TIME,
            ];
            for (i, tr) in tracks.iter().enumerate() {
                if !active[i] {
                    continue;
                }
                let own = match *tr {
                    Track::Mover(k) => k == m,
                    Track::Member { mover, .. } => mover == m,
                    Track::Linear { .. } => false,
                };
                if own {
                    continue;
                }
                let d = dist(mv.pos, current[i]).max(1e-6);
                let mag = REPULSION_STRENGTH * (-d / REPULSION_RANGE).exp();
                f[0] += mag * (mv.pos[0] - current[i][0]) / d;
                f[1] += mag * (mv.pos[1] - current[i][1]) / d;
            }
            let limit = 1.3 * mv.speed;
            let mv = &mut movers[m];
            mv.vel[0] += f[0] * dt;
            mv.vel[1] += f[1] * dt;
            let sp = (mv.vel[0].powi(2) + mv.vel[1].powi(2)).sqrt();
            if sp > limit {
                mv.vel[0] *= limit / sp;
                mv.vel[1] *= limit / sp;
            }
            let lo = if mv.group.is_some() { margin } else { 0.0 };
            mv.pos[0] = (mv.pos[0] + mv.vel[0] * dt).clamp(lo, cfg.arena - lo);
            mv.pos[1] = (mv.pos[1] + mv.vel[1] * dt).clamp(lo, cfg.arena - lo);
            if dist(mv.pos, mv.goal) < 1.0 {
                mv.goal = far_goal(rng, mv.pos, cfg.arena, margin);
            }
        }
    }
    let scene = Scene::from_rows(rows, dt)?;
    Ok(SynthScene { scene, kinds })
}

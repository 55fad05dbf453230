//! Trajectory file parsing, train/test splitting, and the synthetic
//! multi-domain generator.
//!
//! The canonical text format is one record per line, `frame_id agent_id x y`
//! separated by whitespace, with `#`-prefixed comment lines and blank lines
//! ignored. The synthetic generator produces several domains whose motion
//! statistics differ in controlled ways (speed, turning, interaction
//! density), which is what the cross-domain experiments train and test on.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::traj::{Record, SceneTable, DEFAULT_FRAME_INTERVAL};

/// Where a dataset comes from and how to interpret it.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub name: String,
    /// Meters per raw coordinate unit (datasets ship in pixels or meters).
    pub unit_scale: f64,
    /// Fraction of agents assigned to the train split.
    pub split_ratio: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unit_scale <= 0.0 || !self.unit_scale.is_finite() {
            return Err(Error::Config(format!(
                "unit_scale must be positive, got {}",
                self.unit_scale
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must be in (0, 1), got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Parameters of one synthetic domain. Motion is goal-directed with per-step
/// heading noise and a steering repulsion from nearby agents; the recorded
/// positions add measurement noise on top of the clean dynamics.
#[derive(Clone, Debug)]
pub struct SynthDomainConfig {
    pub n_agents: usize,
    pub n_frames: usize,
    /// Mean walking speed in m/s; per-agent speeds are drawn once.
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Std of the per-step heading perturbation, radians.
    pub turn_rate_std: f64,
    /// Neighbors inside this radius push on the steering direction.
    pub repulsion_radius: f64,
    /// Std of the positional measurement noise, meters.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthDomainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 {
            return Err(Error::Config("n_agents must be at least 1".into()));
        }
        for (name, v) in [
            ("speed_std", self.speed_std),
            ("turn_rate_std", self.turn_rate_std),
            ("repulsion_radius", self.repulsion_radius),
            ("noise_std", self.noise_std),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if !self.speed_mean.is_finite() || self.speed_mean < 0.0 {
            return Err(Error::Config(format!(
                "speed_mean must be ≥ 0, got {}",
                self.speed_mean
            )));
        }
        Ok(())
    }
}

/// Parses the canonical trajectory text format. Coordinates are multiplied
/// by `unit_scale`. Line numbers in errors count every line, 1-based.
pub fn parse_trajectory_file(reader: impl BufRead, unit_scale: f64) -> Result<SceneTable> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields (frame agent x y), got {}", fields.len()),
            });
        }
        let frame_id: i64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad frame id '{}'", fields[0]),
        })?;
        let agent_id: i64 = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad agent id '{}'", fields[1]),
        })?;
        let x: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad x coordinate '{}'", fields[2]),
        })?;
        let y: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad y coordinate '{}'", fields[3]),
        })?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-finite coordinate".into(),
            });
        }
        records.push(Record {
            frame_id,
            agent_id,
            x: x * unit_scale,
            y: y * unit_scale,
        });
    }
    SceneTable::new(records, DEFAULT_FRAME_INTERVAL)
}

/// Reads and parses the file named by the config.
pub fn load_dataset(config: &DatasetConfig) -> Result<SceneTable> {
    config.validate()?;
    let file = File::open(&config.path).map_err(|e| {
        Error::Config(format!("cannot open '{}': {e}", config.path.display()))
    })?;
    parse_trajectory_file(BufReader::new(file), config.unit_scale)
}

/// Renders a table in the canonical text format. Floats print in Rust's
/// shortest round-trip form, so `parse(serialize(t)) == t`.
pub fn serialize_scene(table: &SceneTable) -> String {
    let mut out = String::new();
    for r in table.records() {
        out.push_str(&format!("{} {} {} {}\n", r.frame_id, r.agent_id, r.x, r.y));
    }
    out
}

pub fn write_scene(table: &SceneTable, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_scene(table))?;
    Ok(())
}

/// Splits agents (not records) into train/test so no agent's trajectory
/// leaks across the boundary. Deterministic for a given seed.
pub fn split_train_test(
    table: &SceneTable,
    split_ratio: f64,
    seed: u64,
) -> Result<(SceneTable, SceneTable)> {
    let agents = table.agent_ids();
    if agents.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 agents to split, got {}",
            agents.len()
        )));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Split(format!(
            "split ratio must be in (0, 1), got {split_ratio}"
        )));
    }
    let mut shuffled = agents.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the sorted id list.
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    let n_train = ((agents.len() as f64 * split_ratio).round() as usize)
        .clamp(1, agents.len() - 1);
    let train_ids: std::collections::BTreeSet<i64> =
        shuffled[..n_train].iter().copied().collect();

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in table.records() {
        if train_ids.contains(&r.agent_id) {
            train.push(*r);
        } else {
            test.push(*r);
        }
    }
    Ok((
        SceneTable::new(train, table.frame_interval())?,
        SceneTable::new(test, table.frame_interval())?,
    ))
}

// Arena the synthetic agents wander in, meters.
const ARENA: f64 = 20.0;
// Reaching within this distance of the goal samples a fresh goal.
const GOAL_RADIUS: f64 = 0.5;

/// One standard-normal draw via Box-Muller.
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Generates one synthetic domain.
///
/// Dynamics: each agent walks toward a random goal at its own constant
/// speed; the steering direction is the goal direction plus a repulsion term
/// from neighbors inside `repulsion_radius`, rotated by Gaussian heading
/// noise. Arriving at a goal samples a new one. Recorded positions are the
/// clean dynamics plus `noise_std`-scaled Gaussian measurement noise.
///
/// Two independent RNG streams share the seed: one drives the dynamics, one
/// the measurement noise. Varying `noise_std` therefore perturbs the exact
/// same clean paths, which keeps noise-level comparisons paired.
pub fn synth_domain(config: &SynthDomainConfig) -> Result<SceneTable> {
    config.validate()?;
    let dt = DEFAULT_FRAME_INTERVAL;
    let mut dyn_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);

    struct Agent {
        pos: [f64; 2],
        goal: [f64; 2],
        speed: f64,
        heading: f64,
    }

    let mut agents: Vec<Agent> = (0..config.n_agents)
        .map(|_| {
            let pos = [
                dyn_rng.gen_range(0.0..ARENA),
                dyn_rng.gen_range(0.0..ARENA),
            ];
            let goal = [
                dyn_rng.gen_range(0.0..ARENA),
                dyn_rng.gen_range(0.0..ARENA),
            ];
            let speed = (config.speed_mean + config.speed_std * gauss(&mut dyn_rng)).max(0.0);
            Agent {
                pos,
                goal,
                speed,
                heading: (goal[1] - pos[1]).atan2(goal[0] - pos[0]),
            }
        })
        .collect();

    let mut records = Vec::with_capacity(config.n_agents * config.n_frames);
    for frame in 0..config.n_frames {
        // Record first, then advance: frame 0 shows the initial layout.
        for (id, a) in agents.iter().enumerate() {
            let nx = a.pos[0] + config.noise_std * gauss(&mut noise_rng);
            let ny = a.pos[1] + config.noise_std * gauss(&mut noise_rng);
            records.push(Record {
                frame_id: frame as i64,
                agent_id: id as i64,
                x: nx,
                y: ny,
            });
        }

        let positions: Vec<[f64; 2]> = agents.iter().map(|a| a.pos).collect();
        for (id, a) in agents.iter_mut().enumerate() {
            if a.speed == 0.0 {
                continue;
            }
            let to_goal = [a.goal[0] - a.pos[0], a.goal[1] - a.pos[1]];
            if (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt() < GOAL_RADIUS {
                a.goal = [
                    dyn_rng.gen_range(0.0..ARENA),
                    dyn_rng.gen_range(0.0..ARENA),
                ];
            }
            let to_goal = [a.goal[0] - a.pos[0], a.goal[1] - a.pos[1]];
            let goal_norm = (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt().max(1e-9);

            // Repulsion steers but never displaces: it only biases the unit
            // direction, so a zero-speed agent stays put by construction.
            let mut steer = [to_goal[0] / goal_norm, to_goal[1] / goal_norm];
            for (other_id, other) in positions.iter().enumerate() {
                if other_id == id {
                    continue;
                }
                let d = [a.pos[0] - other[0], a.pos[1] - other[1]];
                let dist = (d[0].powi(2) + d[1].powi(2)).sqrt();
                if dist < config.repulsion_radius && dist > 1e-9 {
                    let push = 1.0 - dist / config.repulsion_radius;
                    steer[0] += d[0] / dist * push * 1.5;
                    steer[1] += d[1] / dist * push * 1.5;
                }
            }
            let base = steer[1].atan2(steer[0]);
            a.heading = base + config.turn_rate_std * gauss(&mut dyn_rng);
            a.pos[0] += a.speed * dt * a.heading.cos();
            a.pos[1] += a.speed * dt * a.heading.sin();
        }
    }
    SceneTable::new(records, dt)
}

/// Mean per-step displacement of the recorded paths, averaged over agents.
pub fn mean_step_displacement(table: &SceneTable) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for agent in table.agent_ids() {
        let path: Vec<[f64; 2]> = table
            .records()
            .iter()
            .filter(|r| r.agent_id == agent)
            .map(|r| [r.x, r.y])
            .collect();
        for pair in path.windows(2) {
            total += ((pair[1][0] - pair[0][0]).powi(2) + (pair[1][1] - pair[0][1]).powi(2)).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean tortuosity (path length over net displacement) across agents.
/// Straight paths score 1; jitter drives the score up.
pub fn mean_tortuosity(table: &SceneTable) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for agent in table.agent_ids() {
        let path: Vec<[f64; 2]> = table
            .records()
            .iter()
            .filter(|r| r.agent_id == agent)
            .map(|r| [r.x, r.y])
            .collect();
        if path.len() < 2 {
            continue;
        }
        let mut len = 0.0;
        for pair in path.windows(2) {
            len += ((pair[1][0] - pair[0][0]).powi(2) + (pair[1][1] - pair[0][1]).powi(2)).sqrt();
        }
        let first = path[0];
        let last = path[path.len() - 1];
        let net = ((last[0] - first[0]).powi(2) + (last[1] - first[1]).powi(2))
            .sqrt()
            .max(1e-6);
        total += len / net;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

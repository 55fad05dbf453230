//! Canonical trajectory data model: scene tables, observation windows, and
//! neighbor extraction.
//!
//! A [`SceneTable`] is the flat "who was where at which frame" record set
//! every other module consumes. Windows slice an agent's contiguous presence
//! into (observed, future) pairs; neighbors are the other agents co-present
//! at the exact same frame.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub frame_id: i64,
    pub agent_id: i64,
    pub x: f64,
    pub y: f64,
}

/// All trajectory records of one scene, sorted by (frame_id, agent_id) with
/// unique (frame_id, agent_id) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTable {
    records: Vec<Record>,
    frame_interval: f64,
}

pub const DEFAULT_FRAME_INTERVAL: f64 = 0.4;

impl SceneTable {
    /// Sorts the records and enforces key uniqueness.
    pub fn new(mut records: Vec<Record>, frame_interval: f64) -> Result<Self> {
        records.sort_by(|a, b| (a.frame_id, a.agent_id).cmp(&(b.frame_id, b.agent_id)));
        for pair in records.windows(2) {
            if pair[0].frame_id == pair[1].frame_id && pair[0].agent_id == pair[1].agent_id {
                return Err(Error::DuplicateRecord {
                    frame_id: pair[0].frame_id,
                    agent_id: pair[0].agent_id,
                });
            }
        }
        Ok(SceneTable {
            records,
            frame_interval,
        })
    }

    pub fn empty() -> Self {
        SceneTable {
            records: Vec::new(),
            frame_interval: DEFAULT_FRAME_INTERVAL,
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn frame_interval(&self) -> f64 {
        self.frame_interval
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct agent ids, ascending.
    pub fn agent_ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.records.iter().map(|r| r.agent_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The table's frame granularity: the smallest positive gap between
    /// consecutive distinct frame ids. Datasets annotate at different id
    /// strides (every frame vs. every 10th), so contiguity of an agent's
    /// presence is judged against this step rather than a hard-coded 1.
    pub fn frame_step(&self) -> i64 {
        let mut frames: Vec<i64> = self.records.iter().map(|r| r.frame_id).collect();
        frames.sort_unstable();
        frames.dedup();
        frames
            .windows(2)
            .map(|w| w[1] - w[0])
            .min()
            .unwrap_or(1)
            .max(1)
    }
}

/// One neighbor observation: which agent, and where it was.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub agent_id: i64,
    pub pos: [f64; 2],
}

/// One prediction instance: the observed path of an agent, the co-present
/// neighbors at each observed step, and the ground-truth future.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    pub agent_id: i64,
    /// Observed positions, length `t_obs`.
    pub observed: Vec<[f64; 2]>,
    /// Per observed step, the other agents present at that exact frame.
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Ground-truth future positions, length `t_pred`.
    pub future: Vec<[f64; 2]>,
    pub domain_id: usize,
}

impl ObservationWindow {
    pub fn t_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn t_pred(&self) -> usize {
        self.future.len()
    }
}

/// Equal-domain mini-batch of windows.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    windows: Vec<ObservationWindow>,
    domain_id: usize,
}

impl DomainBatch {
    pub fn new(windows: Vec<ObservationWindow>) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Shape("domain batch must be non-empty".into()));
        };
        let domain_id = first.domain_id;
        if windows.iter().any(|w| w.domain_id != domain_id) {
            return Err(Error::Shape(
                "domain batch mixes windows from different domains".into(),
            ));
        }
        Ok(DomainBatch { windows, domain_id })
    }

    pub fn windows(&self) -> &[ObservationWindow] {
        &self.windows
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn batch_size(&self) -> usize {
        self.windows.len()
    }
}

/// Slices every agent's contiguous presence into observation windows.
///
/// For each agent, every run of `t_obs + t_pred` frames spaced exactly one
/// frame step apart yields a window; window starts advance by `stride`
/// within a run. Neighbors at an observed step are all other agents present
/// at that exact frame. Windows come out ordered by (agent_id, start frame),
/// with `domain_id` left at 0 for the caller to stamp.
pub fn build_windows(
    table: &SceneTable,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Vec<ObservationWindow> {
    assert!(t_pred >= 1);
    slice_windows(table, t_obs, t_pred, stride)
}

/// Inference variant: windows with observations only (`future` left empty),
/// so predictions can be made right up to the end of an agent's track.
pub fn build_observation_windows(
    table: &SceneTable,
    t_obs: usize,
    stride: usize,
) -> Vec<ObservationWindow> {
    slice_windows(table, t_obs, 0, stride)
}

fn slice_windows(
    table: &SceneTable,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Vec<ObservationWindow> {
    assert!(t_obs >= 1 && stride >= 1);
    let step = table.frame_step();
    let total = t_obs + t_pred;

    let mut by_agent: BTreeMap<i64, Vec<(i64, [f64; 2])>> = BTreeMap::new();
    let mut at_frame: BTreeMap<i64, Vec<Neighbor>> = BTreeMap::new();
    for r in table.records() {
        by_agent
            .entry(r.agent_id)
            .or_default()
            .push((r.frame_id, [r.x, r.y]));
        at_frame.entry(r.frame_id).or_default().push(Neighbor {
            agent_id: r.agent_id,
            pos: [r.x, r.y],
        });
    }

    let mut windows = Vec::new();
    for (&agent_id, frames) in &by_agent {
        // frames are frame-sorted because the table is; split into maximal
        // runs of exactly-one-step spacing.
        let mut run_start = 0;
        for i in 1..=frames.len() {
            let run_ends = i == frames.len() || frames[i].0 - frames[i - 1].0 != step;
            if !run_ends {
                continue;
            }
            let run = &frames[run_start..i];
            run_start = i;
            if run.len() < total {
                continue;
            }
            let mut start = 0;
            while start + total <= run.len() {
                let observed: Vec<[f64; 2]> =
                    run[start..start + t_obs].iter().map(|&(_, p)| p).collect();
                let neighbors: Vec<Vec<Neighbor>> = run[start..start + t_obs]
                    .iter()
                    .map(|&(frame, _)| {
                        at_frame[&frame]
                            .iter()
                            .filter(|n| n.agent_id != agent_id)
                            .copied()
                            .collect()
                    })
                    .collect();
                let future: Vec<[f64; 2]> = run[start + t_obs..start + total]
                    .iter()
                    .map(|&(_, p)| p)
                    .collect();
                windows.push(ObservationWindow {
                    agent_id,
                    observed,
                    neighbors,
                    future,
                    domain_id: 0,
                });
                start += stride;
            }
        }
    }
    windows
}

/// One observed step's neighbors in fixed-capacity padded form.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborStep {
    /// Exactly `a_max` coordinate rows; pad rows are zeros.
    pub coords: Vec<[f64; 2]>,
    /// `true` marks a real neighbor row.
    pub mask: Vec<bool>,
}

/// Pads/truncates each step's neighbor set to `a_max` slots.
///
/// Neighbors are ordered by Euclidean distance to the agent's position at
/// that step (ties: lower agent_id), and the nearest `a_max` are kept. The
/// canonical ordering is what makes downstream encoding exactly invariant to
/// the order neighbors arrive in.
pub fn neighbor_mask(window: &ObservationWindow, a_max: usize) -> Vec<NeighborStep> {
    window
        .observed
        .iter()
        .zip(&window.neighbors)
        .map(|(&pos, step_neighbors)| {
            let mut sorted: Vec<(f64, &Neighbor)> = step_neighbors
                .iter()
                .map(|n| {
                    let (dx, dy) = (n.pos[0] - pos[0], n.pos[1] - pos[1]);
                    (dx * dx + dy * dy, n)
                })
                .collect();
            sorted.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .expect("finite coordinates")
                    .then(a.1.agent_id.cmp(&b.1.agent_id))
            });
            let mut coords = Vec::with_capacity(a_max);
            let mut mask = Vec::with_capacity(a_max);
            for slot in 0..a_max {
                if let Some((_, n)) = sorted.get(slot) {
                    coords.push(n.pos);
                    mask.push(true);
                } else {
                    coords.push([0.0, 0.0]);
                    mask.push(false);
                }
            }
            NeighborStep { coords, mask }
        })
        .collect()
}

/// Stamps a domain index onto a set of windows.
pub fn assign_domain(windows: &mut [ObservationWindow], domain_id: usize) {
    for w in windows {
        w.domain_id = domain_id;
    }
}

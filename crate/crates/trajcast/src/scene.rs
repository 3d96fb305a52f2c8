//! Interacting-agent selection, dynamic-insertion-area extraction, and
//! semantic-graph construction.
//!
//! A DIA is a road slot bounded by a front agent, a rear agent, and two
//! reference-line side boundaries. Interaction is defined by reference-line
//! conflicts, not by distance: a car two meters away on a non-crossing lane
//! is not interacting, a car forty meters away on a crossing lane is.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{
    conflict_point, project_to_frenet, FrenetState, ReferenceLine, RoadMap, Vec2,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("agent {0} has no assigned reference line in the map")]
    UnassignedLine(String),
    #[error("agent {agent} has no frame at {t_ms} ms")]
    MissingFrame { agent: String, t_ms: i64 },
    #[error("track {0} has fewer than one frame")]
    EmptyTrack(String),
    #[error("track {agent}: timestamps must increase by {period_ms} ms steps")]
    BadTimestamps { agent: String, period_ms: i64 },
    #[error("future window shorter than T_f for agent {0}")]
    ShortFuture(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub const DEFAULT_PERIOD_MS: i64 = 100;

/// One observed state of an agent.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp_ms: i64,
    pub pos: Vec2,
    pub vel: Vec2,
    pub psi: f64,
}

impl Frame {
    pub fn speed(&self) -> f64 {
        self.vel.norm()
    }
}

/// An agent's observed trajectory with its assigned reference line.
#[derive(Clone, Debug)]
pub struct AgentTrack {
    pub agent_id: String,
    frames: Vec<Frame>,
    pub assigned_line: String,
    period_ms: i64,
}

impl AgentTrack {
    pub fn new(
        agent_id: impl Into<String>,
        frames: Vec<Frame>,
        assigned_line: impl Into<String>,
    ) -> Result<Self, SceneError> {
        Self::with_period(agent_id, frames, assigned_line, DEFAULT_PERIOD_MS)
    }

    pub fn with_period(
        agent_id: impl Into<String>,
        frames: Vec<Frame>,
        assigned_line: impl Into<String>,
        period_ms: i64,
    ) -> Result<Self, SceneError> {
        let agent_id = agent_id.into();
        if frames.is_empty() {
            return Err(SceneError::EmptyTrack(agent_id));
        }
        for w in frames.windows(2) {
            if w[1].timestamp_ms - w[0].timestamp_ms != period_ms {
                return Err(SceneError::BadTimestamps {
                    agent: agent_id,
                    period_ms,
                });
            }
        }
        Ok(AgentTrack {
            agent_id,
            frames,
            assigned_line: assigned_line.into(),
            period_ms,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn period_ms(&self) -> i64 {
        self.period_ms
    }

    pub fn first_ts(&self) -> i64 {
        self.frames[0].timestamp_ms
    }

    pub fn last_ts(&self) -> i64 {
        self.frames[self.frames.len() - 1].timestamp_ms
    }

    /// Frame at an exact timestamp; `None` outside the recorded range.
    pub fn frame_at(&self, t_ms: i64) -> Option<&Frame> {
        if t_ms < self.first_ts() || t_ms > self.last_ts() {
            return None;
        }
        let idx = (t_ms - self.first_ts()) / self.period_ms;
        let f = &self.frames[idx as usize];
        (f.timestamp_ms == t_ms).then_some(f)
    }

    /// Frame at a timestamp, back-filled with the earliest frame for
    /// timestamps before the track starts.
    pub fn frame_backfilled(&self, t_ms: i64) -> Option<&Frame> {
        if t_ms < self.first_ts() {
            return Some(&self.frames[0]);
        }
        self.frame_at(t_ms)
    }
}

/// Feature indices of the 7-scalar DIA feature vector.
pub const F_DF: usize = 0;
pub const F_VF: usize = 1;
pub const F_PHIF: usize = 2;
pub const F_DR: usize = 3;
pub const F_VR: usize = 4;
pub const F_PHIR: usize = 5;
pub const F_LEN: usize = 6;
pub const DIA_FEATURES: usize = 7;

/// What forms one longitudinal boundary of a DIA.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// A tracked vehicle.
    Agent(String),
    /// The conflict point itself (empty road ahead up to the contested area).
    ConflictPoint,
    /// No conflict and no leader; a virtual boundary at the horizon distance.
    Horizon,
}

impl Boundary {
    pub fn agent_id(&self) -> Option<&str> {
        match self {
            Boundary::Agent(id) => Some(id),
            _ => None,
        }
    }

    fn label(&self) -> &str {
        match self {
            Boundary::Agent(id) => id,
            Boundary::ConflictPoint => "conflict",
            Boundary::Horizon => "horizon",
        }
    }
}

/// Dynamic insertion area with a `T_h`-step feature history.
///
/// Absolute features per step: `[d_f, v_f, phi_f, d_r, v_r, phi_r, l]`, where
/// `d` is the boundary's longitudinal distance to the conflict point along
/// its own reference line and `l = d_r - d_f`. Relative features subtract
/// the reference DIA's features step by step.
#[derive(Clone, Debug)]
pub struct Dia {
    pub id: String,
    pub front: Boundary,
    pub rear: Boundary,
    pub abs_features: Vec<[f64; DIA_FEATURES]>,
    pub rel_features: Vec<[f64; DIA_FEATURES]>,
}

impl Dia {
    pub fn front_agent(&self) -> Option<&str> {
        self.front.agent_id()
    }

    pub fn rear_agent(&self) -> Option<&str> {
        self.rear.agent_id()
    }

    /// Current-step absolute features.
    pub fn current(&self) -> &[f64; DIA_FEATURES] {
        self.abs_features.last().expect("non-empty history")
    }
}

/// Fully connected graph over DIAs with a distinguished reference node
/// (the ego's front DIA).
#[derive(Clone, Debug)]
pub struct SemanticGraph {
    pub nodes: Vec<Dia>,
    pub reference_node: usize,
    pub t_ms: i64,
    pub t_h: usize,
    pub ego_agent: String,
    /// Ego's reference line and the arc length of its conflict anchor on it.
    pub ego_line: String,
    pub ego_anchor_s: f64,
}

impl SemanticGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Extraction knobs.
#[derive(Copy, Clone, Debug)]
pub struct ExtractConfig {
    pub t_h: usize,
    /// Horizon distance for the virtual front boundary when no conflict and
    /// no leader exists (meters).
    pub d_h: f64,
    /// Cap on the interacting set size (closest to conflict win).
    pub m_max: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            t_h: 10,
            d_h: 100.0,
            m_max: 6,
        }
    }
}

fn line_of<'m>(map: &'m RoadMap, track: &AgentTrack) -> Result<&'m ReferenceLine, SceneError> {
    map.line(&track.assigned_line)
        .ok_or_else(|| SceneError::UnassignedLine(track.agent_id.clone()))
}

fn frenet_of(frame: &Frame, line: &ReferenceLine) -> FrenetState {
    project_to_frenet(frame.pos, frame.psi, frame.speed(), line)
        .expect("valid line projects any point")
}

/// Agents interacting with the ego at time `t_ms`: those whose assigned line
/// conflicts with the ego's line and who have not yet passed the conflict
/// point, plus agents sharing the ego's line ahead of the ego. Output is
/// sorted by agent id.
pub fn select_interacting(
    ego: &AgentTrack,
    others: &[AgentTrack],
    map: &RoadMap,
    t_ms: i64,
) -> Result<Vec<String>, SceneError> {
    let ego_line = line_of(map, ego)?;
    let ego_frame = ego.frame_at(t_ms).ok_or(SceneError::MissingFrame {
        agent: ego.agent_id.clone(),
        t_ms,
    })?;
    let ego_s = frenet_of(ego_frame, ego_line).s;

    let mut selected = Vec::new();
    for other in others {
        if other.agent_id == ego.agent_id {
            continue;
        }
        let Some(frame) = other.frame_at(t_ms) else {
            continue; // not present in the scene right now
        };
        let line = line_of(map, other)?;
        if line.id() == ego_line.id() {
            let s = frenet_of(frame, line).s;
            if s > ego_s {
                selected.push(other.agent_id.clone());
            }
            continue;
        }
        if let Some(c) = conflict_point(ego_line, line) {
            let s = frenet_of(frame, line).s;
            if s < c.s_b {
                selected.push(other.agent_id.clone());
            }
        }
    }
    selected.sort();
    Ok(selected)
}

/// Per-agent geometry relative to the scene's conflict structure.
struct AgentGeom<'a> {
    track: &'a AgentTrack,
    line: &'a ReferenceLine,
    /// Arc length of this agent's conflict anchor on its own line.
    anchor_s: f64,
    /// Remaining distance to the anchor at the current time.
    remaining: f64,
    on_ego_line: bool,
}

fn remaining_at(geom: &AgentGeom, t_ms: i64) -> Option<f64> {
    geom.track
        .frame_backfilled(t_ms)
        .map(|f| geom.anchor_s - frenet_of(f, geom.line).s)
}

/// Extract the semantic graph for `ego` at time `t_ms`.
///
/// Construction:
/// 1. The ego's front DIA (rear boundary = ego, front boundary = nearest
///    same-line leader, else the conflict point, else the horizon) is always
///    present and becomes the reference node.
/// 2. Per crossing line, the slot between its closest-to-conflict agent and
///    the conflict point.
/// 3. Between consecutive crossing agents in the merged
///    distance-to-conflict order, the slot they bound.
///
/// Nodes are ordered by `(d_f, d_r)` at the current step. Histories shorter
/// than `T_h` back-fill with the agent's earliest frame. Virtual boundaries
/// carry `d = 0`, `v = 0`, `phi = 0`.
pub fn extract_dias(
    ego: &AgentTrack,
    others: &[AgentTrack],
    map: &RoadMap,
    t_ms: i64,
    cfg: &ExtractConfig,
) -> Result<SemanticGraph, SceneError> {
    let ego_line = line_of(map, ego)?;
    let ego_frame = ego.frame_at(t_ms).ok_or(SceneError::MissingFrame {
        agent: ego.agent_id.clone(),
        t_ms,
    })?;
    let ego_s = frenet_of(ego_frame, ego_line).s;

    let interacting_ids = select_interacting(ego, others, map, t_ms)?;
    let by_id: BTreeMap<&str, &AgentTrack> = others
        .iter()
        .map(|t| (t.agent_id.as_str(), t))
        .collect();

    // Conflict structure per crossing line, and same-line agents.
    let mut crossing: Vec<AgentGeom> = Vec::new();
    let mut same_line: Vec<AgentGeom> = Vec::new();
    let mut nearest_conflict_on_ego: Option<f64> = None;
    for id in &interacting_ids {
        let track = by_id[id.as_str()];
        let line = line_of(map, track)?;
        if line.id() == ego_line.id() {
            same_line.push(AgentGeom {
                track,
                line,
                anchor_s: 0.0, // set after the ego anchor is known
                remaining: 0.0,
                on_ego_line: true,
            });
            continue;
        }
        let c = conflict_point(ego_line, line).expect("selected crossing agent has a conflict");
        let s_now = frenet_of(track.frame_at(t_ms).expect("selected agent present"), line).s;
        nearest_conflict_on_ego = Some(match nearest_conflict_on_ego {
            None => c.s_a,
            Some(best) => {
                if c.s_a >= ego_s && (best < ego_s || c.s_a < best) {
                    c.s_a
                } else {
                    best
                }
            }
        });
        crossing.push(AgentGeom {
            track,
            line,
            anchor_s: c.s_b,
            remaining: c.s_b - s_now,
            on_ego_line: false,
        });
    }

    // Ego anchor: nearest conflict ahead on its line, else the horizon.
    let (ego_anchor_s, anchor_is_conflict) = match nearest_conflict_on_ego {
        Some(s) => (s, true),
        None => (ego_s + cfg.d_h, false),
    };
    for g in &mut same_line {
        g.anchor_s = ego_anchor_s;
        let s_now = frenet_of(g.track.frame_at(t_ms).expect("present"), g.line).s;
        g.remaining = ego_anchor_s - s_now;
    }
    let ego_remaining = ego_anchor_s - ego_s;

    // Cap the interacting set, closest to the conflict first.
    let mut all: Vec<AgentGeom> = Vec::new();
    all.extend(crossing);
    all.extend(same_line);
    all.sort_by(|a, b| {
        a.remaining
            .total_cmp(&b.remaining)
            .then_with(|| a.track.agent_id.cmp(&b.track.agent_id))
    });
    all.truncate(cfg.m_max.max(1));

    let (crossing, same_line): (Vec<_>, Vec<_>) = all.into_iter().partition(|g| !g.on_ego_line);

    // Ego's front boundary: nearest same-line leader not past the anchor,
    // else the conflict point / horizon.
    let ego_front: Boundary = same_line
        .iter()
        .filter(|g| g.remaining >= 0.0 && g.remaining < ego_remaining)
        .min_by(|a, b| b.remaining.total_cmp(&a.remaining))
        .map(|g| Boundary::Agent(g.track.agent_id.clone()))
        .unwrap_or(if anchor_is_conflict {
            Boundary::ConflictPoint
        } else {
            Boundary::Horizon
        });

    // Boundary pairs per the construction rules.
    let mut pairs: Vec<(Boundary, Boundary)> = Vec::new();
    pairs.push((ego_front.clone(), Boundary::Agent(ego.agent_id.clone())));

    let mut per_line: BTreeMap<&str, Vec<&AgentGeom>> = BTreeMap::new();
    for g in &crossing {
        per_line.entry(g.line.id()).or_default().push(g);
    }
    for members in per_line.values() {
        let head = members
            .iter()
            .min_by(|a, b| {
                a.remaining
                    .total_cmp(&b.remaining)
                    .then_with(|| a.track.agent_id.cmp(&b.track.agent_id))
            })
            .expect("non-empty line group");
        pairs.push((
            Boundary::ConflictPoint,
            Boundary::Agent(head.track.agent_id.clone()),
        ));
    }
    // crossing is already sorted by (remaining, id)
    for w in crossing.windows(2) {
        pairs.push((
            Boundary::Agent(w[0].track.agent_id.clone()),
            Boundary::Agent(w[1].track.agent_id.clone()),
        ));
    }

    // Per-boundary feature lookup.
    let geom_of = |b: &Boundary| -> Option<&AgentGeom> {
        let id = b.agent_id()?;
        crossing
            .iter()
            .chain(same_line.iter())
            .find(|g| g.track.agent_id == id)
    };
    let step_ms = ego.period_ms();
    let timestamps: Vec<i64> = (0..cfg.t_h)
        .map(|k| t_ms - ((cfg.t_h - 1 - k) as i64) * step_ms)
        .collect();

    let boundary_features = |b: &Boundary, ts: i64| -> (f64, f64, f64) {
        match b {
            Boundary::ConflictPoint | Boundary::Horizon => (0.0, 0.0, 0.0),
            Boundary::Agent(id) => {
                if *id == ego.agent_id {
                    let f = ego
                        .frame_backfilled(ts)
                        .expect("ego history is back-filled");
                    let fr = frenet_of(f, ego_line);
                    (ego_anchor_s - fr.s, fr.v_s, fr.phi)
                } else {
                    let g = geom_of(b).expect("boundary agent is tracked");
                    let f = g
                        .track
                        .frame_backfilled(ts)
                        .expect("selected agent history is back-filled");
                    let fr = frenet_of(f, g.line);
                    (g.anchor_s - fr.s, fr.v_s, fr.phi)
                }
            }
        }
    };

    let mut nodes: Vec<Dia> = pairs
        .into_iter()
        .map(|(front, rear)| {
            let abs_features: Vec<[f64; DIA_FEATURES]> = timestamps
                .iter()
                .map(|&ts| {
                    let (d_f, v_f, phi_f) = boundary_features(&front, ts);
                    let (d_r, v_r, phi_r) = boundary_features(&rear, ts);
                    [d_f, v_f, phi_f, d_r, v_r, phi_r, d_r - d_f]
                })
                .collect();
            Dia {
                id: format!("{}|{}", rear.label(), front.label()),
                front,
                rear,
                abs_features,
                rel_features: Vec::new(),
            }
        })
        .collect();

    // Order by longitudinal distance to the conflict point.
    nodes.sort_by(|a, b| {
        let (fa, fb) = (a.current(), b.current());
        fa[F_DF]
            .total_cmp(&fb[F_DF])
            .then_with(|| fa[F_DR].total_cmp(&fb[F_DR]))
            .then_with(|| a.id.cmp(&b.id))
    });
    let reference_node = nodes
        .iter()
        .position(|n| n.rear_agent() == Some(ego.agent_id.as_str()))
        .expect("ego front DIA always present");

    let mut graph = SemanticGraph {
        nodes,
        reference_node,
        t_ms,
        t_h: cfg.t_h,
        ego_agent: ego.agent_id.clone(),
        ego_line: ego_line.id().to_string(),
        ego_anchor_s,
    };
    relative_features(&mut graph);
    Ok(graph)
}

/// Fill `rel_features`: each node's features minus the reference node's,
/// step by step. The reference node's own relative features are zero.
pub fn relative_features(graph: &mut SemanticGraph) {
    let reference = graph.nodes[graph.reference_node].abs_features.clone();
    for node in &mut graph.nodes {
        node.rel_features = node
            .abs_features
            .iter()
            .zip(reference.iter())
            .map(|(a, r)| {
                let mut out = [0.0; DIA_FEATURES];
                for i in 0..DIA_FEATURES {
                    out[i] = a[i] - r[i];
                }
                out
            })
            .collect();
    }
}

/// Index of the DIA the ego inserts into over the next `T_f` steps.
///
/// The ego's future distance to its conflict anchor is threaded through the
/// DIA intervals `[d_f, d_r]` frozen at the current time: if the ego never
/// passes its front boundary it keeps its own slot (yield, the reference
/// node); otherwise the first containing interval in (time, node-order) scan
/// order wins. Training-time only: requires the future track.
pub fn insertion_label(
    graph: &SemanticGraph,
    ego_future: &AgentTrack,
    map: &RoadMap,
    t_f: usize,
) -> Result<usize, SceneError> {
    let line = map
        .line(&graph.ego_line)
        .ok_or_else(|| SceneError::UnassignedLine(graph.ego_agent.clone()))?;
    let step = ego_future.period_ms();
    let reference = &graph.nodes[graph.reference_node];
    let front_d = reference.current()[F_DF];

    let mut future_d = Vec::with_capacity(t_f);
    for k in 1..=t_f {
        let ts = graph.t_ms + (k as i64) * step;
        let Some(frame) = ego_future.frame_at(ts) else {
            break; // shorter futures label what they can see
        };
        future_d.push(graph.ego_anchor_s - frenet_of(frame, line).s);
    }

    let passes_front = future_d.iter().any(|d| *d < front_d);
    if !passes_front {
        return Ok(graph.reference_node);
    }
    for d in &future_d {
        for (i, node) in graph.nodes.iter().enumerate() {
            if i == graph.reference_node {
                continue;
            }
            let f = node.current();
            if f[F_DF] <= *d && *d <= f[F_DR] {
                return Ok(i);
            }
        }
    }
    Ok(graph.reference_node)
}

/// Arc-length distance the ego travels along its reference line between
/// `t_ms` and `t_ms + t_f` steps. Training-time only.
pub fn goal_state_label(
    ego: &AgentTrack,
    map: &RoadMap,
    t_ms: i64,
    t_f: usize,
) -> Result<f64, SceneError> {
    let line = line_of(map, ego)?;
    let now = ego.frame_at(t_ms).ok_or(SceneError::MissingFrame {
        agent: ego.agent_id.clone(),
        t_ms,
    })?;
    let end_ts = t_ms + (t_f as i64) * ego.period_ms();
    let end = ego
        .frame_at(end_ts)
        .ok_or_else(|| SceneError::ShortFuture(ego.agent_id.clone()))?;
    Ok(frenet_of(end, line).s - frenet_of(now, line).s)
}

//! Low-level trajectory policy: a GRU encoder-decoder over recent dynamics,
//! conditioned on the goal state and the decoding step.
//!
//! The encoder compresses the `T_h`-step history into a context vector; the
//! decoder unrolls `T_f` steps, each feeding back its previous output. With
//! the incremental-aligned representation the network predicts per-step
//! position increments in a frame centered on the current position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{frenet_to_cartesian, ReferenceLine, Vec2};
use crate::nn::layers::{dense, dropout_mask, gru_sequence, gru_step, Activation};
use crate::nn::params::{init_dense, init_gru, BoundParams};
use crate::nn::{NnError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EdnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("history has {got} steps, expected {expected}")]
    HistoryLength { got: usize, expected: usize },
    #[error("prediction horizon must be positive")]
    ZeroHorizon,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("target length {got} does not match horizon {expected}")]
    TargetLength { got: usize, expected: usize },
    #[error("transform intention requires the incremental-aligned representation")]
    TransformNeedsIncremental,
}

/// Which frame the dynamics live in. The dataset builder performs the actual
/// projection; the network itself is frame-agnostic.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    Frenet,
    Cartesian,
}

/// Position representation fed to and produced by the network.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Inputs aligned so the current position is the origin; outputs are
    /// per-step increments.
    IncrementalAligned,
    /// Raw absolute positions in and out.
    Raw,
}

/// How the intention signal reaches the decoder.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentionMode {
    /// No intention signal (ablation baseline).
    None,
    /// Goal state and normalized decoding step appended to the decoder
    /// input each step.
    Input,
    /// Goal state and normalized decoding step appended to the GRU output
    /// before the dense stack.
    Output,
    /// Goal state embedded through a dense layer and added to the context
    /// vector at the first decoding step.
    Hidden,
    /// Decoder inputs re-expressed relative to the goal position, telling
    /// the model to reach the origin at the end of the horizon.
    Transform,
}

pub const HISTORY_FEATURES: usize = 5;
pub const OUTPUT_FEATURES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdnConfig {
    pub hidden: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub intention: IntentionMode,
    pub coordinate: Coordinate,
    pub representation: Representation,
    /// Dropout rate on the dense-stack activations, training only.
    pub dropout: f64,
}

impl Default for EdnConfig {
    fn default() -> Self {
        EdnConfig {
            hidden: 64,
            t_h: 10,
            t_f: 30,
            intention: IntentionMode::Input,
            coordinate: Coordinate::Frenet,
            representation: Representation::IncrementalAligned,
            dropout: 0.1,
        }
    }
}

impl EdnConfig {
    /// Width of the decoder input vector under this wiring.
    pub fn decoder_input_width(&self) -> usize {
        match self.intention {
            IntentionMode::Input => OUTPUT_FEATURES + 2,
            _ => OUTPUT_FEATURES,
        }
    }

    fn fc_input_width(&self) -> usize {
        match self.intention {
            IntentionMode::Output => self.hidden + 2,
            _ => self.hidden,
        }
    }
}

/// Fresh parameter store with encoder, decoder, and dense stack initialized.
pub fn init_params(cfg: &EdnConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_gru(&mut store, &mut rng, "edn.enc", HISTORY_FEATURES, cfg.hidden);
    init_gru(&mut store, &mut rng, "edn.dec", cfg.decoder_input_width(), cfg.hidden);
    init_dense(&mut store, &mut rng, "edn.fc1", cfg.fc_input_width(), cfg.hidden);
    init_dense(&mut store, &mut rng, "edn.fc2", cfg.hidden, cfg.hidden);
    init_dense(&mut store, &mut rng, "edn.fc3", cfg.hidden, OUTPUT_FEATURES);
    if cfg.intention == IntentionMode::Hidden {
        init_dense(&mut store, &mut rng, "edn.goal_embed", 1, cfg.hidden);
    }
    store
}

/// `T_h` steps of dynamics in the representation the config asks for.
///
/// With [`Representation::IncrementalAligned`] each feature row is
/// `[pos_lon - cur_lon, pos_lat - cur_lat, v_lon, v_lat, heading]` so the
/// current step's position entries are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicHistory {
    pub features: Vec<[f64; HISTORY_FEATURES]>,
    /// Absolute position of the current (last history) step.
    pub current_pos: (f64, f64),
    /// Increment from the previous to the current step; seeds the decoder.
    pub last_increment: (f64, f64),
}

/// A raw trajectory window before representation shaping.
#[derive(Clone, Debug, Default)]
pub struct RawWindow {
    /// Absolute positions over the history, oldest first (length `T_h`).
    pub hist_pos: Vec<(f64, f64)>,
    /// Longitudinal/lateral velocity per history step.
    pub hist_vel: Vec<(f64, f64)>,
    /// Heading (relative to the lane tangent in Frenet) per history step.
    pub hist_heading: Vec<f64>,
    /// Absolute future positions (length `T_f`; empty at inference).
    pub future_pos: Vec<(f64, f64)>,
}

/// Shape a raw window into network inputs and per-step targets.
///
/// Increments are defined against the running reconstruction so that
/// [`reconstruct_positions`] replays them onto the original positions.
pub fn apply_representation(
    raw: &RawWindow,
    repr: Representation,
) -> (DynamicHistory, Vec<(f64, f64)>) {
    let cur = *raw.hist_pos.last().expect("non-empty history");
    let features: Vec<[f64; HISTORY_FEATURES]> = raw
        .hist_pos
        .iter()
        .zip(raw.hist_vel.iter())
        .zip(raw.hist_heading.iter())
        .map(|((p, v), h)| match repr {
            Representation::IncrementalAligned => [p.0 - cur.0, p.1 - cur.1, v.0, v.1, *h],
            Representation::Raw => [p.0, p.1, v.0, v.1, *h],
        })
        .collect();

    let last_increment = if raw.hist_pos.len() >= 2 {
        let prev = raw.hist_pos[raw.hist_pos.len() - 2];
        (cur.0 - prev.0, cur.1 - prev.1)
    } else {
        (0.0, 0.0)
    };

    let targets = match repr {
        Representation::Raw => raw.future_pos.clone(),
        Representation::IncrementalAligned => {
            let mut out = Vec::with_capacity(raw.future_pos.len());
            let mut run = cur;
            for p in &raw.future_pos {
                let inc = (p.0 - run.0, p.1 - run.1);
                run = (run.0 + inc.0, run.1 + inc.1);
                out.push(inc);
            }
            out
        }
    };
    (
        DynamicHistory {
            features,
            current_pos: cur,
            last_increment,
        },
        targets,
    )
}

/// Cumulative positions from per-step outputs: prefix sums of increments
/// from the current position, or the outputs themselves in raw mode.
pub fn reconstruct_positions(
    outputs: &[(f64, f64)],
    current_pos: (f64, f64),
    repr: Representation,
) -> Vec<(f64, f64)> {
    match repr {
        Representation::Raw => outputs.to_vec(),
        Representation::IncrementalAligned => {
            let mut run = current_pos;
            outputs
                .iter()
                .map(|inc| {
                    run = (run.0 + inc.0, run.1 + inc.1);
                    run
                })
                .collect()
        }
    }
}

/// Predicted per-step outputs plus their cumulative reconstruction.
#[derive(Clone, Debug)]
pub struct TrajectoryPrediction {
    /// Per-step network outputs (increments, or absolute positions in raw
    /// mode).
    pub steps: Vec<(f64, f64)>,
    /// Reconstructed absolute positions, one per future step.
    pub positions: Vec<(f64, f64)>,
}

impl TrajectoryPrediction {
    /// Map-frame points for Frenet predictions; `s` is clamped to the line.
    pub fn to_map_frame(&self, line: &ReferenceLine) -> Vec<Vec2> {
        self.positions
            .iter()
            .map(|(s, d)| {
                let s = s.clamp(0.0, line.total_len());
                frenet_to_cartesian(s, *d, 0.0, line)
                    .expect("clamped arc length is in range")
                    .0
            })
            .collect()
    }
}

fn stack_histories(histories: &[&DynamicHistory], t_h: usize) -> Tensor {
    let b = histories.len();
    let mut data = Vec::with_capacity(t_h * b * HISTORY_FEATURES);
    for k in 0..t_h {
        for h in histories {
            data.extend_from_slice(&h.features[k]);
        }
    }
    Tensor::new(t_h * b, HISTORY_FEATURES, data)
}

/// Encoder: stacked histories to the context vector (`B x hidden`).
pub fn taped_encode(
    tape: &mut Tape,
    bound: &BoundParams,
    histories: &[&DynamicHistory],
    cfg: &EdnConfig,
) -> Result<Var, EdnError> {
    for h in histories {
        if h.features.len() != cfg.t_h {
            return Err(EdnError::HistoryLength {
                got: h.features.len(),
                expected: cfg.t_h,
            });
        }
    }
    let stacked = stack_histories(histories, cfg.t_h);
    let x = tape.constant(stacked);
    Ok(gru_sequence(tape, x, cfg.t_h, histories.len(), bound.gru("edn.enc")?)?)
}

/// Decoder: unrolls `T_f` steps from the context vector. Returns one
/// `B x 2` output per step.
///
/// `goals` has one goal state per batch row. `dropout` masks apply only when
/// a seeded RNG is passed (training).
pub fn taped_decode(
    tape: &mut Tape,
    bound: &BoundParams,
    context: Var,
    histories: &[&DynamicHistory],
    goals: &[f64],
    cfg: &EdnConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Var>, EdnError> {
    if cfg.t_f == 0 {
        return Err(EdnError::ZeroHorizon);
    }
    if cfg.intention == IntentionMode::Transform
        && cfg.representation != Representation::IncrementalAligned
    {
        return Err(EdnError::TransformNeedsIncremental);
    }
    let b = histories.len();
    let dec = bound.gru("edn.dec")?;
    let fc1 = bound.dense("edn.fc1")?;
    let fc2 = bound.dense("edn.fc2")?;
    let fc3 = bound.dense("edn.fc3")?;

    let goal_col = Tensor::col(goals);
    let mut h = context;
    if cfg.intention == IntentionMode::Hidden {
        let g = tape.constant(goal_col.clone());
        let emb = dense(tape, g, bound.dense("edn.goal_embed")?, Activation::None)?;
        h = tape.add(h, emb);
    }

    // Seed output: the current step expressed in the output representation.
    let seed: Vec<f64> = histories
        .iter()
        .flat_map(|hist| match cfg.representation {
            Representation::IncrementalAligned => {
                [hist.last_increment.0, hist.last_increment.1]
            }
            Representation::Raw => [hist.current_pos.0, hist.current_pos.1],
        })
        .collect();
    let mut prev_out = tape.constant(Tensor::new(b, OUTPUT_FEATURES, seed));
    // Running aligned position for the transform wiring.
    let mut cum: Option<Var> = match cfg.intention {
        IntentionMode::Transform => Some(tape.constant(Tensor::zeros(b, OUTPUT_FEATURES))),
        _ => None,
    };
    let goal_vec = {
        // goal enters the position channel; the lateral channel is zero
        let mut t = Tensor::zeros(b, OUTPUT_FEATURES);
        for (r, g) in goals.iter().enumerate() {
            t.set(r, 0, *g);
        }
        t
    };

    let mut rng = dropout_rng;
    let mut outputs = Vec::with_capacity(cfg.t_f);
    for k in 1..=cfg.t_f {
        let step_frac = k as f64 / cfg.t_f as f64;
        let input = match cfg.intention {
            IntentionMode::None | IntentionMode::Hidden => prev_out,
            IntentionMode::Input => {
                let mut extra = Tensor::zeros(b, 2);
                for (r, g) in goals.iter().enumerate() {
                    extra.set(r, 0, *g);
                    extra.set(r, 1, step_frac);
                }
                let e = tape.constant(extra);
                tape.concat_cols(&[prev_out, e])
            }
            IntentionMode::Output => prev_out,
            IntentionMode::Transform => {
                let g = tape.constant(goal_vec.clone());
                tape.sub(cum.expect("transform keeps a running position"), g)
            }
        };
        h = gru_step(tape, input, h, dec)?;

        let fc_in = if cfg.intention == IntentionMode::Output {
            let mut extra = Tensor::zeros(b, 2);
            for (r, g) in goals.iter().enumerate() {
                extra.set(r, 0, *g);
                extra.set(r, 1, step_frac);
            }
            let e = tape.constant(extra);
            tape.concat_cols(&[h, e])
        } else {
            h
        };
        let mut a1 = dense(tape, fc_in, fc1, Activation::Tanh)?;
        if let Some(r) = rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let mask = tape.constant(dropout_mask(b, cfg.hidden, cfg.dropout, r));
                a1 = tape.mul(a1, mask);
            }
        }
        let mut a2 = dense(tape, a1, fc2, Activation::Tanh)?;
        if let Some(r) = rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let mask = tape.constant(dropout_mask(b, cfg.hidden, cfg.dropout, r));
                a2 = tape.mul(a2, mask);
            }
        }
        let out = dense(tape, a2, fc3, Activation::None)?;
        if let Some(c) = cum {
            cum = Some(tape.add(c, out));
        }
        outputs.push(out);
        prev_out = out;
    }
    Ok(outputs)
}

/// Sum of squared errors between taped outputs and target steps.
pub fn taped_loss(
    tape: &mut Tape,
    outputs: &[Var],
    targets: &[Vec<(f64, f64)>],
    batch_rows: usize,
) -> Result<Var, EdnError> {
    if targets.iter().any(|t| t.len() != outputs.len()) {
        return Err(EdnError::TargetLength {
            got: targets.iter().map(|t| t.len()).min().unwrap_or(0),
            expected: outputs.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (k, out) in outputs.iter().enumerate() {
        let mut t = Tensor::zeros(batch_rows, OUTPUT_FEATURES);
        for (r, target) in targets.iter().enumerate() {
            t.set(r, 0, target[k].0);
            t.set(r, 1, target[k].1);
        }
        let tv = tape.constant(t);
        let err = tape.sub(*out, tv);
        let sq = tape.mul(err, err);
        let s = tape.sum_all(sq);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s),
        });
    }
    Ok(total.expect("positive horizon"))
}

/// Plain sum of squared errors over steps and features.
pub fn edn_loss(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<f64, EdnError> {
    if pred.len() != truth.len() {
        return Err(EdnError::TargetLength {
            got: pred.len(),
            expected: truth.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p.0 - t.0).powi(2) + (p.1 - t.1).powi(2))
        .sum())
}

/// Batched inference: predictions for several agents in one forward pass.
pub fn predict_batch(
    histories: &[&DynamicHistory],
    goals: &[f64],
    store: &ParamStore,
    cfg: &EdnConfig,
) -> Result<Vec<TrajectoryPrediction>, EdnError> {
    assert_eq!(histories.len(), goals.len(), "one goal per history");
    let mut tape = Tape::new();
    let bound = BoundParams::bind_all(&mut tape, store);
    let context = taped_encode(&mut tape, &bound, histories, cfg)?;
    let outputs = taped_decode(&mut tape, &bound, context, histories, goals, cfg, None)?;
    let b = histories.len();
    let mut per_agent: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(cfg.t_f); b];
    for out in &outputs {
        let t = tape.value(*out);
        for (r, steps) in per_agent.iter_mut().enumerate() {
            steps.push((t.get(r, 0), t.get(r, 1)));
        }
    }
    Ok(per_agent
        .into_iter()
        .zip(histories.iter())
        .map(|(steps, h)| {
            let positions = reconstruct_positions(&steps, h.current_pos, cfg.representation);
            TrajectoryPrediction { steps, positions }
        })
        .collect())
}

/// Single-agent prediction.
pub fn predict(
    history: &DynamicHistory,
    goal: f64,
    store: &ParamStore,
    cfg: &EdnConfig,
) -> Result<TrajectoryPrediction, EdnError> {
    Ok(predict_batch(&[history], &[goal], store, cfg)?.remove(0))
}

#[derive(Clone, Debug)]
pub struct EdnSample {
    pub history: DynamicHistory,
    pub targets: Vec<(f64, f64)>,
    pub goal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub grad_clip: f64,
}

impl Default for EdnTrainConfig {
    fn default() -> Self {
        EdnTrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 11,
            shuffle: true,
            grad_clip: 5.0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EdnTrainLogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Minibatch Adam training with dropout; deterministic under a fixed seed.
pub fn train(
    dataset: &[EdnSample],
    store: &mut ParamStore,
    cfg: &EdnConfig,
    tc: &EdnTrainConfig,
) -> Result<Vec<EdnTrainLogRow>, EdnError> {
    use rand::seq::SliceRandom;
    if dataset.is_empty() {
        return Err(EdnError::EmptyDataset);
    }
    for s in dataset {
        if s.targets.len() != cfg.t_f {
            return Err(EdnError::TargetLength {
                got: s.targets.len(),
                expected: cfg.t_f,
            });
        }
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x9E37_79B9));
    let mut opt = crate::nn::Adam::new(tc.learning_rate);
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(tc.batch_size) {
            let histories: Vec<&DynamicHistory> =
                chunk.iter().map(|&i| &dataset[i].history).collect();
            let goals: Vec<f64> = chunk.iter().map(|&i| dataset[i].goal).collect();
            let targets: Vec<Vec<(f64, f64)>> =
                chunk.iter().map(|&i| dataset[i].targets.clone()).collect();

            let mut tape = Tape::new();
            let bound = BoundParams::bind_all(&mut tape, store);
            let context = taped_encode(&mut tape, &bound, &histories, cfg)?;
            let outputs = taped_decode(
                &mut tape,
                &bound,
                context,
                &histories,
                &goals,
                cfg,
                Some(&mut dropout_rng),
            )?;
            let total = taped_loss(&mut tape, &outputs, &targets, chunk.len())?;
            let loss = tape.value(total).item() / chunk.len() as f64;
            let grads = tape.backward(total);
            let mut named = bound.gather(&tape, &grads);
            let scale = 1.0 / chunk.len() as f64;
            for g in named.values_mut() {
                *g = g.map(|v| v * scale);
            }
            crate::sgn::clip_gradients(&mut named, tc.grad_clip);
            opt.step(store, &named);
            step += 1;
            log.push(EdnTrainLogRow { step, epoch, loss });
        }
    }
    Ok(log)
}

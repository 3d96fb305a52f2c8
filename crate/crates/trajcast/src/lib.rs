//! Hierarchical driving-behavior prediction for multi-agent traffic scenes.
//!
//! The pipeline mirrors how a driver reasons about an intersection:
//!
//! 1. [`geometry`] — reference-line geometry, Frenet projections, conflict
//!    points, and DTW-based reference-line assignment.
//! 2. [`scene`] — interacting-agent selection and extraction of dynamic
//!    insertion areas (DIAs) into a semantic graph.
//! 3. [`sgn`] — a graph-attention intention network producing per-DIA
//!    insertion probabilities and goal-state mixtures.
//! 4. [`edn`] — a GRU encoder-decoder generating trajectory increments
//!    conditioned on the goal state.
//! 5. [`adapt`] — per-agent online adaptation of selected decoder layers with
//!    a forgetting-factor extended Kalman filter.
//! 6. [`baselines`] — IDM, FSM-D/FSM-T, and constant-velocity rollouts for
//!    comparison.
//! 7. [`harness`] — synthetic scenarios, dataset ingestion, training,
//!    evaluation, and the CLI entry points.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod geometry;
pub mod edn;
pub mod scene;
pub mod sgn;
pub mod nn;

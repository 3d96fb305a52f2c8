//! Layer building blocks composed from tape primitives.
//!
//! GRU gate layout in the `3H`-wide stacked weights is `[update | reset |
//! candidate]`, and the update gate carries the *old* hidden state:
//! `h' = (1 - z) * n + z * h`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{params::ParamStore, NnError};

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
    LeakyRelu,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.01;

/// Tape handles for one dense layer.
#[derive(Copy, Clone)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl DenseVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self, NnError> {
        Ok(DenseVars {
            w: store.bind(tape, &format!("{prefix}.w"))?,
            b: store.bind(tape, &format!("{prefix}.b"))?,
        })
    }
}

/// Tape handles for one GRU cell (stacked `[z|r|n]` weights).
#[derive(Copy, Clone)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl GruVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self, NnError> {
        Ok(GruVars {
            w_ih: store.bind(tape, &format!("{prefix}.w_ih"))?,
            w_hh: store.bind(tape, &format!("{prefix}.w_hh"))?,
            b_ih: store.bind(tape, &format!("{prefix}.b_ih"))?,
            b_hh: store.bind(tape, &format!("{prefix}.b_hh"))?,
        })
    }

    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.value(self.w_hh).rows()
    }
}

/// `activation(x @ w + b)` with `x: BxI`, `w: IxO`, `b: 1xO`.
pub fn dense(
    tape: &mut Tape,
    x: Var,
    layer: DenseVars,
    activation: Activation,
) -> Result<Var, NnError> {
    let (xs, ws, bs) = (
        tape.value(x).shape(),
        tape.value(layer.w).shape(),
        tape.value(layer.b).shape(),
    );
    if xs[1] != ws[0] || bs != [1, ws[1]] {
        return Err(NnError::ShapeMismatch {
            op: "dense".into(),
            detail: format!("x {xs:?} @ w {ws:?} + b {bs:?}"),
        });
    }
    let lin = tape.matmul(x, layer.w);
    let pre = tape.add_row(lin, layer.b);
    Ok(match activation {
        Activation::None => pre,
        Activation::Tanh => tape.tanh(pre),
        Activation::LeakyRelu => tape.leaky_relu(pre, LEAKY_SLOPE),
        Activation::Sigmoid => tape.sigmoid(pre),
    })
}

/// One gated-recurrent-unit step: `x: BxI`, `h: BxH` -> `BxH`.
pub fn gru_step(tape: &mut Tape, x: Var, h: Var, cell: GruVars) -> Result<Var, NnError> {
    let hidden = cell.hidden(tape);
    let (xs, hs) = (tape.value(x).shape(), tape.value(h).shape());
    let wis = tape.value(cell.w_ih).shape();
    if xs[1] != wis[0] || wis[1] != 3 * hidden || hs != [xs[0], hidden] {
        return Err(NnError::ShapeMismatch {
            op: "gru_step".into(),
            detail: format!("x {xs:?}, h {hs:?}, w_ih {wis:?}, hidden {hidden}"),
        });
    }
    let gi = tape.matmul(x, cell.w_ih);
    let gi = tape.add_row(gi, cell.b_ih);
    Ok(tape.gru_gates(gi, h, cell.w_hh, cell.b_hh))
}

/// Unroll a GRU over `t_steps` with inputs stacked step-major as a
/// `(t_steps * B) x I` matrix, returning the final hidden state.
///
/// The input-side matmul for all steps runs as a single product, which is
/// what makes long histories cheap.
pub fn gru_sequence(
    tape: &mut Tape,
    stacked: Var,
    t_steps: usize,
    batch: usize,
    cell: GruVars,
) -> Result<Var, NnError> {
    let hidden = cell.hidden(tape);
    let shape = tape.value(stacked).shape();
    if shape[0] != t_steps * batch || shape[1] != tape.value(cell.w_ih).rows() {
        return Err(NnError::ShapeMismatch {
            op: "gru_sequence".into(),
            detail: format!(
                "stacked {shape:?}, expected {}x{}",
                t_steps * batch,
                tape.value(cell.w_ih).rows()
            ),
        });
    }
    let gi_all = tape.matmul(stacked, cell.w_ih);
    let gi_all = tape.add_row(gi_all, cell.b_ih);
    let mut h = tape.constant(Tensor::zeros(batch, hidden));
    for k in 0..t_steps {
        let gi = tape.slice_rows(gi_all, k * batch, (k + 1) * batch);
        h = tape.gru_gates(gi, h, cell.w_hh, cell.b_hh);
    }
    Ok(h)
}

/// Row-wise softmax, max-shifted for stability. The shift is a constant and
/// cancels exactly, so gradients are unaffected.
pub fn softmax_rows(tape: &mut Tape, logits: Var) -> Var {
    let t = tape.value(logits);
    assert!(!t.is_empty(), "softmax on empty tensor");
    let mut shift = Tensor::zeros(t.rows(), 1);
    for r in 0..t.rows() {
        let m = t.row_slice(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.set(r, 0, -m);
    }
    let shift = tape.constant(shift);
    let shifted = tape.add_col(logits, shift);
    let e = tape.exp(shifted);
    let denom = tape.sum_rows(e);
    tape.div_col(e, denom)
}

/// Column-wise softmax (normalizes each column to sum 1).
pub fn softmax_cols(tape: &mut Tape, logits: Var) -> Var {
    let t = tape.value(logits);
    assert!(!t.is_empty(), "softmax on empty tensor");
    let mut shift = Tensor::zeros(1, t.cols());
    for c in 0..t.cols() {
        let mut m = f64::NEG_INFINITY;
        for r in 0..t.rows() {
            m = m.max(t.get(r, c));
        }
        shift.set(0, c, -m);
    }
    let shift = tape.constant(shift);
    let shifted = tape.add_row(logits, shift);
    let e = tape.exp(shifted);
    let denom = tape.sum_cols(e);
    tape.div_row(e, denom)
}

/// Plain softmax over a slice, for untaped callers.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>, NnError> {
    if values.is_empty() {
        return Err(NnError::EmptyInput("softmax".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite {
            context: "softmax input".into(),
        });
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise log-sum-exp: `RxC -> Rx1`, max-shifted.
pub fn logsumexp_rows(tape: &mut Tape, a: Var) -> Var {
    let t = tape.value(a);
    let mut shift = Tensor::zeros(t.rows(), 1);
    for r in 0..t.rows() {
        let m = t.row_slice(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.set(r, 0, -m);
    }
    let neg_max = tape.constant(shift.clone());
    let shifted = tape.add_col(a, neg_max);
    let e = tape.exp(shifted);
    let s = tape.sum_rows(e);
    let l = tape.ln(s);
    let max_back = tape.constant(shift.map(|x| -x));
    tape.add(l, max_back)
}

/// Taped negative log-likelihood of 1-D targets under per-row Gaussian
/// mixtures, summed over rows.
///
/// `logits`, `mu`, `log_sigma` are `RxK`; `targets` is an `Rx1` constant.
/// Mixture weights come from a row softmax and `sigma = exp(log_sigma)`.
pub fn gmm_nll_rows(tape: &mut Tape, logits: Var, mu: Var, log_sigma: Var, targets: Var) -> Var {
    let lse = logsumexp_rows(tape, logits);
    let neg_lse = tape.neg(lse);
    let log_alpha = tape.add_col(logits, neg_lse);

    let neg_mu = tape.neg(mu);
    let diff = tape.add_col(neg_mu, targets); // g - mu
    let neg_ls = tape.neg(log_sigma);
    let inv_sigma = tape.exp(neg_ls);
    let z = tape.mul(diff, inv_sigma);
    let z2 = tape.mul(z, z);
    let z2h = tape.scale(z2, -0.5);
    let log_n_unnorm = tape.sub(z2h, log_sigma);
    let log_n = tape.offset(log_n_unnorm, -0.5 * LN_2PI);

    let inner = tape.add(log_alpha, log_n);
    let log_mix = logsumexp_rows(tape, inner);
    let nll = tape.neg(log_mix);
    tape.sum_all(nll)
}

/// Untaped Gaussian-mixture negative log-likelihood of a scalar target.
///
/// `weights` must come from a softmax (positive, sum 1) and `sigmas` must be
/// positive; this is the value-level counterpart of [`gmm_nll_rows`].
pub fn gmm_nll(g: f64, components: &[(f64, f64, f64)]) -> Result<f64, NnError> {
    if components.is_empty() {
        return Err(NnError::EmptyInput("gmm_nll".into()));
    }
    for (a, m, s) in components {
        if !(a.is_finite() && m.is_finite() && s.is_finite()) || *s <= 0.0 {
            return Err(NnError::NonFinite {
                context: "gmm_nll parameters".into(),
            });
        }
    }
    let mut terms: Vec<f64> = Vec::with_capacity(components.len());
    for (a, m, s) in components {
        let z = (g - m) / s;
        terms.push(a.ln() - s.ln() - 0.5 * LN_2PI - 0.5 * z * z);
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - mx).exp()).sum();
    Ok(-(mx + sum.ln()))
}

/// Mean of a 1-D Gaussian mixture.
pub fn gmm_mean(components: &[(f64, f64, f64)]) -> f64 {
    components.iter().map(|(a, m, _)| a * m).sum()
}

/// Inverted-dropout mask constant: entries are `0` or `1/keep`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl rand::RngExt) -> Tensor {
    let keep = 1.0 - rate;
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    t
}

//! Transducer decoder: LSTM predictor, feed-forward joiner, exact
//! forward-backward loss with analytic gradients, and greedy decoding.

use ndarray::{Array3, ArrayView3};

use crate::autodiff::{accumulate, reshaped, Tape, Var};
use crate::error::{AvsrError, Result};

mod decoder;

pub use decoder::{
    greedy_decode, joiner_forward, joiner_logits_tape, predictor_forward, predictor_init_state,
    predictor_step, predictor_tape, DecodeConfig, PredictorInput, PredictorState,
};

pub const BLANK_ID: u32 = 0;

/// Output symbol inventory; id 0 is the blank.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(non_blank: Vec<String>) -> Self {
        let mut symbols = vec!["<blank>".to_string()];
        symbols.extend(non_blank);
        Vocabulary { symbols }
    }

    /// The 16-symbol vocabulary of the synthetic corpus plus blank.
    pub fn desk() -> Self {
        Vocabulary::new(crate::data::symbol_names())
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: u32) -> &str {
        &self.symbols[id as usize]
    }

    pub fn id_of(&self, sym: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == sym).map(|i| i as u32)
    }

    /// Space-separated symbols to label ids; blank never appears.
    pub fn encode(&self, transcript: &str) -> Result<Vec<u32>> {
        transcript
            .split_whitespace()
            .map(|tok| {
                self.id_of(tok)
                    .filter(|&id| id != BLANK_ID)
                    .ok_or_else(|| AvsrError::Format(format!("unknown symbol {tok:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `T x (U+1) x V` log-probability lattice; every `(t,u)` slice is a
/// normalized log-distribution.
#[derive(Debug, Clone)]
pub struct JointLattice {
    pub log_probs: Array3<f64>,
}

impl JointLattice {
    pub fn new(log_probs: Array3<f64>) -> Result<Self> {
        for t in 0..log_probs.shape()[0] {
            for u in 0..log_probs.shape()[1] {
                let row = log_probs.slice(ndarray::s![t, u, ..]);
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = mx + row.mapv(|v| (v - mx).exp()).sum().ln();
                if lse.abs() > 1e-5 {
                    return Err(AvsrError::ShapeMismatch(format!(
                        "lattice slice ({t},{u}) not normalized: logsumexp = {lse}"
                    )));
                }
            }
        }
        Ok(JointLattice { log_probs })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.log_probs.shape();
        (s[0], s[1], s[2])
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_labels(dims: (usize, usize, usize), labels: &[u32]) -> Result<()> {
    let (t, u1, v) = dims;
    if t < 1 {
        return Err(AvsrError::LabelTooLong);
    }
    if labels.len() + 1 != u1 {
        return Err(AvsrError::ShapeMismatch(format!(
            "lattice has {} label rows but {} labels given",
            u1 - 1,
            labels.len()
        )));
    }
    for &y in labels {
        if y == BLANK_ID || y as usize >= v {
            return Err(AvsrError::InvalidLabel(y));
        }
    }
    Ok(())
}

/// Shared forward-backward core. Returns `(-log P(labels), d loss / d log_probs)`.
///
/// Forward recursion over the `T x (U+1)` grid:
/// `alpha(t,u) = logaddexp(alpha(t-1,u) + blank(t-1,u), alpha(t,u-1) + y_u(t,u-1))`
/// with `alpha(0,0) = 0`; the loss is `-(alpha(T-1,U) + blank(T-1,U))`.
/// Gradients come from alpha/beta transition occupancies.
fn forward_backward(logp: ArrayView3<f64>, labels: &[u32]) -> Result<(f64, Array3<f64>)> {
    let dims = (logp.shape()[0], logp.shape()[1], logp.shape()[2]);
    check_labels(dims, labels)?;
    let (t_len, u1, _v) = dims;
    let u_len = u1 - 1;
    let blank = BLANK_ID as usize;

    let mut a = ndarray::Array2::<f64>::from_elem((t_len, u1), f64::NEG_INFINITY);
    a[(0, 0)] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            let mut acc = if t == 0 && u == 0 { 0.0 } else { f64::NEG_INFINITY };
            if t > 0 {
                acc = logaddexp(acc, a[(t - 1, u)] + logp[(t - 1, u, blank)]);
            }
            if u > 0 {
                let y = labels[u - 1] as usize;
                acc = logaddexp(acc, a[(t, u - 1)] + logp[(t, u - 1, y)]);
            }
            if !(t == 0 && u == 0) {
                a[(t, u)] = acc;
            }
        }
    }
    let log_z = a[(t_len - 1, u_len)] + logp[(t_len - 1, u_len, blank)];
    let loss = -log_z;

    // beta(t,u): log-probability of completing from (t,u) to the exit.
    let mut b = ndarray::Array2::<f64>::from_elem((t_len, u1), f64::NEG_INFINITY);
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            let blank_next = if t + 1 < t_len {
                b[(t + 1, u)]
            } else if u == u_len {
                0.0 // final blank exits the lattice
            } else {
                f64::NEG_INFINITY
            };
            let mut acc = logp[(t, u, blank)] + blank_next;
            if u < u_len {
                let y = labels[u] as usize;
                acc = logaddexp(acc, logp[(t, u, y)] + b[(t, u + 1)]);
            }
            b[(t, u)] = acc;
        }
    }
    debug_assert!((b[(0, 0)] - log_z).abs() < 1e-6 || !log_z.is_finite());

    let mut grad = Array3::<f64>::zeros((t_len, u1, dims.2));
    for t in 0..t_len {
        for u in 0..u1 {
            let blank_next = if t + 1 < t_len {
                b[(t + 1, u)]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let occ_blank = a[(t, u)] + logp[(t, u, blank)] + blank_next - log_z;
            if occ_blank > f64::NEG_INFINITY {
                grad[(t, u, blank)] = -occ_blank.exp();
            }
            if u < u_len {
                let y = labels[u] as usize;
                let occ = a[(t, u)] + logp[(t, u, y)] + b[(t, u + 1)] - log_z;
                if occ > f64::NEG_INFINITY {
                    grad[(t, u, y)] += -occ.exp();
                }
            }
        }
    }
    Ok((loss, grad))
}

/// `-log P(labels | lattice)` via the forward recursion, in log space.
pub fn rnnt_loss(lattice: &JointLattice, labels: &[u32]) -> Result<f64> {
    forward_backward(lattice.log_probs.view(), labels).map(|(l, _)| l)
}

/// Gradient of [`rnnt_loss`] w.r.t. the lattice log-probabilities.
pub fn rnnt_grad(lattice: &JointLattice, labels: &[u32]) -> Result<Array3<f64>> {
    forward_backward(lattice.log_probs.view(), labels).map(|(_, g)| g)
}

/// Tape node computing the transducer loss from a flattened
/// `(T*(U+1), V)` log-prob matrix. Backward injects the analytic gradient.
pub fn rnnt_loss_node(
    tape: &mut Tape,
    logp_flat: Var,
    t_len: usize,
    labels: &[u32],
) -> Result<Var> {
    let v = tape.value(logp_flat).shape()[1];
    let u1 = labels.len() + 1;
    let logp3 = reshaped(tape.value(logp_flat), &[t_len, u1, v])
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let (loss, grad) = forward_backward(logp3.view(), labels)?;
    let grad_flat = reshaped(&grad.into_dyn(), &[t_len * u1, v]);
    Ok(tape.push_op(
        ndarray::arr0(loss).into_dyn(),
        Box::new(move |_, g, slots| {
            let gs = g.sum();
            accumulate(&mut slots[logp_flat.0], grad_flat.mapv(|x| x * gs));
        }),
    ))
}

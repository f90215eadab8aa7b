//! Predictor and joiner networks plus greedy decoding.
//!
//! The predictor is a two-layer LSTM over label prefixes; row 0 of its output
//! conditions on a learned start embedding, row `u` on the first `u` labels.
//! Both a tape-recorded version (training) and a plain inference version
//! (decoding) exist; a unit test pins them to each other. Gate layout is
//! `[input, forget, cell, output]` in both.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::error::{AvsrError, Result};
use crate::model::{ModelConfig, ParamVars, ParameterTree};

use super::BLANK_ID;

/// Per-layer `(hidden, cell)` vectors.
#[derive(Debug, Clone)]
pub struct PredictorState {
    pub hidden: Vec<Array1<f64>>,
    pub cell: Vec<Array1<f64>>,
}

pub fn predictor_init_state(cfg: &ModelConfig) -> PredictorState {
    PredictorState {
        hidden: vec![Array1::zeros(cfg.pred_hidden); 2],
        cell: vec![Array1::zeros(cfg.pred_hidden); 2],
    }
}

/// What the predictor consumes at one step.
#[derive(Debug, Clone, Copy)]
pub enum PredictorInput {
    /// Learned start-of-sequence embedding.
    Start,
    Label(u32),
}

fn lstm_cell_infer(
    w_ih: ArrayView2<f64>,
    w_hh: ArrayView2<f64>,
    b_ih: ArrayView1<f64>,
    b_hh: ArrayView1<f64>,
    x: ArrayView1<f64>,
    h: &Array1<f64>,
    c: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let hidden = h.len();
    let gates = x.dot(&w_ih) + h.dot(&w_hh) + &b_ih + &b_hh;
    let mut h_new = Array1::<f64>::zeros(hidden);
    let mut c_new = Array1::<f64>::zeros(hidden);
    for j in 0..hidden {
        let i_g = sigmoid_scalar(gates[j]);
        let f_g = sigmoid_scalar(gates[hidden + j]);
        let g_g = gates[2 * hidden + j].tanh();
        let o_g = sigmoid_scalar(gates[3 * hidden + j]);
        let cj = f_g * c[j] + i_g * g_g;
        c_new[j] = cj;
        h_new[j] = o_g * cj.tanh();
    }
    (h_new, c_new)
}

fn embedding_input(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    input: PredictorInput,
) -> Result<Array1<f64>> {
    match input {
        PredictorInput::Start => Ok(tree.get2("predictor/start").unwrap().row(0).to_owned()),
        PredictorInput::Label(id) => {
            if id == BLANK_ID || id as usize >= cfg.vocab_size {
                return Err(AvsrError::InvalidLabel(id));
            }
            Ok(tree.get2("predictor/embedding").unwrap().row(id as usize).to_owned())
        }
    }
}

/// One stateful predictor step. Feeding the same inputs step by step equals
/// one whole-sequence [`predictor_forward`] call bit-exactly.
pub fn predictor_step(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    input: PredictorInput,
    state: &PredictorState,
) -> Result<(Array1<f64>, PredictorState)> {
    let x = embedding_input(tree, cfg, input)?;
    let mut new_state = state.clone();
    let mut layer_in = x;
    for layer in 0..2 {
        let p = format!("predictor/lstm{layer}");
        let (h, c) = lstm_cell_infer(
            tree.get2(&format!("{p}/w_ih")).unwrap(),
            tree.get2(&format!("{p}/w_hh")).unwrap(),
            tree.get(&format!("{p}/b_ih"))
                .unwrap()
                .view()
                .into_dimensionality()
                .unwrap(),
            tree.get(&format!("{p}/b_hh"))
                .unwrap()
                .view()
                .into_dimensionality()
                .unwrap(),
            layer_in.view(),
            &state.hidden[layer],
            &state.cell[layer],
        );
        new_state.hidden[layer] = h.clone();
        new_state.cell[layer] = c;
        layer_in = h;
    }
    Ok((layer_in, new_state))
}

/// Whole-prefix predictor outputs: `(U+1, pred_hidden)`, row 0 for the empty
/// prefix.
pub fn predictor_forward(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    prefix: &[u32],
) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((prefix.len() + 1, cfg.pred_hidden));
    let mut state = predictor_init_state(cfg);
    let (h, s) = predictor_step(tree, cfg, PredictorInput::Start, &state)?;
    out.row_mut(0).assign(&h);
    state = s;
    for (u, &label) in prefix.iter().enumerate() {
        let (h, s) = predictor_step(tree, cfg, PredictorInput::Label(label), &state)?;
        out.row_mut(u + 1).assign(&h);
        state = s;
    }
    Ok(out)
}

/// Joiner logits for one `(enc_t, pred_u)` pair:
/// `out_w . tanh(hidden_w . (enc_proj(enc) + pred_proj(pred)) + b) + b_out`.
pub fn joiner_forward(
    tree: &ParameterTree,
    _cfg: &ModelConfig,
    enc_t: ArrayView1<f64>,
    pred_u: ArrayView1<f64>,
) -> Array1<f64> {
    let e = enc_t.dot(&tree.get2("joiner/enc_proj/weight").unwrap())
        + tree
            .get("joiner/enc_proj/bias")
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
    let p = pred_u.dot(&tree.get2("joiner/pred_proj/weight").unwrap())
        + tree
            .get("joiner/pred_proj/bias")
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
    let joint = e + p;
    let h = (joint.dot(&tree.get2("joiner/hidden/weight").unwrap())
        + tree
            .get("joiner/hidden/bias")
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap())
    .mapv(f64::tanh);
    h.dot(&tree.get2("joiner/out/weight").unwrap())
        + tree
            .get("joiner/out/bias")
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
}

/// Greedy transducer decoding controls.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_symbols_per_frame: 10,
        }
    }
}

/// Standard greedy transducer decoding: at each frame, repeatedly take the
/// argmax; emit non-blanks and advance the predictor, move to the next frame
/// on blank. The per-frame cap bounds the total number of joiner calls by
/// `T * max_symbols_per_frame`.
pub fn greedy_decode(
    encoded: ArrayView2<f64>,
    tree: &ParameterTree,
    cfg: &ModelConfig,
    dcfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    let mut hyp = Vec::new();
    let init = predictor_init_state(cfg);
    let (mut pred_out, mut pred_state) = predictor_step(tree, cfg, PredictorInput::Start, &init)?;
    for t in 0..encoded.nrows() {
        let mut emitted = 0usize;
        loop {
            let logits = joiner_forward(tree, cfg, encoded.row(t), pred_out.view());
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in logits.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            if best as u32 == BLANK_ID {
                break;
            }
            hyp.push(best as u32);
            let (h, s) = predictor_step(
                tree,
                cfg,
                PredictorInput::Label(best as u32),
                &pred_state,
            )?;
            pred_out = h;
            pred_state = s;
            emitted += 1;
            if emitted >= dcfg.max_symbols_per_frame {
                break;
            }
        }
    }
    Ok(hyp)
}

// ---- tape-recorded versions for training ---------------------------------

fn lstm_cell_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    hidden: usize,
    x: Var,
    h: Var,
    c: Var,
) -> (Var, Var) {
    let xw = tape.matmul(x, pv.var(&format!("{prefix}/w_ih")));
    let hw = tape.matmul(h, pv.var(&format!("{prefix}/w_hh")));
    let s = tape.add(xw, hw);
    let s = tape.add_row(s, pv.var(&format!("{prefix}/b_ih")));
    let gates = tape.add_row(s, pv.var(&format!("{prefix}/b_hh")));
    let i_g = tape.slice_cols(gates, 0, hidden);
    let i_g = tape.sigmoid(i_g);
    let f_g = tape.slice_cols(gates, hidden, hidden);
    let f_g = tape.sigmoid(f_g);
    let g_g = tape.slice_cols(gates, 2 * hidden, hidden);
    let g_g = tape.tanh(g_g);
    let o_g = tape.slice_cols(gates, 3 * hidden, hidden);
    let o_g = tape.sigmoid(o_g);
    let fc = tape.mul(f_g, c);
    let ig = tape.mul(i_g, g_g);
    let c_new = tape.add(fc, ig);
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o_g, ct);
    (h_new, c_new)
}

/// Predictor outputs `(U+1, pred_hidden)` recorded on a tape.
pub fn predictor_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    labels: &[u32],
) -> Result<Var> {
    for &y in labels {
        if y == BLANK_ID || y as usize >= cfg.vocab_size {
            return Err(AvsrError::InvalidLabel(y));
        }
    }
    let hidden = cfg.pred_hidden;
    let start = pv.var("predictor/start");
    let mut inputs = vec![start];
    if !labels.is_empty() {
        let ids: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        let emb = tape.embedding_rows(pv.var("predictor/embedding"), &ids);
        for u in 0..labels.len() {
            inputs.push(tape.slice_rows(emb, u, 1));
        }
    }
    let mut h0 = tape.leaf2(Array2::zeros((1, hidden)));
    let mut c0 = tape.leaf2(Array2::zeros((1, hidden)));
    let mut h1 = tape.leaf2(Array2::zeros((1, hidden)));
    let mut c1 = tape.leaf2(Array2::zeros((1, hidden)));
    let mut rows = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (nh0, nc0) = lstm_cell_tape(tape, pv, "predictor/lstm0", hidden, x, h0, c0);
        h0 = nh0;
        c0 = nc0;
        let (nh1, nc1) = lstm_cell_tape(tape, pv, "predictor/lstm1", hidden, h0, h1, c1);
        h1 = nh1;
        c1 = nc1;
        rows.push(h1);
    }
    Ok(tape.concat_rows(&rows))
}

/// Full joint lattice on a tape: `(T*(U+1), V)` log-probabilities.
pub fn joiner_logits_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    encoded: Var,
    pred: Var,
) -> Var {
    let t_len = tape.value(encoded).shape()[0];
    let u1 = tape.value(pred).shape()[0];
    let e = tape.linear(encoded, pv.var("joiner/enc_proj/weight"), pv.var("joiner/enc_proj/bias"));
    let p = tape.linear(pred, pv.var("joiner/pred_proj/weight"), pv.var("joiner/pred_proj/bias"));
    let joint = tape.outer_add(e, p); // (T, U+1, J)
    let flat = tape.reshape(joint, &[t_len * u1, cfg.joiner_dim]);
    let h = tape.linear(flat, pv.var("joiner/hidden/weight"), pv.var("joiner/hidden/bias"));
    let h = tape.tanh(h);
    let logits = tape.linear(h, pv.var("joiner/out/weight"), pv.var("joiner/out/bias"));
    tape.log_softmax(logits)
}

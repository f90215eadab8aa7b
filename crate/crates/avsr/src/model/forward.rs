//! Forward passes for the front-ends, fusion, encoder, and MLM head. All
//! functions record onto a [`Tape`], so reverse-mode gradients come for free.

use ndarray::{Array2, Array3, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::data::VideoSequence;
use crate::dsp::FeatureSequence;
use crate::error::{AvsrError, Result};

use super::{ModalityDecision, ModelConfig, ParamVars};

const LN_EPS: f64 = 1e-6;
const NEG_MASK: f64 = -1e30;

/// 100 Hz log-mel frames to 25 Hz encoder features: two stride-(2,2) convs
/// with ReLU, flatten, linear projection to `d_model`.
pub fn audio_frontend_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    feat: &FeatureSequence,
) -> Result<Var> {
    if !pv.has("audio_frontend/conv1/kernel") {
        return Err(AvsrError::InvalidConfig(
            "parameters missing audio_frontend".into(),
        ));
    }
    let t = feat.num_frames();
    if t == 0 {
        return Ok(tape.leaf2(Array2::zeros((0, cfg.d_model))));
    }
    let d_mel = feat.frames.ncols();
    let x = tape.leaf(
        feat.frames
            .clone()
            .into_shape_with_order(IxDyn(&[1, t, d_mel, 1]))
            .unwrap(),
    );
    let c1 = tape.conv2d_same(
        x,
        pv.var("audio_frontend/conv1/kernel"),
        pv.var("audio_frontend/conv1/bias"),
        (2, 2),
    );
    let c1 = tape.relu(c1);
    let c2 = tape.conv2d_same(
        c1,
        pv.var("audio_frontend/conv2/kernel"),
        pv.var("audio_frontend/conv2/bias"),
        (2, 2),
    );
    let c2 = tape.relu(c2);
    let t_out = t.div_ceil(4);
    let flat = tape.reshape(c2, &[t_out, cfg.audio_flatten_dim()]);
    Ok(tape.linear(
        flat,
        pv.var("audio_frontend/proj/weight"),
        pv.var("audio_frontend/proj/bias"),
    ))
}

/// 25 Hz video to `d_model` features: five (spatial stride-2, temporal)
/// conv pairs with ReLU, then global spatial average pooling. The frame
/// rate is untouched.
pub fn video_frontend_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    video: &VideoSequence,
) -> Result<Var> {
    if !pv.has("video_frontend/stage0/spatial/kernel") {
        return Err(AvsrError::InvalidConfig(
            "parameters missing video_frontend".into(),
        ));
    }
    if video.height() != cfg.video_size || video.width() != cfg.video_size {
        return Err(AvsrError::ShapeMismatch(format!(
            "video resolution {}x{} does not match configured {}x{}",
            video.height(),
            video.width(),
            cfg.video_size,
            cfg.video_size
        )));
    }
    let t = video.num_frames();
    if t == 0 {
        return Ok(tape.leaf2(Array2::zeros((0, cfg.d_model))));
    }
    let mut x = tape.leaf(video.to_float());
    let mut hw = cfg.video_size;
    for i in 0..5 {
        let cout = cfg.video_channels[i + 1];
        x = tape.conv2d_same(
            x,
            pv.var(&format!("video_frontend/stage{i}/spatial/kernel")),
            pv.var(&format!("video_frontend/stage{i}/spatial/bias")),
            (2, 2),
        );
        x = tape.relu(x);
        hw = hw.div_ceil(2);
        let flat = tape.reshape(x, &[t, hw * hw, cout]);
        let tconv = tape.conv1d_time_same(
            flat,
            pv.var(&format!("video_frontend/stage{i}/temporal/kernel")),
            pv.var(&format!("video_frontend/stage{i}/temporal/bias")),
        );
        let tconv = tape.relu(tconv);
        x = tape.reshape(tconv, &[t, hw, hw, cout]);
    }
    let flat = tape.reshape(x, &[t, hw * hw, cfg.d_model]);
    Ok(tape.spatial_mean(flat))
}

/// Elementwise sum of modality features after applying the zeroing decision.
/// Zeroed or absent branches are dropped from the graph entirely, so their
/// gradients are exactly zero. Lengths may differ by at most one frame; the
/// longer branch is truncated.
pub fn fuse(
    tape: &mut Tape,
    audio: Option<Var>,
    video: Option<Var>,
    decision: ModalityDecision,
) -> Result<Var> {
    let audio = match decision {
        ModalityDecision::VideoOnly => None,
        _ => audio,
    };
    let video = match decision {
        ModalityDecision::AudioOnly => None,
        _ => video,
    };
    match (audio, video) {
        (Some(a), None) => Ok(a),
        (None, Some(v)) => Ok(v),
        (Some(a), Some(v)) => {
            let ta = tape.value(a).shape()[0];
            let tv = tape.value(v).shape()[0];
            if ta.abs_diff(tv) > 1 {
                return Err(AvsrError::ShapeMismatch(format!(
                    "modality length mismatch: audio {ta} vs video {tv} frames"
                )));
            }
            let t = ta.min(tv);
            let a = if ta > t {
                log::warn!("fuse: truncating audio features {ta} -> {t} frames");
                tape.slice_rows(a, 0, t)
            } else {
                a
            };
            let v = if tv > t {
                log::warn!("fuse: truncating video features {tv} -> {t} frames");
                tape.slice_rows(v, 0, t)
            } else {
                v
            };
            Ok(tape.add(a, v))
        }
        (None, None) => Err(AvsrError::InvalidConfig(
            "fuse: no modality left after zeroing".into(),
        )),
    }
}

fn half_ffn(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let h = tape.layer_norm(
        x,
        pv.var(&format!("{prefix}/ln_gamma")),
        pv.var(&format!("{prefix}/ln_beta")),
        LN_EPS,
    );
    let h = tape.linear(h, pv.var(&format!("{prefix}/w1")), pv.var(&format!("{prefix}/b1")));
    let h = tape.swish(h);
    let h = tape.linear(h, pv.var(&format!("{prefix}/w2")), pv.var(&format!("{prefix}/b2")));
    let h = tape.scale(h, 0.5);
    tape.add(x, h)
}

fn self_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    valid_len: usize,
) -> Var {
    let t = tape.value(x).shape()[0];
    let (heads, dh) = (cfg.num_heads, cfg.head_dim());
    let h = tape.layer_norm(
        x,
        pv.var(&format!("{prefix}/ln_gamma")),
        pv.var(&format!("{prefix}/ln_beta")),
        LN_EPS,
    );
    let split = |tape: &mut Tape, v: Var| {
        let r = tape.reshape(v, &[t, heads, dh]);
        tape.permute(r, &[1, 0, 2]) // (H, T, dh)
    };
    let q = tape.linear(h, pv.var(&format!("{prefix}/wq")), pv.var(&format!("{prefix}/bq")));
    let k = tape.linear(h, pv.var(&format!("{prefix}/wk")), pv.var(&format!("{prefix}/bk")));
    let v = tape.linear(h, pv.var(&format!("{prefix}/wv")), pv.var(&format!("{prefix}/bv")));
    let q = split(tape, q);
    let k = split(tape, k);
    let v = split(tape, v);
    let kt = tape.permute(k, &[0, 2, 1]); // (H, dh, T)
    let scores = tape.bmm(q, kt);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let bias = tape.relpos_expand(pv.var(&format!("{prefix}/relpos")), t);
    let scores = tape.add(scores, bias);
    let scores = if valid_len < t {
        // keys at padded positions are excluded from every query's context
        let mut m = Array3::<f64>::zeros((heads, t, t));
        for hh in 0..heads {
            for i in 0..t {
                for j in valid_len..t {
                    m[(hh, i, j)] = NEG_MASK;
                }
            }
        }
        let mask = tape.leaf(m.into_dyn());
        tape.add(scores, mask)
    } else {
        scores
    };
    let probs = tape.softmax_last3(scores);
    let ctx = tape.bmm(probs, v); // (H, T, dh)
    let ctx = tape.permute(ctx, &[1, 0, 2]);
    let ctx = tape.reshape(ctx, &[t, cfg.d_model]);
    let out = tape.linear(
        ctx,
        pv.var(&format!("{prefix}/wo")),
        pv.var(&format!("{prefix}/bo")),
    );
    tape.add(x, out)
}

fn conv_module(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    valid_len: usize,
) -> Var {
    let t = tape.value(x).shape()[0];
    let d = cfg.d_model;
    let h = tape.layer_norm(
        x,
        pv.var(&format!("{prefix}/ln_gamma")),
        pv.var(&format!("{prefix}/ln_beta")),
        LN_EPS,
    );
    let h = tape.linear(
        h,
        pv.var(&format!("{prefix}/pw1_weight")),
        pv.var(&format!("{prefix}/pw1_bias")),
    );
    let h = tape.glu(h);
    // zero padded rows so the depthwise conv cannot read them
    let h = if valid_len < t {
        let mut m = Array2::<f64>::ones((t, d));
        for i in valid_len..t {
            m.row_mut(i).fill(0.0);
        }
        let mask = tape.leaf(m.into_dyn());
        tape.mul(h, mask)
    } else {
        h
    };
    let h = tape.depthwise1d_same(
        h,
        pv.var(&format!("{prefix}/dw_kernel")),
        pv.var(&format!("{prefix}/dw_bias")),
    );
    let h = tape.layer_norm(
        h,
        pv.var(&format!("{prefix}/norm_gamma")),
        pv.var(&format!("{prefix}/norm_beta")),
        LN_EPS,
    );
    let h = tape.swish(h);
    let h = tape.linear(
        h,
        pv.var(&format!("{prefix}/pw2_weight")),
        pv.var(&format!("{prefix}/pw2_bias")),
    );
    tape.add(x, h)
}

/// Conformer encoder: per block, half-step FFN, relative-position
/// self-attention, depthwise conv module, half-step FFN, layer norm.
/// Positions at or beyond `valid_len` are masked out of attention.
pub fn encoder_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
    valid_len: usize,
) -> Result<Var> {
    if !pv.has("encoder/layer0/ffn1/w1") {
        return Err(AvsrError::InvalidConfig("parameters missing encoder".into()));
    }
    let t = tape.value(x).shape()[0];
    if valid_len > t {
        return Err(AvsrError::ShapeMismatch(format!(
            "valid_len {valid_len} exceeds sequence length {t}"
        )));
    }
    if t == 0 {
        return Ok(x);
    }
    let mut h = x;
    for i in 0..cfg.num_layers {
        let p = format!("encoder/layer{i}");
        h = half_ffn(tape, pv, &format!("{p}/ffn1"), h);
        h = self_attention(tape, pv, cfg, &format!("{p}/attn"), h, valid_len);
        h = conv_module(tape, pv, cfg, &format!("{p}/conv"), h, valid_len);
        h = half_ffn(tape, pv, &format!("{p}/ffn2"), h);
        h = tape.layer_norm(
            h,
            pv.var(&format!("{p}/out_ln_gamma")),
            pv.var(&format!("{p}/out_ln_beta")),
            LN_EPS,
        );
    }
    Ok(h)
}

/// Linear head over codebook logits for masked prediction.
pub fn mlm_head_forward(tape: &mut Tape, pv: &ParamVars, encoded: Var) -> Result<Var> {
    if !pv.has("mlm_head/weight") {
        return Err(AvsrError::InvalidConfig("parameters missing mlm_head".into()));
    }
    Ok(tape.linear(encoded, pv.var("mlm_head/weight"), pv.var("mlm_head/bias")))
}

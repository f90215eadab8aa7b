//! WER computation, clean/noisy condition evaluation, and checkpoint
//! selection.

use std::path::Path;

use ndarray::Ix2;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{self, ManifestRecord};
use crate::dsp::{self, MelConfig, Waveform};
use crate::error::{AvsrError, Result};
use crate::model::{
    audio_frontend_forward, encoder_forward, fuse, video_frontend_forward, ModalityDecision,
    ModelConfig, ParamVars, ParameterTree,
};
use crate::rng::substream;
use crate::rnnt::{greedy_decode, DecodeConfig, Vocabulary};

/// Evaluation condition for the audio input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Clean,
    /// Mix the frozen babble waveform at 0 dB.
    Babble0Db,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Babble0Db => "babble_0db",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "babble_0db" => Ok(Condition::Babble0Db),
            _ => Err(AvsrError::InvalidConfig(format!("unknown condition {s:?}"))),
        }
    }
}

/// Corpus-level WER report: pooled error counts over reference words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerReport {
    pub fn from_counts(substitutions: usize, deletions: usize, insertions: usize, ref_words: usize) -> Self {
        let wer = if ref_words == 0 {
            0.0
        } else {
            (substitutions + deletions + insertions) as f64 / ref_words as f64
        };
        WerReport {
            substitutions,
            deletions,
            insertions,
            ref_words,
            wer,
        }
    }
}

/// Minimal-cost alignment counts `(S, D, I)` with unit costs. Ties between
/// equal-cost alignments prefer substitutions, which fixes the S/D/I split:
/// given the cost and S, `D - I` is pinned by the length difference.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, usize, usize) {
    let (r, h) = (reference.len(), hypothesis.len());
    // cell = (cost, substitutions); minimize cost, then maximize S
    let mut prev: Vec<(usize, usize)> = (0..=h).map(|j| (j, 0)).collect();
    let mut curr = vec![(0usize, 0usize); h + 1];
    let better = |a: (usize, usize), b: (usize, usize)| -> (usize, usize) {
        if a.0 < b.0 || (a.0 == b.0 && a.1 > b.1) {
            a
        } else {
            b
        }
    };
    for i in 1..=r {
        curr[0] = (i, 0);
        for j in 1..=h {
            let (diag_cost, diag_s) = prev[j - 1];
            let mut best = if reference[i - 1] == hypothesis[j - 1] {
                (diag_cost, diag_s)
            } else {
                (diag_cost + 1, diag_s + 1)
            };
            best = better(best, (prev[j].0 + 1, prev[j].1)); // deletion
            best = better(best, (curr[j - 1].0 + 1, curr[j - 1].1)); // insertion
            curr[j] = best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let (cost, subs) = prev[h];
    // D - I = r - h and D + I = cost - S determine the split
    let d_minus_i = r as i64 - h as i64;
    let d_plus_i = (cost - subs) as i64;
    let deletions = ((d_plus_i + d_minus_i) / 2) as usize;
    let insertions = ((d_plus_i - d_minus_i) / 2) as usize;
    (subs, deletions, insertions)
}

/// One decoded utterance for the side-by-side dump.
#[derive(Debug, Clone)]
pub struct HypLine {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Everything a condition evaluation produces.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: WerReport,
    pub lines: Vec<HypLine>,
}

/// Decode every manifest record under a condition and pool error counts.
///
/// Babble offsets are drawn from a per-utterance substream of `seed`, so the
/// evaluation is deterministic. The clean condition performs no mixing at
/// all. AV parameter trees consume both modalities; audio-only trees bypass
/// fusion.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus_root: &Path,
    records: &[ManifestRecord],
    condition: Condition,
    babble: Option<&Waveform>,
    dcfg: &DecodeConfig,
    seed: u64,
) -> Result<EvalOutput> {
    if records.is_empty() {
        return Err(AvsrError::EmptyManifest);
    }
    if condition == Condition::Babble0Db && babble.is_none() {
        return Err(AvsrError::InvalidConfig(
            "babble condition requires a babble waveform".into(),
        ));
    }
    let mel = MelConfig::default();
    let use_video = tree.has_root("video_frontend");
    let results: Vec<Result<(usize, usize, usize, usize, HypLine)>> = records
        .par_iter()
        .map(|rec| {
            let (wave, video, transcript) = data::load_example(corpus_root, rec)?;
            let wave = match condition {
                Condition::Clean => wave,
                Condition::Babble0Db => {
                    let mut rng = substream(seed, &format!("eval/babble/{}", rec.id));
                    dsp::mix_at_snr(&wave, babble.unwrap(), 0.0, &mut rng)?
                }
            };
            let feat = dsp::compute_logmel(&wave, &mel)?;
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, tree);
            let audio = audio_frontend_forward(&mut tape, &pv, cfg, &feat)?;
            let fused = if use_video {
                let vfeat = video_frontend_forward(&mut tape, &pv, cfg, &video)?;
                fuse(&mut tape, Some(audio), Some(vfeat), ModalityDecision::Both)?
            } else {
                audio
            };
            let t_len = tape.value(fused).shape()[0];
            let encoded = encoder_forward(&mut tape, &pv, cfg, fused, t_len)?;
            let enc = tape
                .value(encoded)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let hyp_ids = greedy_decode(enc.view(), tree, cfg, dcfg)?;
            let ref_toks: Vec<String> =
                transcript.split_whitespace().map(|s| s.to_string()).collect();
            let hyp_toks: Vec<String> = hyp_ids
                .iter()
                .map(|&id| vocab.symbol(id).to_string())
                .collect();
            let (s, d, i) = edit_distance(&ref_toks, &hyp_toks);
            Ok((
                s,
                d,
                i,
                ref_toks.len(),
                HypLine {
                    id: rec.id.clone(),
                    reference: ref_toks.join(" "),
                    hypothesis: hyp_toks.join(" "),
                },
            ))
        })
        .collect();
    let mut subs = 0;
    let mut dels = 0;
    let mut ins = 0;
    let mut words = 0;
    let mut lines = Vec::with_capacity(records.len());
    for r in results {
        let (s, d, i, w, line) = r?;
        subs += s;
        dels += d;
        ins += i;
        words += w;
        lines.push(line);
    }
    Ok(EvalOutput {
        report: WerReport::from_counts(subs, dels, ins, words),
        lines,
    })
}

/// Pick the checkpoint with the best mean of clean and noisy WER; ties go to
/// the earliest entry.
pub fn select_checkpoint<T>(reports: &[(T, WerReport, WerReport)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, clean, noisy)) in reports.iter().enumerate() {
        let avg = (clean.wer + noisy.wer) / 2.0;
        if best.is_none_or(|(_, b)| avg < b) {
            best = Some((i, avg));
        }
    }
    best.map(|(i, _)| i)
}

/// Report file: condition, counts, WER%, checkpoint id.
pub fn format_report(condition: Condition, report: &WerReport, ckpt_id: &str) -> String {
    format!(
        "condition={}\tS={}\tD={}\tI={}\tref_words={}\twer_pct={:.3}\tckpt={}\n",
        condition.as_str(),
        report.substitutions,
        report.deletions,
        report.insertions,
        report.ref_words,
        report.wer * 100.0,
        ckpt_id
    )
}

/// Side-by-side ref/hyp dump for debugging.
pub fn format_hyp_dump(lines: &[HypLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&format!("{}\tref\t{}\n{}\thyp\t{}\n", l.id, l.reference, l.id, l.hypothesis));
    }
    out
}

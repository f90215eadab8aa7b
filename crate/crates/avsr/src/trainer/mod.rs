//! Training orchestration: both pipeline stages, the baseline modes, the
//! audio-to-AV adaptation mode, optimization, and checkpointing with
//! selective parameter transfer.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{Tape, TensorD};
use crate::bestrq::{
    self, apply_audio_mask, apply_video_mask, init_quantizer, mask_at_target_rate, sample_mask,
    stack_frames, RandomQuantizer,
};
use crate::data::{self, VideoSequence};
use crate::dsp::{self, wav, FeatureSequence, MelConfig, SpecAugmentConfig, Waveform};
use crate::error::{AvsrError, Result};
use crate::eval::{self, Condition, WerReport};
use crate::model::{
    audio_frontend_forward, encoder_forward, fuse, init_params, mlm_head_forward,
    root_tensor_shapes, sample_modality_dropout, video_frontend_forward, ModalityDecision,
    ModelConfig, ParamVars, ParameterTree,
};
use crate::rng::substream;
use crate::rnnt::{joiner_logits_tape, predictor_tape, rnnt_loss_node, DecodeConfig, Vocabulary};

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CkptMeta};
pub use optim::{clip_global_norm, lr_at, optimizer_step, AdamConfig, AdamState, Schedule};

/// One quantizer is shared by every experiment; its seed is independent of
/// the run seed.
pub const DEFAULT_QUANTIZER_SEED: u64 = 1717;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    PretrainAudio,
    PretrainAv,
    FinetuneAv,
    FinetuneAudio,
    TfsAudio,
    TfsAv,
    AdaptAudioToAv,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::PretrainAudio => "pretrain_audio",
            TrainMode::PretrainAv => "pretrain_av",
            TrainMode::FinetuneAv => "finetune_av",
            TrainMode::FinetuneAudio => "finetune_audio",
            TrainMode::TfsAudio => "tfs_audio",
            TrainMode::TfsAv => "tfs_av",
            TrainMode::AdaptAudioToAv => "adapt_audio_to_av",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain_audio" => TrainMode::PretrainAudio,
            "pretrain_av" => TrainMode::PretrainAv,
            "finetune_av" => TrainMode::FinetuneAv,
            "finetune_audio" => TrainMode::FinetuneAudio,
            "tfs_audio" => TrainMode::TfsAudio,
            "tfs_av" => TrainMode::TfsAv,
            "adapt_audio_to_av" => TrainMode::AdaptAudioToAv,
            _ => return Err(AvsrError::InvalidConfig(format!("unknown mode {s:?}"))),
        })
    }

    pub fn is_pretrain(&self) -> bool {
        matches!(self, TrainMode::PretrainAudio | TrainMode::PretrainAv)
    }

    pub fn uses_video(&self) -> bool {
        matches!(
            self,
            TrainMode::PretrainAv
                | TrainMode::FinetuneAv
                | TrainMode::TfsAv
                | TrainMode::AdaptAudioToAv
        )
    }

    /// Component roots a mode is allowed to allocate.
    pub fn components(&self) -> Vec<&'static str> {
        let mut c = vec!["audio_frontend", "encoder"];
        if self.uses_video() {
            c.push("video_frontend");
        }
        if self.is_pretrain() {
            c.push("mlm_head");
        } else {
            c.push("predictor");
            c.push("joiner");
        }
        c
    }
}

/// Everything one training run needs, resolvable from a config file plus CLI
/// overrides.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub quantizer_seed: u64,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub spec_augment: bool,
    pub noise: bool,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub clean_prob: f64,
    pub modality_dropout: bool,
    pub eval_interval: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, model: ModelConfig) -> Self {
        // adaptation starts from a trained model; a hot schedule would wreck
        // it before the video branch contributes
        let (peak_lr, warmup_steps) = if mode == TrainMode::AdaptAudioToAv {
            (1e-3, 150)
        } else {
            (4e-3, 250)
        };
        TrainConfig {
            mode,
            model,
            batch_size: 8,
            steps: 500,
            warmup_steps,
            peak_lr,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            quantizer_seed: DEFAULT_QUANTIZER_SEED,
            mask_prob: bestrq::DEFAULT_MASK_PROB,
            mask_span: bestrq::DEFAULT_MASK_SPAN,
            spec_augment: true,
            noise: true,
            snr_lo: 0.0,
            snr_hi: 20.0,
            clean_prob: 0.4,
            modality_dropout: true,
            eval_interval: 100,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
        }
    }

    /// Full resolved-config echo; reproducing a run needs nothing else.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("mode".to_string(), self.mode.as_str().to_string()),
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("steps".to_string(), self.steps.to_string()),
            ("warmup_steps".to_string(), self.warmup_steps.to_string()),
            ("peak_lr".to_string(), self.peak_lr.to_string()),
            ("grad_clip".to_string(), self.grad_clip.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("quantizer_seed".to_string(), self.quantizer_seed.to_string()),
            ("mask_prob".to_string(), self.mask_prob.to_string()),
            ("mask_span".to_string(), self.mask_span.to_string()),
            ("spec_augment".to_string(), self.spec_augment.to_string()),
            ("noise".to_string(), self.noise.to_string()),
            ("snr_lo".to_string(), self.snr_lo.to_string()),
            ("snr_hi".to_string(), self.snr_hi.to_string()),
            ("clean_prob".to_string(), self.clean_prob.to_string()),
            ("modality_dropout".to_string(), self.modality_dropout.to_string()),
            ("eval_interval".to_string(), self.eval_interval.to_string()),
        ];
        kv.extend(self.model.to_kv());
        kv
    }

    /// Apply `key=value` overrides on top of the current values.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || AvsrError::InvalidConfig(format!("bad value for {key}: {value}"));
        match key {
            "mode" => self.mode = TrainMode::parse(value)?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "steps" => self.steps = value.parse().map_err(|_| bad())?,
            "warmup_steps" => self.warmup_steps = value.parse().map_err(|_| bad())?,
            "peak_lr" => self.peak_lr = value.parse().map_err(|_| bad())?,
            "grad_clip" => self.grad_clip = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "quantizer_seed" => self.quantizer_seed = value.parse().map_err(|_| bad())?,
            "mask_prob" => self.mask_prob = value.parse().map_err(|_| bad())?,
            "mask_span" => self.mask_span = value.parse().map_err(|_| bad())?,
            "spec_augment" => self.spec_augment = value.parse().map_err(|_| bad())?,
            "noise" => self.noise = value.parse().map_err(|_| bad())?,
            "snr_lo" => self.snr_lo = value.parse().map_err(|_| bad())?,
            "snr_hi" => self.snr_hi = value.parse().map_err(|_| bad())?,
            "clean_prob" => self.clean_prob = value.parse().map_err(|_| bad())?,
            "modality_dropout" => self.modality_dropout = value.parse().map_err(|_| bad())?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad())?,
            _ if key.starts_with("model.") => {
                let kv: BTreeMap<String, String> = self
                    .model
                    .to_kv()
                    .into_iter()
                    .chain([(key.to_string(), value.to_string())])
                    .collect();
                let get = move |k: &str| kv.get(k).cloned();
                self.model = ModelConfig::from_kv(&get)?;
            }
            _ => return Err(AvsrError::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

/// One utterance preloaded for training.
struct TrainUtt {
    feat_clean: FeatureSequence,
    wave: Waveform,
    video: Option<VideoSequence>,
    labels: Vec<u32>,
    quant_labels: Vec<u32>,
    target_len: usize,
}

fn load_split_utts(
    corpus_root: &Path,
    split: &str,
    want_video: bool,
    vocab: &Vocabulary,
) -> Result<Vec<TrainUtt>> {
    let records = data::read_manifest(&data::manifest_path(corpus_root, split))?;
    if records.is_empty() {
        return Err(AvsrError::EmptyManifest);
    }
    let mel = MelConfig::default();
    records
        .iter()
        .map(|rec| {
            let (wave, video, transcript) = data::load_example(corpus_root, rec)?;
            let feat_clean = dsp::compute_logmel(&wave, &mel)?;
            let labels = vocab.encode(&transcript)?;
            let target_len = feat_clean.num_frames() / bestrq::STACK;
            Ok(TrainUtt {
                feat_clean,
                wave,
                video: want_video.then_some(video),
                labels,
                quant_labels: Vec::new(),
                target_len,
            })
        })
        .collect()
}

fn load_babbles(corpus_root: &Path) -> Result<(Waveform, Vec<Waveform>)> {
    let noise_dir = corpus_root.join("noise");
    let eval = wav::read_wav(&noise_dir.join("babble_eval.wav"))?;
    let mut train = Vec::new();
    for i in 0..data::TRAIN_BABBLES {
        let p = noise_dir.join(format!("babble_train_{i}.wav"));
        if p.exists() {
            train.push(wav::read_wav(&p)?);
        }
    }
    Ok((eval, train))
}

fn metrics_writer(out_dir: &Path, append: bool) -> Result<std::fs::File> {
    let path = out_dir.join("metrics.txt");
    OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&path)
        .map_err(|e| AvsrError::io(&path, e))
}

fn sample_batch(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = substream(seed, &format!("batch/{step}"));
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

fn sum_grads(
    into: &mut BTreeMap<String, TensorD>,
    from: BTreeMap<String, TensorD>,
) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                into.insert(name, g);
            }
        }
    }
}

struct PretrainStepOut {
    nll_sum: f64,
    count: usize,
    hits: usize,
    grads: BTreeMap<String, TensorD>,
}

fn pretrain_utt(
    cfg: &TrainConfig,
    tree: &ParameterTree,
    utt: &TrainUtt,
    step: u64,
    pos: usize,
) -> Result<Option<PretrainStepOut>> {
    let t = utt.feat_clean.num_frames();
    if t == 0 || utt.target_len == 0 {
        return Ok(None);
    }
    let mut rng_mask = substream(cfg.seed, &format!("mask/{step}/{pos}"));
    let mask = sample_mask(t, cfg.mask_prob, cfg.mask_span, &mut rng_mask);
    let target_mask = mask_at_target_rate(&mask);
    let mut rng_fill = substream(cfg.seed, &format!("maskfill/{step}/{pos}"));
    let masked = apply_audio_mask(&utt.feat_clean, &mask, &mut rng_fill);

    let decision = if cfg.mode == TrainMode::PretrainAv && cfg.modality_dropout {
        let mut rng = substream(cfg.seed, &format!("mdrop/{step}/{pos}"));
        sample_modality_dropout(&mut rng)
    } else {
        ModalityDecision::Both
    };

    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, tree);
    let audio = if decision == ModalityDecision::VideoOnly {
        None
    } else {
        Some(audio_frontend_forward(&mut tape, &pv, &cfg.model, &masked)?)
    };
    let video_feats = match (&utt.video, cfg.mode) {
        (Some(video), TrainMode::PretrainAv) if decision != ModalityDecision::AudioOnly => {
            // mask the video over the same 25 Hz segments as the audio
            let mut vm = target_mask.clone();
            vm.resize(video.num_frames(), false);
            let mut rng_v = substream(cfg.seed, &format!("vmask/{step}/{pos}"));
            let masked_video = apply_video_mask(video, &vm, &mut rng_v);
            Some(video_frontend_forward(&mut tape, &pv, &cfg.model, &masked_video)?)
        }
        _ => None,
    };
    let fused = fuse(&mut tape, audio, video_feats, decision)?;
    let t_fused = tape.value(fused).shape()[0];
    let encoded = encoder_forward(&mut tape, &pv, &cfg.model, fused, t_fused)?;
    let logits = mlm_head_forward(&mut tape, &pv, encoded)?;
    let t_logit = tape.value(logits).shape()[0];
    let l = t_logit.min(utt.target_len);
    if l == 0 {
        return Ok(None);
    }
    let labels = &utt.quant_labels[..l];
    let tmask = &target_mask[..l];
    let count = tmask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let logits_l = tape.slice_rows(logits, 0, l);
    let logp = tape.log_softmax(logits_l);
    let nll = tape.masked_nll_sum(logp, labels, tmask);
    let nll_sum = tape.value(nll).sum();

    let mut hits = 0usize;
    {
        let lp = tape.value(logp);
        let lp2 = lp.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (i, (&y, &m)) in labels.iter().zip(tmask).enumerate() {
            if !m {
                continue;
            }
            let row = lp2.row(i);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == y as usize {
                hits += 1;
            }
        }
    }

    let grads = tape.backward(nll);
    Ok(Some(PretrainStepOut {
        nll_sum,
        count,
        hits,
        grads: pv.extract_grads(tree, &grads),
    }))
}

/// Outcome of a pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub steps_run: u64,
    pub empty_steps: u64,
    pub step0_loss: f64,
    pub final_loss: f64,
    pub final_masked_acc: f64,
    pub last_ckpt: PathBuf,
}

/// Stage-1 self-supervised training (audio-only or AV variant).
pub fn run_pretrain(
    cfg: &TrainConfig,
    corpus_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainSummary> {
    if !cfg.mode.is_pretrain() {
        return Err(AvsrError::InvalidConfig(format!(
            "run_pretrain called with mode {}",
            cfg.mode.as_str()
        )));
    }
    cfg.model.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| AvsrError::io(out_dir, e))?;
    let vocab = Vocabulary::desk();
    let mut utts = load_split_utts(corpus_root, "pretrain", cfg.mode.uses_video(), &vocab)?;

    let components = cfg.mode.components();
    let (mut tree, mut adam, quantizer, start_step) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(&checkpoint::resolve_checkpoint_dir(path)?)?;
            if ckpt.meta.mode != cfg.mode.as_str() {
                return Err(AvsrError::InvalidConfig(format!(
                    "resume checkpoint mode {} does not match {}",
                    ckpt.meta.mode,
                    cfg.mode.as_str()
                )));
            }
            let q = ckpt.quantizer.ok_or_else(|| {
                AvsrError::Format("pre-training checkpoint is missing its quantizer".into())
            })?;
            let adam = ckpt.adam.unwrap_or_else(|| AdamState::for_tree(&ckpt.tree));
            (ckpt.tree, adam, q, ckpt.meta.step)
        }
        None => {
            let tree = init_params(&cfg.model, &components, cfg.seed);
            let adam = AdamState::for_tree(&tree);
            let mut q = init_quantizer(
                cfg.quantizer_seed,
                bestrq::DEFAULT_INPUT_DIM,
                bestrq::DEFAULT_CODE_DIM,
                cfg.model.codebook_size,
            );
            let stacked: Vec<Array2<f64>> =
                utts.iter().map(|u| stack_frames(&u.feat_clean)).collect();
            q.fit_normalization(&stacked);
            (tree, adam, q, 0)
        }
    };

    // Targets from clean features; masking only ever touches the model input.
    for utt in &mut utts {
        let stacked = stack_frames(&utt.feat_clean);
        utt.quant_labels = quantizer.quantize(stacked.view());
    }

    let mut metrics = metrics_writer(out_dir, resume.is_some())?;
    let schedule = cfg.schedule();
    let mut empty_steps = 0u64;
    let mut step0_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut final_acc = 0.0;
    let mut last_ckpt = out_dir.join(checkpoint::ckpt_dir_name(start_step));

    for step in start_step + 1..=cfg.steps {
        let t0 = Instant::now();
        let batch = sample_batch(cfg.seed, step, utts.len(), cfg.batch_size);
        let outs: Vec<Result<Option<PretrainStepOut>>> = batch
            .par_iter()
            .enumerate()
            .map(|(pos, &idx)| pretrain_utt(cfg, &tree, &utts[idx], step, pos))
            .collect();
        let mut total_nll = 0.0;
        let mut total_count = 0usize;
        let mut total_hits = 0usize;
        let mut grads: BTreeMap<String, TensorD> = BTreeMap::new();
        for out in outs {
            if let Some(o) = out? {
                total_nll += o.nll_sum;
                total_count += o.count;
                total_hits += o.hits;
                sum_grads(&mut grads, o.grads);
            }
        }
        if total_count == 0 {
            empty_steps += 1;
            writeln!(metrics, "step={step} wall_ms={} empty_step=1", t0.elapsed().as_millis())
                .map_err(|e| AvsrError::io(out_dir.join("metrics.txt"), e))?;
            continue;
        }
        let scale = 1.0 / total_count as f64;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        let loss = total_nll * scale;
        let acc = total_hits as f64 / total_count as f64;
        if step0_loss.is_nan() {
            step0_loss = loss;
        }
        final_loss = loss;
        final_acc = acc;
        clip_global_norm(&mut grads, cfg.grad_clip);
        if let Err(e) = optimizer_step(&mut tree, &grads, &mut adam, &cfg.adam, &schedule, step) {
            // keep a usable checkpoint next to the failure
            let dir = out_dir.join("ckpt_diverged");
            let meta = ckpt_meta(cfg, step);
            save_checkpoint(&dir, &tree, Some(&adam), Some(&quantizer), &meta)?;
            return Err(e);
        }
        writeln!(
            metrics,
            "step={step} wall_ms={} loss={loss} masked_acc={acc}",
            t0.elapsed().as_millis()
        )
        .map_err(|e| AvsrError::io(out_dir.join("metrics.txt"), e))?;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let dir = out_dir.join(checkpoint::ckpt_dir_name(step));
            save_checkpoint(&dir, &tree, Some(&adam), Some(&quantizer), &ckpt_meta(cfg, step))?;
            last_ckpt = dir;
        }
    }
    Ok(PretrainSummary {
        steps_run: cfg.steps - start_step,
        empty_steps,
        step0_loss,
        final_loss,
        final_masked_acc: final_acc,
        last_ckpt,
    })
}

fn ckpt_meta(cfg: &TrainConfig, step: u64) -> CkptMeta {
    CkptMeta {
        step,
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        quantizer_seed: cfg.quantizer_seed,
        model: cfg.model.clone(),
    }
}

fn augment_wave(
    cfg: &TrainConfig,
    wave: &Waveform,
    babbles: &[Waveform],
    rng: &mut impl Rng,
) -> Result<Waveform> {
    if !cfg.noise || rng.random::<f64>() < cfg.clean_prob {
        return Ok(wave.clone());
    }
    let snr = rng.random_range(cfg.snr_lo..=cfg.snr_hi);
    let source = rng.random_range(0..babbles.len() + 1);
    if source < babbles.len() {
        dsp::mix_at_snr(wave, &babbles[source], snr, rng)
    } else {
        // white-noise proxy for non-speech noise types
        let normal = Normal::new(0.0, 0.25).unwrap();
        let samples: Vec<f64> = (0..wave.len()).map(|_| normal.sample(rng)).collect();
        let noise = Waveform {
            samples,
            sample_rate: wave.sample_rate,
        };
        dsp::mix_at_snr(wave, &noise, snr, rng)
    }
}

fn finetune_utt(
    cfg: &TrainConfig,
    tree: &ParameterTree,
    utt: &TrainUtt,
    babbles: &[Waveform],
    step: u64,
    pos: usize,
) -> Result<(f64, BTreeMap<String, TensorD>)> {
    let mut rng_noise = substream(cfg.seed, &format!("noise/{step}/{pos}"));
    let wave = augment_wave(cfg, &utt.wave, babbles, &mut rng_noise)?;
    let mel = MelConfig::default();
    let feat = dsp::compute_logmel(&wave, &mel)?;
    let feat = if cfg.spec_augment {
        let mut rng_sa = substream(cfg.seed, &format!("specaug/{step}/{pos}"));
        dsp::spec_augment(&feat, &SpecAugmentConfig::default(), &mut rng_sa)
    } else {
        feat
    };
    let decision = if cfg.mode.uses_video() && cfg.modality_dropout {
        let mut rng = substream(cfg.seed, &format!("mdrop/{step}/{pos}"));
        sample_modality_dropout(&mut rng)
    } else {
        ModalityDecision::Both
    };

    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, tree);
    let audio = if decision == ModalityDecision::VideoOnly {
        None
    } else {
        Some(audio_frontend_forward(&mut tape, &pv, &cfg.model, &feat)?)
    };
    let video_feats = match &utt.video {
        Some(video) if cfg.mode.uses_video() && decision != ModalityDecision::AudioOnly => Some(
            video_frontend_forward(&mut tape, &pv, &cfg.model, video)?,
        ),
        _ => None,
    };
    let fused = fuse(&mut tape, audio, video_feats, decision)?;
    let t_fused = tape.value(fused).shape()[0];
    let encoded = encoder_forward(&mut tape, &pv, &cfg.model, fused, t_fused)?;
    let pred = predictor_tape(&mut tape, &pv, &cfg.model, &utt.labels)?;
    let logp = joiner_logits_tape(&mut tape, &pv, &cfg.model, encoded, pred);
    let loss = rnnt_loss_node(&mut tape, logp, t_fused, &utt.labels)?;
    let loss_val = tape.value(loss).sum();
    let grads = tape.backward(loss);
    Ok((loss_val, pv.extract_grads(tree, &grads)))
}

/// Outcome of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub final_loss: f64,
    pub best_step: u64,
    pub best_clean: WerReport,
    pub best_noisy: WerReport,
    pub best_ckpt: PathBuf,
    pub final_ckpt: PathBuf,
    pub candidates: Vec<(u64, WerReport, WerReport)>,
}

/// Initial state for a fine-tuning run.
pub struct FinetuneInit {
    pub tree: ParameterTree,
    pub adam: Option<AdamState>,
    pub start_step: u64,
    pub quantizer: Option<RandomQuantizer>,
}

impl FinetuneInit {
    pub fn fresh(tree: ParameterTree) -> Self {
        FinetuneInit {
            tree,
            adam: None,
            start_step: 0,
            quantizer: None,
        }
    }
}

/// Supervised training with periodic clean/noisy dev evaluation and
/// best-average checkpoint selection.
pub fn run_finetune(
    cfg: &TrainConfig,
    corpus_root: &Path,
    out_dir: &Path,
    init: FinetuneInit,
) -> Result<FinetuneSummary> {
    if cfg.mode.is_pretrain() {
        return Err(AvsrError::InvalidConfig(format!(
            "run_finetune called with mode {}",
            cfg.mode.as_str()
        )));
    }
    cfg.model.validate()?;
    let vocab = Vocabulary::desk();
    if cfg.model.vocab_size != vocab.size() {
        return Err(AvsrError::InvalidConfig(format!(
            "model vocab_size {} does not match corpus vocabulary {}",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }
    for root in cfg.mode.components() {
        if !init.tree.has_root(root) {
            return Err(AvsrError::InvalidConfig(format!(
                "initial parameters missing component {root}"
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| AvsrError::io(out_dir, e))?;
    let utts = load_split_utts(corpus_root, "train", cfg.mode.uses_video(), &vocab)?;
    let dev_records = data::read_manifest(&data::manifest_path(corpus_root, "dev"))?;
    let (babble_eval, babbles_train) = load_babbles(corpus_root)?;

    let mut tree = init.tree;
    let mut adam = init.adam.unwrap_or_else(|| AdamState::for_tree(&tree));
    let quantizer = init.quantizer;
    let start_step = init.start_step;
    let mut metrics = metrics_writer(out_dir, start_step > 0)?;
    let schedule = cfg.schedule();
    let dcfg = DecodeConfig::default();
    let mut final_loss = f64::NAN;
    let mut candidates: Vec<(u64, WerReport, WerReport, PathBuf)> = Vec::new();

    for step in start_step + 1..=cfg.steps {
        let t0 = Instant::now();
        let batch = sample_batch(cfg.seed, step, utts.len(), cfg.batch_size);
        let outs: Vec<Result<(f64, BTreeMap<String, TensorD>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(pos, &idx)| finetune_utt(cfg, &tree, &utts[idx], &babbles_train, step, pos))
            .collect();
        let mut total_loss = 0.0;
        let mut grads: BTreeMap<String, TensorD> = BTreeMap::new();
        let n = batch.len() as f64;
        for out in outs {
            let (l, g) = out?;
            total_loss += l;
            sum_grads(&mut grads, g);
        }
        let scale = 1.0 / n;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        let loss = total_loss * scale;
        final_loss = loss;
        clip_global_norm(&mut grads, cfg.grad_clip);
        if let Err(e) = optimizer_step(&mut tree, &grads, &mut adam, &cfg.adam, &schedule, step) {
            let dir = out_dir.join("ckpt_diverged");
            save_checkpoint(&dir, &tree, Some(&adam), quantizer.as_ref(), &ckpt_meta(cfg, step))?;
            return Err(e);
        }
        writeln!(
            metrics,
            "step={step} wall_ms={} loss={loss}",
            t0.elapsed().as_millis()
        )
        .map_err(|e| AvsrError::io(out_dir.join("metrics.txt"), e))?;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let clean = eval::evaluate(
                &tree,
                &cfg.model,
                &vocab,
                corpus_root,
                &dev_records,
                Condition::Clean,
                None,
                &dcfg,
                cfg.seed,
            )?;
            let noisy = eval::evaluate(
                &tree,
                &cfg.model,
                &vocab,
                corpus_root,
                &dev_records,
                Condition::Babble0Db,
                Some(&babble_eval),
                &dcfg,
                cfg.seed,
            )?;
            writeln!(
                metrics,
                "step={step} dev_wer_clean={} dev_wer_noisy={}",
                clean.report.wer, noisy.report.wer
            )
            .map_err(|e| AvsrError::io(out_dir.join("metrics.txt"), e))?;
            let dir = out_dir.join(checkpoint::ckpt_dir_name(step));
            save_checkpoint(&dir, &tree, Some(&adam), quantizer.as_ref(), &ckpt_meta(cfg, step))?;
            candidates.push((step, clean.report, noisy.report, dir));
        }
    }

    let simple: Vec<(u64, WerReport, WerReport)> = candidates
        .iter()
        .map(|(s, c, n, _)| (*s, *c, *n))
        .collect();
    let best_idx = eval::select_checkpoint(&simple)
        .ok_or_else(|| AvsrError::InvalidConfig("no evaluation candidates produced".into()))?;
    let (best_step, best_clean, best_noisy, best_dir) = candidates[best_idx].clone();
    checkpoint::write_best_pointer(out_dir, best_step, &best_dir)?;
    let final_ckpt = candidates.last().map(|(_, _, _, d)| d.clone()).unwrap();
    Ok(FinetuneSummary {
        final_loss,
        best_step,
        best_clean,
        best_noisy,
        best_ckpt: best_dir,
        final_ckpt,
        candidates: simple,
    })
}

fn copy_roots(
    src: &ParameterTree,
    dst: &mut ParameterTree,
    cfg: &ModelConfig,
    roots: &[&str],
) -> Result<()> {
    let mut missing = Vec::new();
    for root in roots {
        for (name, dims) in root_tensor_shapes(cfg, root) {
            match src.get(&name) {
                Some(t) if t.shape() == dims.as_slice() => {
                    dst.insert(name.clone(), t.clone());
                }
                Some(t) => missing.push(format!("{name} (shape {:?} vs {:?})", t.shape(), dims)),
                None => missing.push(format!("{name} (absent)")),
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AvsrError::ShapeMismatch(format!(
            "incompatible tensors: {}",
            missing.join(", ")
        )))
    }
}

/// Stage-2 initialization: audio front-end and encoder copied bit-exactly
/// from the stage-1 checkpoint; video front-end and decoder fresh; the MLM
/// head is dropped.
pub fn init_stage2_from_stage1(
    stage1: &Checkpoint,
    av_cfg: &ModelConfig,
    seed: u64,
) -> Result<ParameterTree> {
    if stage1.meta.model.d_model != av_cfg.d_model {
        return Err(AvsrError::ShapeMismatch(format!(
            "stage-1 d_model {} incompatible with {}",
            stage1.meta.model.d_model, av_cfg.d_model
        )));
    }
    let mut tree = init_params(av_cfg, &["video_frontend", "predictor", "joiner"], seed);
    copy_roots(&stage1.tree, &mut tree, av_cfg, &["audio_frontend", "encoder"])?;
    Ok(tree)
}

/// Convert an audio-only checkpoint into an AV-ready tree: reuse every
/// compatible audio-side tensor (decoder included when present), attach a
/// fresh video front-end.
pub fn adapt_audio_to_av(
    audio_ckpt: &Checkpoint,
    av_cfg: &ModelConfig,
    seed: u64,
) -> Result<ParameterTree> {
    if audio_ckpt.meta.model.d_model != av_cfg.d_model {
        return Err(AvsrError::ShapeMismatch(format!(
            "source d_model {} incompatible with {}",
            audio_ckpt.meta.model.d_model, av_cfg.d_model
        )));
    }
    let mut tree = init_params(av_cfg, &["video_frontend"], seed);
    copy_roots(&audio_ckpt.tree, &mut tree, av_cfg, &["audio_frontend", "encoder"])?;
    for root in ["predictor", "joiner"] {
        let shapes = root_tensor_shapes(av_cfg, root);
        let compatible = shapes
            .iter()
            .all(|(name, dims)| audio_ckpt.tree.get(name).map(|t| t.shape() == dims.as_slice()) == Some(true));
        if compatible {
            copy_roots(&audio_ckpt.tree, &mut tree, av_cfg, &[root])?;
        } else {
            for (name, t) in init_params(av_cfg, &[root], seed).iter() {
                tree.insert(name.clone(), t.clone());
            }
        }
    }
    Ok(tree)
}

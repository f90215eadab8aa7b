//! Single executable exposing the full workflow as subcommands.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. Every run echoes
//! its fully resolved configuration; that echo plus the seed reproduces the
//! run bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, CorpusSpec};
use crate::error::{AvsrError, Result};
use crate::eval::{self, Condition};
use crate::model::{init_params, ModelConfig, Preset};
use crate::rnnt::{DecodeConfig, Vocabulary};
use crate::trainer::{
    adapt_audio_to_av, checkpoint, init_stage2_from_stage1, load_checkpoint, run_finetune,
    run_pretrain, FinetuneInit, TrainConfig, TrainMode,
};

#[derive(Parser)]
#[command(name = "avsr", version, about = "Two-stage audio-visual speech recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and reports.
    #[arg(long = "out_dir")]
    out_dir: PathBuf,
    /// Master seed; all randomness derives from it through named substreams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite existing out_dir contents.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// Corpus root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Training mode.
    #[arg(long)]
    mode: Option<String>,
    /// Model preset (desk or paper).
    #[arg(long)]
    preset: Option<String>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Initialization checkpoint (stage-1 for finetune, audio-only for adapt).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume an interrupted run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired audio/video corpus.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Stage-1 self-supervised pre-training.
    Pretrain(TrainOpts),
    /// Supervised training (from scratch or from a stage-1 checkpoint).
    Finetune(TrainOpts),
    /// Convert an audio-only checkpoint to AV and fine-tune it.
    Adapt(TrainOpts),
    /// Decode a split under a condition and report WER.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// clean or babble_0db.
        #[arg(long, default_value = "clean")]
        condition: String,
        /// Manifest split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print greedy hypotheses for a split, one utterance per line.
    Decode {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Show the tensor table and parameter counts of a checkpoint.
    Inspect {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Run the CLI; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| AvsrError::io(path, e))?;
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            AvsrError::InvalidConfig(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            ))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn prepare_out_dir(common: &CommonOpts) -> Result<()> {
    let dir = &common.out_dir;
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| AvsrError::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !common.force {
            return Err(AvsrError::InvalidConfig(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| AvsrError::io(dir, e))
}

fn echo_config(out_dir: &Path, kv: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in kv {
        text.push_str(&format!("{k}={v}\n"));
    }
    print!("{text}");
    let path = out_dir.join("config.resolved.txt");
    fs::write(&path, text).map_err(|e| AvsrError::io(&path, e))
}

fn build_train_config(opts: &TrainOpts, default_mode: TrainMode) -> Result<TrainConfig> {
    let file_kv = match &opts.common.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let preset = match (&opts.preset, file_kv.get("model.preset")) {
        (Some(p), _) => Preset::parse(p)?,
        (None, Some(p)) => Preset::parse(p)?,
        (None, None) => Preset::Desk,
    };
    let mut cfg = TrainConfig::new(default_mode, ModelConfig::for_preset(preset));
    for (k, v) in &file_kv {
        cfg.apply_kv(k, v)?;
    }
    if let Some(m) = &opts.mode {
        cfg.mode = TrainMode::parse(m)?;
    }
    if let Some(s) = opts.steps {
        cfg.steps = s;
    }
    cfg.seed = opts.common.seed;
    Ok(cfg)
}

fn load_eval_inputs(
    data: &Path,
    ckpt: &Path,
    split: &str,
) -> Result<(checkpoint::Checkpoint, Vec<data::ManifestRecord>)> {
    let ckpt = load_checkpoint(&checkpoint::resolve_checkpoint_dir(ckpt)?)?;
    let records = data::read_manifest(&data::manifest_path(data, split))?;
    Ok((ckpt, records))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            prepare_out_dir(&common)?;
            let mut spec = CorpusSpec {
                seed: common.seed,
                ..CorpusSpec::default()
            };
            if let Some(path) = &common.config {
                let kv = read_config_file(path)?;
                let parse = |key: &str, dst: &mut usize| -> Result<()> {
                    if let Some(v) = kv.get(key) {
                        *dst = v.parse().map_err(|_| {
                            AvsrError::InvalidConfig(format!("bad value for {key}: {v}"))
                        })?;
                    }
                    Ok(())
                };
                parse("num_pretrain", &mut spec.num_pretrain)?;
                parse("num_train", &mut spec.num_train)?;
                parse("num_dev", &mut spec.num_dev)?;
                parse("num_test", &mut spec.num_test)?;
                parse("min_symbols", &mut spec.min_symbols)?;
                parse("max_symbols", &mut spec.max_symbols)?;
                parse("video_size", &mut spec.video_size)?;
            }
            let kv: Vec<(String, String)> = vec![
                ("command".into(), "gen-data".into()),
                ("seed".into(), spec.seed.to_string()),
                ("num_pretrain".into(), spec.num_pretrain.to_string()),
                ("num_train".into(), spec.num_train.to_string()),
                ("num_dev".into(), spec.num_dev.to_string()),
                ("num_test".into(), spec.num_test.to_string()),
                ("min_symbols".into(), spec.min_symbols.to_string()),
                ("max_symbols".into(), spec.max_symbols.to_string()),
                ("video_size".into(), spec.video_size.to_string()),
            ];
            echo_config(&common.out_dir, &kv)?;
            data::generate_corpus(&spec, &common.out_dir)
        }
        Command::Pretrain(opts) => {
            prepare_out_dir(&opts.common)?;
            let cfg = build_train_config(&opts, TrainMode::PretrainAudio)?;
            if !cfg.mode.is_pretrain() {
                return Err(AvsrError::InvalidConfig(format!(
                    "pretrain cannot run mode {}",
                    cfg.mode.as_str()
                )));
            }
            let mut kv = cfg.to_kv();
            kv.insert(0, ("command".into(), "pretrain".into()));
            echo_config(&opts.common.out_dir, &kv)?;
            let summary = run_pretrain(
                &cfg,
                &opts.data,
                &opts.common.out_dir,
                opts.resume.as_deref(),
            )?;
            println!(
                "pretrain done: steps={} final_loss={} masked_acc={} ckpt={}",
                summary.steps_run,
                summary.final_loss,
                summary.final_masked_acc,
                summary.last_ckpt.display()
            );
            Ok(())
        }
        Command::Finetune(opts) => {
            prepare_out_dir(&opts.common)?;
            let mut cfg = build_train_config(&opts, TrainMode::TfsAv)?;
            if cfg.mode.is_pretrain() {
                return Err(AvsrError::InvalidConfig(format!(
                    "finetune cannot run mode {}",
                    cfg.mode.as_str()
                )));
            }
            let init = match (&opts.resume, &opts.init) {
                (Some(resume), _) => {
                    let ckpt = load_checkpoint(&checkpoint::resolve_checkpoint_dir(resume)?)?;
                    if ckpt.meta.mode != cfg.mode.as_str() {
                        return Err(AvsrError::InvalidConfig(format!(
                            "resume checkpoint mode {} does not match {}",
                            ckpt.meta.mode,
                            cfg.mode.as_str()
                        )));
                    }
                    let start = ckpt.meta.step;
                    FinetuneInit {
                        adam: ckpt.adam,
                        quantizer: ckpt.quantizer,
                        tree: ckpt.tree,
                        start_step: start,
                    }
                }
                (None, Some(init_path)) => {
                    let stage1 = load_checkpoint(&checkpoint::resolve_checkpoint_dir(init_path)?)?;
                    let tree = init_stage2_from_stage1(&stage1, &cfg.model, cfg.seed)?;
                    if !matches!(cfg.mode, TrainMode::FinetuneAv | TrainMode::FinetuneAudio) {
                        cfg.mode = if cfg.mode.uses_video() {
                            TrainMode::FinetuneAv
                        } else {
                            TrainMode::FinetuneAudio
                        };
                    }
                    FinetuneInit {
                        tree,
                        adam: None,
                        start_step: 0,
                        quantizer: stage1.quantizer,
                    }
                }
                (None, None) => {
                    let tree = init_params(&cfg.model, &cfg.mode.components(), cfg.seed);
                    FinetuneInit::fresh(tree)
                }
            };
            let mut kv = cfg.to_kv();
            kv.insert(0, ("command".into(), "finetune".into()));
            echo_config(&opts.common.out_dir, &kv)?;
            let summary = run_finetune(&cfg, &opts.data, &opts.common.out_dir, init)?;
            println!(
                "finetune done: best_step={} dev_wer_clean={} dev_wer_noisy={} ckpt={}",
                summary.best_step,
                summary.best_clean.wer,
                summary.best_noisy.wer,
                summary.best_ckpt.display()
            );
            Ok(())
        }
        Command::Adapt(opts) => {
            prepare_out_dir(&opts.common)?;
            let mut cfg = build_train_config(&opts, TrainMode::AdaptAudioToAv)?;
            cfg.mode = TrainMode::AdaptAudioToAv;
            let init_path = opts.init.as_ref().ok_or_else(|| {
                AvsrError::InvalidConfig("adapt requires --init <audio checkpoint>".into())
            })?;
            let source = load_checkpoint(&checkpoint::resolve_checkpoint_dir(init_path)?)?;
            let tree = adapt_audio_to_av(&source, &cfg.model, cfg.seed)?;
            let mut kv = cfg.to_kv();
            kv.insert(0, ("command".into(), "adapt".into()));
            echo_config(&opts.common.out_dir, &kv)?;
            let init = FinetuneInit {
                tree,
                adam: None,
                start_step: 0,
                quantizer: source.quantizer,
            };
            let summary = run_finetune(&cfg, &opts.data, &opts.common.out_dir, init)?;
            println!(
                "adapt done: best_step={} dev_wer_clean={} dev_wer_noisy={} ckpt={}",
                summary.best_step,
                summary.best_clean.wer,
                summary.best_noisy.wer,
                summary.best_ckpt.display()
            );
            Ok(())
        }
        Command::Evaluate {
            common,
            data,
            ckpt,
            condition,
            split,
        } => {
            prepare_out_dir(&common)?;
            let condition = Condition::parse(&condition)?;
            let (ckpt, records) = load_eval_inputs(&data, &ckpt, &split)?;
            let vocab = Vocabulary::desk();
            let babble = match condition {
                Condition::Babble0Db => Some(crate::dsp::wav::read_wav(
                    &data.join("noise").join("babble_eval.wav"),
                )?),
                Condition::Clean => None,
            };
            let kv: Vec<(String, String)> = vec![
                ("command".into(), "evaluate".into()),
                ("condition".into(), condition.as_str().into()),
                ("split".into(), split.clone()),
                ("seed".into(), common.seed.to_string()),
                ("ckpt_step".into(), ckpt.meta.step.to_string()),
            ];
            echo_config(&common.out_dir, &kv)?;
            let out = eval::evaluate(
                &ckpt.tree,
                &ckpt.meta.model,
                &vocab,
                &data,
                &records,
                condition,
                babble.as_ref(),
                &DecodeConfig::default(),
                common.seed,
            )?;
            let report_text = eval::format_report(
                condition,
                &out.report,
                &format!("step{}", ckpt.meta.step),
            );
            let rp = common.out_dir.join(format!("wer_{}.txt", condition.as_str()));
            fs::write(&rp, &report_text).map_err(|e| AvsrError::io(&rp, e))?;
            let dp = common
                .out_dir
                .join(format!("hyps_{}.txt", condition.as_str()));
            fs::write(&dp, eval::format_hyp_dump(&out.lines)).map_err(|e| AvsrError::io(&dp, e))?;
            print!("{report_text}");
            Ok(())
        }
        Command::Decode {
            common,
            data,
            ckpt,
            split,
        } => {
            prepare_out_dir(&common)?;
            let (ckpt, records) = load_eval_inputs(&data, &ckpt, &split)?;
            let vocab = Vocabulary::desk();
            let out = eval::evaluate(
                &ckpt.tree,
                &ckpt.meta.model,
                &vocab,
                &data,
                &records,
                Condition::Clean,
                None,
                &DecodeConfig::default(),
                common.seed,
            )?;
            let mut text = String::new();
            for line in &out.lines {
                text.push_str(&format!("{} {}\n", line.id, line.hypothesis));
            }
            let path = common.out_dir.join(format!("decode_{split}.txt"));
            fs::write(&path, &text).map_err(|e| AvsrError::io(&path, e))?;
            print!("{text}");
            Ok(())
        }
        Command::Inspect { ckpt } => {
            let ckpt = load_checkpoint(&checkpoint::resolve_checkpoint_dir(&ckpt)?)?;
            print!("{}", ckpt.tree.describe());
            println!("mode={} step={}", ckpt.meta.mode, ckpt.meta.step);
            Ok(())
        }
    }
}

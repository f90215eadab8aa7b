//! Selective parameter transfer, checkpoint resume replay, and training-run
//! determinism on a tiny corpus.

use std::fs;
use std::path::Path;

use avsr::data::{generate_corpus, CorpusSpec};
use avsr::model::{init_params, ModelConfig, Preset};
use avsr::trainer::{
    adapt_audio_to_av, init_stage2_from_stage1, load_checkpoint, run_finetune, run_pretrain,
    save_checkpoint, Checkpoint, CkptMeta, FinetuneInit, TrainConfig, TrainMode,
};

fn tiny_corpus(dir: &Path) {
    let spec = CorpusSpec {
        num_pretrain: 12,
        num_train: 30,
        num_dev: 3,
        num_test: 3,
        min_symbols: 6,
        max_symbols: 8,
        video_size: 32,
        seed: 21,
    };
    generate_corpus(&spec, dir).unwrap();
}

fn fake_stage1_ckpt(dir: &Path, mode: TrainMode, seed: u64) -> Checkpoint {
    let cfg = ModelConfig::desk();
    let tree = init_params(&cfg, &mode.components(), seed);
    let meta = CkptMeta {
        step: 10,
        mode: mode.as_str().into(),
        seed,
        quantizer_seed: 1717,
        model: cfg,
    };
    save_checkpoint(dir, &tree, None, None, &meta).unwrap();
    load_checkpoint(dir).unwrap()
}

#[test]
fn stage2_transfer_is_selective() {
    let dir = tempfile::tempdir().unwrap();
    let stage1 = fake_stage1_ckpt(dir.path(), TrainMode::PretrainAudio, 5);
    let av_cfg = ModelConfig::desk();
    let tree = init_stage2_from_stage1(&stage1, &av_cfg, 99).unwrap();

    for root in ["audio_frontend", "encoder"] {
        for name in stage1.tree.root_names(root) {
            assert!(tree.tensor_bits_eq(&stage1.tree, &name), "{name} not copied");
        }
    }
    assert!(tree.has_root("video_frontend"));
    assert!(tree.has_root("predictor"));
    assert!(tree.has_root("joiner"));
    assert!(!tree.has_root("mlm_head"), "mlm head must be dropped");
    // fresh tensors come from the new seed, not the stage-1 stream
    let fresh_ref = init_params(&av_cfg, &["video_frontend"], 99);
    for name in fresh_ref.root_names("video_frontend") {
        assert!(tree.tensor_bits_eq(&fresh_ref, &name));
    }
}

#[test]
fn stage2_rejects_incompatible_width() {
    let dir = tempfile::tempdir().unwrap();
    let stage1 = fake_stage1_ckpt(dir.path(), TrainMode::PretrainAudio, 5);
    let mut av_cfg = ModelConfig::desk();
    av_cfg.d_model = 128;
    av_cfg.video_channels = [3, 4, 8, 16, 32, 128];
    let err = init_stage2_from_stage1(&stage1, &av_cfg, 99);
    assert!(err.is_err());
}

#[test]
fn stage2_names_offending_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let mut stage1 = fake_stage1_ckpt(dir.path(), TrainMode::PretrainAudio, 5);
    // same d_model but a mangled encoder tensor shape
    let t = stage1.tree.remove("encoder/layer0/ffn1/w1").unwrap();
    let flat = avsr::autodiff::reshaped(&t, &[t.len()]);
    stage1.tree.insert("encoder/layer0/ffn1/w1", flat);
    let err = init_stage2_from_stage1(&stage1, &ModelConfig::desk(), 99)
        .unwrap_err()
        .to_string();
    assert!(err.contains("encoder/layer0/ffn1/w1"), "{err}");
}

#[test]
fn adapt_reuses_decoder_when_compatible() {
    let dir = tempfile::tempdir().unwrap();
    let source = fake_stage1_ckpt(dir.path(), TrainMode::TfsAudio, 8);
    let av_cfg = ModelConfig::desk();
    let tree = adapt_audio_to_av(&source, &av_cfg, 100).unwrap();
    for root in ["audio_frontend", "encoder", "predictor", "joiner"] {
        for name in source.tree.root_names(root) {
            assert!(tree.tensor_bits_eq(&source.tree, &name), "{name} not reused");
        }
    }
    assert!(tree.has_root("video_frontend"));
}

#[test]
fn adapt_reinitializes_mismatched_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let mut source = fake_stage1_ckpt(dir.path(), TrainMode::TfsAudio, 8);
    // pretend the source used a different predictor width
    let t = source.tree.remove("predictor/lstm0/w_ih").unwrap();
    let flat = avsr::autodiff::reshaped(&t, &[t.len()]);
    source.tree.insert("predictor/lstm0/w_ih", flat);
    let av_cfg = ModelConfig::desk();
    let tree = adapt_audio_to_av(&source, &av_cfg, 100).unwrap();
    // audio side still copied; predictor freshly drawn
    for name in source.tree.root_names("encoder") {
        assert!(tree.tensor_bits_eq(&source.tree, &name));
    }
    let fresh = init_params(&av_cfg, &["predictor"], 100);
    for name in fresh.root_names("predictor") {
        assert!(tree.tensor_bits_eq(&fresh, &name));
    }
}

fn strip_wall(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            l.split_whitespace()
                .filter(|f| !f.starts_with("wall_ms="))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn pretrain_replays_and_resumes_bit_exactly() {
    let corpus = tempfile::tempdir().unwrap();
    tiny_corpus(corpus.path());
    let mut cfg = TrainConfig::new(TrainMode::PretrainAudio, ModelConfig::desk());
    cfg.steps = 8;
    cfg.eval_interval = 4;
    cfg.batch_size = 3;
    cfg.seed = 77;

    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    run_pretrain(&cfg, corpus.path(), run_a.path(), None).unwrap();
    run_pretrain(&cfg, corpus.path(), run_b.path(), None).unwrap();
    assert_eq!(
        strip_wall(&run_a.path().join("metrics.txt")),
        strip_wall(&run_b.path().join("metrics.txt"))
    );
    let ck_a = load_checkpoint(&run_a.path().join("ckpt_000008")).unwrap();
    let ck_b = load_checkpoint(&run_b.path().join("ckpt_000008")).unwrap();
    for (name, _) in ck_a.tree.iter() {
        assert!(ck_a.tree.tensor_bits_eq(&ck_b.tree, name), "{name}");
    }

    // interrupted at step 4, resumed to 8 == uninterrupted run to 8
    let run_c = tempfile::tempdir().unwrap();
    let mut cfg_half = cfg.clone();
    cfg_half.steps = 4;
    run_pretrain(&cfg_half, corpus.path(), run_c.path(), None).unwrap();
    let resume_from = run_c.path().join("ckpt_000004");
    run_pretrain(&cfg, corpus.path(), run_c.path(), Some(&resume_from)).unwrap();
    let ck_c = load_checkpoint(&run_c.path().join("ckpt_000008")).unwrap();
    for (name, _) in ck_a.tree.iter() {
        assert!(ck_a.tree.tensor_bits_eq(&ck_c.tree, name), "resume diverged at {name}");
    }
    assert_eq!(
        strip_wall(&run_a.path().join("metrics.txt")),
        strip_wall(&run_c.path().join("metrics.txt"))
    );
}

#[test]
fn finetune_runs_and_selects_a_checkpoint() {
    let corpus = tempfile::tempdir().unwrap();
    tiny_corpus(corpus.path());
    let mut cfg = TrainConfig::new(TrainMode::TfsAudio, ModelConfig::desk());
    cfg.steps = 4;
    cfg.eval_interval = 2;
    cfg.batch_size = 2;
    cfg.seed = 31;
    let out = tempfile::tempdir().unwrap();
    let tree = init_params(&cfg.model, &cfg.mode.components(), cfg.seed);
    let summary = run_finetune(&cfg, corpus.path(), out.path(), FinetuneInit::fresh(tree)).unwrap();
    assert!(summary.best_ckpt.exists());
    assert!(out.path().join("best_checkpoint.txt").exists());
    assert_eq!(summary.candidates.len(), 2);
    // a fresh transducer on a 17-symbol vocabulary decodes garbage; WER is
    // finite and the metrics file holds both train and dev lines
    let metrics = fs::read_to_string(out.path().join("metrics.txt")).unwrap();
    assert!(metrics.contains("dev_wer_clean="));
    assert!(metrics.lines().any(|l| l.starts_with("step=4 ")));
}

#[test]
fn pretrain_av_consumes_video_and_audio_mode_has_no_video_tensors() {
    let corpus = tempfile::tempdir().unwrap();
    tiny_corpus(corpus.path());
    let mut cfg = TrainConfig::new(TrainMode::PretrainAv, ModelConfig::desk());
    cfg.steps = 2;
    cfg.eval_interval = 2;
    cfg.batch_size = 2;
    let out = tempfile::tempdir().unwrap();
    run_pretrain(&cfg, corpus.path(), out.path(), None).unwrap();
    let ck = load_checkpoint(&out.path().join("ckpt_000002")).unwrap();
    assert!(ck.tree.has_root("video_frontend"));

    let mut cfg_a = TrainConfig::new(TrainMode::PretrainAudio, ModelConfig::desk());
    cfg_a.steps = 2;
    cfg_a.eval_interval = 2;
    cfg_a.batch_size = 2;
    let out_a = tempfile::tempdir().unwrap();
    run_pretrain(&cfg_a, corpus.path(), out_a.path(), None).unwrap();
    let ck_a = load_checkpoint(&out_a.path().join("ckpt_000002")).unwrap();
    assert!(!ck_a.tree.has_root("video_frontend"));
    for root in ck_a.meta.model.to_kv() {
        let _ = root; // meta carries the config; components stay mode-consistent
    }
    assert!(ck_a.tree.has_root("mlm_head"));
    assert!(!ck_a.tree.has_root("predictor"));
}

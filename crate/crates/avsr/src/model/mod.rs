//! Neural architecture: audio front-end, (2+1)D video front-end, additive
//! early fusion with modality dropout, Conformer encoder, and the parameter
//! tree underlying checkpointing and transfer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView2, Ix2, IxDyn};
use rand::Rng;

use crate::autodiff::{Gradients, Tape, TensorD, Var};
use crate::error::{AvsrError, Result};
use crate::rng::substream;

mod forward;

pub use forward::{
    audio_frontend_forward, encoder_forward, fuse, mlm_head_forward, video_frontend_forward,
};

/// Model size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size architecture; exercised by shape and count tests only.
    Paper,
    /// Small architecture for end-to-end runs and gradient checks.
    Desk,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(AvsrError::InvalidConfig(format!("unknown preset {s:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub preset: Preset,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    /// Relative-position bias is clamped to `[-relpos_window, relpos_window]`.
    pub relpos_window: usize,
    pub video_size: usize,
    /// Channel schedule through the five (spatial, temporal) conv pairs.
    pub video_channels: [usize; 6],
    /// Output channels of the two audio front-end conv layers.
    pub audio_channels: (usize, usize),
    pub pred_hidden: usize,
    pub pred_embed: usize,
    pub joiner_dim: usize,
    pub vocab_size: usize,
    pub codebook_size: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            d_model: 512,
            num_layers: 17,
            num_heads: 8,
            ffn_dim: 2048,
            conv_kernel: 31,
            relpos_window: 64,
            video_size: 128,
            video_channels: [3, 32, 64, 128, 256, 512],
            audio_channels: (128, 32),
            pred_hidden: 1280,
            pred_embed: 128,
            joiner_dim: 640,
            vocab_size: 4096,
            codebook_size: 8192,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            conv_kernel: 7,
            relpos_window: 16,
            video_size: 32,
            video_channels: [3, 8, 16, 32, 64, 64],
            audio_channels: (16, 8),
            pred_hidden: 64,
            pred_embed: 32,
            joiner_dim: 64,
            vocab_size: 17,
            codebook_size: 256,
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Frequency extent after the two stride-2 audio convs (80 -> 40 -> 20).
    pub fn audio_freq_out(&self) -> usize {
        crate::dsp::NUM_MELS.div_ceil(2).div_ceil(2)
    }

    /// Flattened width feeding the audio front-end projection.
    pub fn audio_flatten_dim(&self) -> usize {
        self.audio_freq_out() * self.audio_channels.1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Flatten into `key=value` pairs for config echoes and checkpoint meta.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("model.preset".into(), self.preset.as_str().to_string())];
        let fields: [(&str, String); 13] = [
            ("d_model", self.d_model.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("relpos_window", self.relpos_window.to_string()),
            ("video_size", self.video_size.to_string()),
            (
                "video_channels",
                self.video_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "audio_channels",
                format!("{},{}", self.audio_channels.0, self.audio_channels.1),
            ),
            ("pred_hidden", self.pred_hidden.to_string()),
            ("pred_embed", self.pred_embed.to_string()),
            ("joiner_dim", self.joiner_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ];
        for (k, v) in fields {
            kv.push((format!("model.{k}"), v));
        }
        kv.push(("model.codebook_size".into(), self.codebook_size.to_string()));
        kv
    }

    /// Rebuild from `key=value` pairs: preset defaults plus any overrides.
    pub fn from_kv(get: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let preset = match get("model.preset") {
            Some(p) => Preset::parse(&p)?,
            None => Preset::Desk,
        };
        let mut cfg = ModelConfig::for_preset(preset);
        let parse_usize = |key: &str, dst: &mut usize| -> Result<()> {
            if let Some(v) = get(key) {
                *dst = v
                    .parse()
                    .map_err(|_| AvsrError::InvalidConfig(format!("bad value for {key}: {v}")))?;
            }
            Ok(())
        };
        parse_usize("model.d_model", &mut cfg.d_model)?;
        parse_usize("model.num_layers", &mut cfg.num_layers)?;
        parse_usize("model.num_heads", &mut cfg.num_heads)?;
        parse_usize("model.ffn_dim", &mut cfg.ffn_dim)?;
        parse_usize("model.conv_kernel", &mut cfg.conv_kernel)?;
        parse_usize("model.relpos_window", &mut cfg.relpos_window)?;
        parse_usize("model.video_size", &mut cfg.video_size)?;
        parse_usize("model.pred_hidden", &mut cfg.pred_hidden)?;
        parse_usize("model.pred_embed", &mut cfg.pred_embed)?;
        parse_usize("model.joiner_dim", &mut cfg.joiner_dim)?;
        parse_usize("model.vocab_size", &mut cfg.vocab_size)?;
        parse_usize("model.codebook_size", &mut cfg.codebook_size)?;
        if let Some(v) = get("model.video_channels") {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| p.parse().map_err(|_| AvsrError::InvalidConfig(format!("bad video_channels: {v}"))))
                .collect::<Result<_>>()?;
            if parts.len() != 6 {
                return Err(AvsrError::InvalidConfig("video_channels needs 6 entries".into()));
            }
            cfg.video_channels.copy_from_slice(&parts);
        }
        if let Some(v) = get("model.audio_channels") {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| p.parse().map_err(|_| AvsrError::InvalidConfig(format!("bad audio_channels: {v}"))))
                .collect::<Result<_>>()?;
            if parts.len() != 2 {
                return Err(AvsrError::InvalidConfig("audio_channels needs 2 entries".into()));
            }
            cfg.audio_channels = (parts[0], parts[1]);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.num_heads != 0 {
            return Err(AvsrError::InvalidConfig(
                "d_model must be divisible by num_heads".into(),
            ));
        }
        if self.video_channels[5] != self.d_model {
            return Err(AvsrError::InvalidConfig(
                "video channel schedule must end at d_model".into(),
            ));
        }
        if self.video_size % 32 != 0 {
            return Err(AvsrError::InvalidConfig(
                "video resolution must be divisible by 32 (five stride-2 stages)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-utterance modality zeroing decision during AV training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityDecision {
    Both,
    /// Keep audio, zero the video features.
    AudioOnly,
    /// Keep video, zero the audio features.
    VideoOnly,
}

/// P(both) = 0.5, P(zero video) = 0.25, P(zero audio) = 0.25.
pub fn sample_modality_dropout(rng: &mut impl Rng) -> ModalityDecision {
    let u: f64 = rng.random();
    if u < 0.5 {
        ModalityDecision::Both
    } else if u < 0.75 {
        ModalityDecision::AudioOnly
    } else {
        ModalityDecision::VideoOnly
    }
}

pub const ROOTS: [&str; 6] = [
    "audio_frontend",
    "video_frontend",
    "encoder",
    "mlm_head",
    "predictor",
    "joiner",
];

/// Named hierarchy of tensors; the unit of checkpointing and transfer.
#[derive(Debug, Clone, Default)]
pub struct ParameterTree {
    tensors: BTreeMap<String, TensorD>,
}

impl ParameterTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorD) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&TensorD> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorD> {
        self.tensors.get_mut(name)
    }

    pub fn get2(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.tensors
            .get(name)
            .map(|t| t.view().into_dimensionality::<Ix2>().unwrap())
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorD> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorD)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn has_root(&self, root: &str) -> bool {
        let prefix = format!("{root}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn root_names(&self, root: &str) -> Vec<String> {
        let prefix = format!("{root}/");
        self.tensors
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn root_params(&self, root: &str) -> usize {
        let prefix = format!("{root}/");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Line-delimited `name shape count` table plus totals.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{}\t{}\t{}\n", name, dims.join("x"), t.len()));
        }
        for root in ROOTS {
            if self.has_root(root) {
                out.push_str(&format!("# {root}: {} params\n", self.root_params(root)));
            }
        }
        out.push_str(&format!("# total: {} params\n", self.total_params()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of one tensor across trees.
    pub fn tensor_bits_eq(&self, other: &ParameterTree, name: &str) -> bool {
        match (self.get(name), other.get(name)) {
            (Some(a), Some(b)) => {
                a.shape() == b.shape()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

enum InitKind {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`; preserves activation
    /// scale through deep ReLU conv stacks.
    FanInRelu(usize),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    init: InitKind,
}

fn spec(name: String, dims: Vec<usize>, init: InitKind) -> ParamSpec {
    ParamSpec { name, dims, init }
}

/// Tensor shapes for one component root under a config.
fn param_specs(cfg: &ModelConfig, root: &str) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    match root {
        "audio_frontend" => {
            let (c1, c2) = cfg.audio_channels;
            out.push(spec(
                "audio_frontend/conv1/kernel".into(),
                vec![3, 3, 1, c1],
                InitKind::FanInRelu(9),
            ));
            out.push(spec("audio_frontend/conv1/bias".into(), vec![c1], InitKind::Zeros));
            out.push(spec(
                "audio_frontend/conv2/kernel".into(),
                vec![3, 3, c1, c2],
                InitKind::FanInRelu(9 * c1),
            ));
            out.push(spec("audio_frontend/conv2/bias".into(), vec![c2], InitKind::Zeros));
            let flat = cfg.audio_flatten_dim();
            out.push(spec(
                "audio_frontend/proj/weight".into(),
                vec![flat, d],
                InitKind::FanIn(flat),
            ));
            out.push(spec("audio_frontend/proj/bias".into(), vec![d], InitKind::Zeros));
        }
        "video_frontend" => {
            for i in 0..5 {
                let cin = cfg.video_channels[i];
                let cout = cfg.video_channels[i + 1];
                out.push(spec(
                    format!("video_frontend/stage{i}/spatial/kernel"),
                    vec![3, 3, cin, cout],
                    InitKind::FanInRelu(9 * cin),
                ));
                out.push(spec(
                    format!("video_frontend/stage{i}/spatial/bias"),
                    vec![cout],
                    InitKind::Zeros,
                ));
                out.push(spec(
                    format!("video_frontend/stage{i}/temporal/kernel"),
                    vec![3, cout, cout],
                    InitKind::FanInRelu(3 * cout),
                ));
                out.push(spec(
                    format!("video_frontend/stage{i}/temporal/bias"),
                    vec![cout],
                    InitKind::Zeros,
                ));
            }
        }
        "encoder" => {
            for i in 0..cfg.num_layers {
                let p = format!("encoder/layer{i}");
                for ffn in ["ffn1", "ffn2"] {
                    out.push(spec(format!("{p}/{ffn}/ln_gamma"), vec![d], InitKind::Ones));
                    out.push(spec(format!("{p}/{ffn}/ln_beta"), vec![d], InitKind::Zeros));
                    out.push(spec(
                        format!("{p}/{ffn}/w1"),
                        vec![d, cfg.ffn_dim],
                        InitKind::FanIn(d),
                    ));
                    out.push(spec(format!("{p}/{ffn}/b1"), vec![cfg.ffn_dim], InitKind::Zeros));
                    out.push(spec(
                        format!("{p}/{ffn}/w2"),
                        vec![cfg.ffn_dim, d],
                        InitKind::FanIn(cfg.ffn_dim),
                    ));
                    out.push(spec(format!("{p}/{ffn}/b2"), vec![d], InitKind::Zeros));
                }
                out.push(spec(format!("{p}/attn/ln_gamma"), vec![d], InitKind::Ones));
                out.push(spec(format!("{p}/attn/ln_beta"), vec![d], InitKind::Zeros));
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push(spec(format!("{p}/attn/{w}"), vec![d, d], InitKind::FanIn(d)));
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    out.push(spec(format!("{p}/attn/{b}"), vec![d], InitKind::Zeros));
                }
                out.push(spec(
                    format!("{p}/attn/relpos"),
                    vec![cfg.num_heads, 2 * cfg.relpos_window + 1],
                    InitKind::Zeros,
                ));
                out.push(spec(format!("{p}/conv/ln_gamma"), vec![d], InitKind::Ones));
                out.push(spec(format!("{p}/conv/ln_beta"), vec![d], InitKind::Zeros));
                out.push(spec(
                    format!("{p}/conv/pw1_weight"),
                    vec![d, 2 * d],
                    InitKind::FanIn(d),
                ));
                out.push(spec(format!("{p}/conv/pw1_bias"), vec![2 * d], InitKind::Zeros));
                out.push(spec(
                    format!("{p}/conv/dw_kernel"),
                    vec![cfg.conv_kernel, d],
                    InitKind::FanIn(cfg.conv_kernel),
                ));
                out.push(spec(format!("{p}/conv/dw_bias"), vec![d], InitKind::Zeros));
                out.push(spec(format!("{p}/conv/norm_gamma"), vec![d], InitKind::Ones));
                out.push(spec(format!("{p}/conv/norm_beta"), vec![d], InitKind::Zeros));
                out.push(spec(
                    format!("{p}/conv/pw2_weight"),
                    vec![d, d],
                    InitKind::FanIn(d),
                ));
                out.push(spec(format!("{p}/conv/pw2_bias"), vec![d], InitKind::Zeros));
                out.push(spec(format!("{p}/out_ln_gamma"), vec![d], InitKind::Ones));
                out.push(spec(format!("{p}/out_ln_beta"), vec![d], InitKind::Zeros));
            }
        }
        "mlm_head" => {
            out.push(spec(
                "mlm_head/weight".into(),
                vec![d, cfg.codebook_size],
                InitKind::FanIn(d),
            ));
            out.push(spec(
                "mlm_head/bias".into(),
                vec![cfg.codebook_size],
                InitKind::Zeros,
            ));
        }
        "predictor" => {
            let (h, e) = (cfg.pred_hidden, cfg.pred_embed);
            out.push(spec(
                "predictor/embedding".into(),
                vec![cfg.vocab_size, e],
                InitKind::FanIn(e),
            ));
            out.push(spec("predictor/start".into(), vec![1, e], InitKind::FanIn(e)));
            for (layer, input) in [(0usize, e), (1, h)] {
                let p = format!("predictor/lstm{layer}");
                out.push(spec(format!("{p}/w_ih"), vec![input, 4 * h], InitKind::FanIn(input)));
                out.push(spec(format!("{p}/w_hh"), vec![h, 4 * h], InitKind::FanIn(h)));
                out.push(spec(format!("{p}/b_ih"), vec![4 * h], InitKind::Zeros));
                out.push(spec(format!("{p}/b_hh"), vec![4 * h], InitKind::Zeros));
            }
        }
        "joiner" => {
            let j = cfg.joiner_dim;
            out.push(spec(
                "joiner/enc_proj/weight".into(),
                vec![d, j],
                InitKind::FanIn(d),
            ));
            out.push(spec("joiner/enc_proj/bias".into(), vec![j], InitKind::Zeros));
            out.push(spec(
                "joiner/pred_proj/weight".into(),
                vec![cfg.pred_hidden, j],
                InitKind::FanIn(cfg.pred_hidden),
            ));
            out.push(spec("joiner/pred_proj/bias".into(), vec![j], InitKind::Zeros));
            out.push(spec("joiner/hidden/weight".into(), vec![j, j], InitKind::FanIn(j)));
            out.push(spec("joiner/hidden/bias".into(), vec![j], InitKind::Zeros));
            out.push(spec(
                "joiner/out/weight".into(),
                vec![j, cfg.vocab_size],
                InitKind::FanIn(j),
            ));
            out.push(spec(
                "joiner/out/bias".into(),
                vec![cfg.vocab_size],
                InitKind::Zeros,
            ));
        }
        _ => panic!("unknown component root {root:?}"),
    }
    out
}

/// Expected tensor names and shapes for one component root.
pub fn root_tensor_shapes(cfg: &ModelConfig, root: &str) -> Vec<(String, Vec<usize>)> {
    param_specs(cfg, root)
        .into_iter()
        .map(|s| (s.name, s.dims))
        .collect()
}

/// Parameter count of a component set without materializing tensors.
pub fn param_count(cfg: &ModelConfig, components: &[&str]) -> usize {
    components
        .iter()
        .flat_map(|r| param_specs(cfg, r))
        .map(|s| s.dims.iter().product::<usize>())
        .sum()
}

/// Initialize the requested component roots. Each root draws from its own
/// seed substream, so a root's tensors are identical no matter which other
/// components are initialized alongside it.
pub fn init_params(cfg: &ModelConfig, components: &[&str], seed: u64) -> ParameterTree {
    let mut tree = ParameterTree::new();
    for root in components {
        let mut rng = substream(seed, &format!("init/{root}"));
        for ps in param_specs(cfg, root) {
            let n: usize = ps.dims.iter().product();
            let values: Vec<f64> = match ps.init {
                InitKind::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                InitKind::FanInRelu(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                InitKind::Zeros => vec![0.0; n],
                InitKind::Ones => vec![1.0; n],
            };
            tree.insert(ps.name, ArrayD::from_shape_vec(IxDyn(&ps.dims), values).unwrap());
        }
    }
    tree
}

/// Parameters bound onto a tape as leaves, addressable by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, tree: &ParameterTree) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in tree.iter() {
            vars.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        ParamVars { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Pull parameter gradients out of a backward pass. Parameters that did
    /// not participate in the graph get zero gradients.
    pub fn extract_grads(
        &self,
        tree: &ParameterTree,
        grads: &Gradients,
    ) -> BTreeMap<String, TensorD> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let g = match grads.get(*var) {
                Some(g) => g.clone(),
                None => TensorD::zeros(tree.get(name).unwrap().raw_dim()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

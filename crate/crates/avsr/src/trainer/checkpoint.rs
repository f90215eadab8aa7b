//! Checkpoint container: a directory holding `meta` (structured text with a
//! tensor index) and `tensors.bin` (little-endian f64 blobs). Round trips are
//! bit-exact and every tensor carries a checksum, so single-byte corruption
//! is caught and named.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::autodiff::TensorD;
use crate::bestrq::RandomQuantizer;
use crate::error::{AvsrError, Result};
use crate::model::{ModelConfig, ParameterTree};

use super::optim::AdamState;

const META_FILE: &str = "meta";
const TENSORS_FILE: &str = "tensors.bin";

/// Run metadata stored beside the tensors.
#[derive(Debug, Clone)]
pub struct CkptMeta {
    pub step: u64,
    pub mode: String,
    pub seed: u64,
    pub quantizer_seed: u64,
    pub model: ModelConfig,
}

/// A checkpoint loaded back into memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tree: ParameterTree,
    pub adam: Option<AdamState>,
    pub quantizer: Option<RandomQuantizer>,
    pub meta: CkptMeta,
}

fn tensor_bytes(t: &TensorD) -> Vec<u8> {
    let std = t.as_standard_layout();
    let mut out = Vec::with_capacity(t.len() * 8);
    for &v in std.as_slice().unwrap() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    dir: &Path,
    tree: &ParameterTree,
    adam: Option<&AdamState>,
    quantizer: Option<&RandomQuantizer>,
    meta: &CkptMeta,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AvsrError::io(dir, e))?;
    let mut named: Vec<(String, TensorD)> = Vec::new();
    for (name, t) in tree.iter() {
        named.push((name.clone(), t.clone()));
    }
    if let Some(state) = adam {
        for (name, t) in &state.m {
            named.push((format!("adam_m/{name}"), t.clone()));
        }
        for (name, t) in &state.v {
            named.push((format!("adam_v/{name}"), t.clone()));
        }
    }
    if let Some(q) = quantizer {
        named.push(("quantizer/projection".into(), q.projection.clone().into_dyn()));
        named.push(("quantizer/codebook".into(), q.codebook.clone().into_dyn()));
        named.push(("quantizer/feat_mean".into(), q.feat_mean.clone().into_dyn()));
        named.push(("quantizer/feat_std".into(), q.feat_std.clone().into_dyn()));
    }

    let mut blob = Vec::new();
    let mut meta_text = String::new();
    meta_text.push_str("version=1\n");
    meta_text.push_str(&format!("step={}\n", meta.step));
    meta_text.push_str(&format!("mode={}\n", meta.mode));
    meta_text.push_str(&format!("seed={}\n", meta.seed));
    meta_text.push_str(&format!("quantizer_seed={}\n", meta.quantizer_seed));
    for (k, v) in meta.model.to_kv() {
        meta_text.push_str(&format!("{k}={v}\n"));
    }
    for (name, t) in &named {
        let bytes = tensor_bytes(t);
        let offset = blob.len();
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        meta_text.push_str(&format!(
            "tensor\t{}\tf64\t{}\t{}\t{}\t{}\n",
            name,
            dims.join(","),
            offset,
            bytes.len(),
            sha_hex(&bytes)
        ));
        blob.extend_from_slice(&bytes);
    }
    let bin_path = dir.join(TENSORS_FILE);
    fs::write(&bin_path, blob).map_err(|e| AvsrError::io(&bin_path, e))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta_text).map_err(|e| AvsrError::io(&meta_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| AvsrError::io(&meta_path, e))?;
    let bin_path = dir.join(TENSORS_FILE);
    let blob = fs::read(&bin_path).map_err(|e| AvsrError::io(&bin_path, e))?;

    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    let mut tensors: BTreeMap<String, TensorD> = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("tensor\t") {
            let fields: Vec<&str> = rest.split('\t').collect();
            if fields.len() != 6 {
                return Err(AvsrError::Format(format!(
                    "{}: malformed tensor index line",
                    meta_path.display()
                )));
            }
            let name = fields[0];
            let dims: Vec<usize> = if fields[2].is_empty() {
                vec![]
            } else {
                fields[2]
                    .split(',')
                    .map(|d| {
                        d.parse().map_err(|_| {
                            AvsrError::Format(format!("bad dims for tensor {name}"))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            let offset: usize = fields[3]
                .parse()
                .map_err(|_| AvsrError::Format(format!("bad offset for tensor {name}")))?;
            let nbytes: usize = fields[4]
                .parse()
                .map_err(|_| AvsrError::Format(format!("bad length for tensor {name}")))?;
            if offset + nbytes > blob.len() {
                return Err(AvsrError::Format(format!(
                    "tensor {name} extends past end of tensors.bin"
                )));
            }
            let bytes = &blob[offset..offset + nbytes];
            if sha_hex(bytes) != fields[5] {
                return Err(AvsrError::Format(format!(
                    "tensor {name}: checksum mismatch (corrupt tensors.bin)"
                )));
            }
            let count: usize = dims.iter().product();
            if nbytes != count * 8 {
                return Err(AvsrError::Format(format!(
                    "tensor {name}: payload does not match shape"
                )));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            tensors.insert(
                name.to_string(),
                ArrayD::from_shape_vec(IxDyn(&dims), values).unwrap(),
            );
        } else if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }

    let get = |key: &str| kv.get(key).cloned();
    let need_u64 = |key: &str| -> Result<u64> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AvsrError::Format(format!("meta missing {key}")))
    };
    let meta = CkptMeta {
        step: need_u64("step")?,
        mode: kv
            .get("mode")
            .cloned()
            .ok_or_else(|| AvsrError::Format("meta missing mode".into()))?,
        seed: need_u64("seed")?,
        quantizer_seed: need_u64("quantizer_seed")?,
        model: ModelConfig::from_kv(&get)?,
    };

    let mut tree = ParameterTree::new();
    let mut adam = AdamState::default();
    let mut has_adam = false;
    let mut qparts: BTreeMap<String, TensorD> = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("adam_m/") {
            adam.m.insert(rest.to_string(), t);
            has_adam = true;
        } else if let Some(rest) = name.strip_prefix("adam_v/") {
            adam.v.insert(rest.to_string(), t);
            has_adam = true;
        } else if name.starts_with("quantizer/") {
            qparts.insert(name, t);
        } else {
            tree.insert(name, t);
        }
    }
    let quantizer = if qparts.len() == 4 {
        Some(RandomQuantizer {
            projection: qparts["quantizer/projection"]
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| AvsrError::Format("quantizer projection rank".into()))?,
            codebook: qparts["quantizer/codebook"]
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| AvsrError::Format("quantizer codebook rank".into()))?,
            seed: meta.quantizer_seed,
            feat_mean: Array1::from_iter(qparts["quantizer/feat_mean"].iter().copied()),
            feat_std: Array1::from_iter(qparts["quantizer/feat_std"].iter().copied()),
        })
    } else {
        None
    };
    Ok(Checkpoint {
        tree,
        adam: if has_adam { Some(adam) } else { None },
        quantizer,
        meta,
    })
}

/// Checkpoint subdirectory name for a step.
pub fn ckpt_dir_name(step: u64) -> String {
    format!("ckpt_{step:06}")
}

/// Best-checkpoint pointer file.
pub fn write_best_pointer(out_dir: &Path, step: u64, path: &Path) -> Result<()> {
    let p = out_dir.join("best_checkpoint.txt");
    fs::write(&p, format!("step={}\npath={}\n", step, path.display()))
        .map_err(|e| AvsrError::io(&p, e))
}

/// Resolve a checkpoint directory: accept either a checkpoint itself or a
/// run directory containing `best_checkpoint.txt` or step checkpoints.
pub fn resolve_checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join(META_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    let best = path.join("best_checkpoint.txt");
    if best.exists() {
        let text = fs::read_to_string(&best).map_err(|e| AvsrError::io(&best, e))?;
        for line in text.lines() {
            if let Some(p) = line.strip_prefix("path=") {
                return Ok(PathBuf::from(p));
            }
        }
    }
    // fall back to the highest-numbered step checkpoint
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(entries) = fs::read_dir(path) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() && p.join(META_FILE).exists() {
                candidates.push(p);
            }
        }
    }
    candidates.sort();
    candidates
        .pop()
        .ok_or_else(|| AvsrError::Format(format!("no checkpoint found under {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bestrq::init_quantizer;
    use crate::model::{init_params, ModelConfig};

    fn meta(model: ModelConfig) -> CkptMeta {
        CkptMeta {
            step: 42,
            mode: "pretrain_audio".into(),
            seed: 7,
            quantizer_seed: 1717,
            model,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk();
        let tree = init_params(&cfg, &["audio_frontend", "encoder", "mlm_head"], 9);
        let adam = AdamState::for_tree(&tree);
        let q = init_quantizer(1717, 320, 16, 64);
        save_checkpoint(dir.path(), &tree, Some(&adam), Some(&q), &meta(cfg)).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.meta.step, 42);
        assert_eq!(back.tree.len(), tree.len());
        for (name, _) in tree.iter() {
            assert!(back.tree.tensor_bits_eq(&tree, name), "tensor {name}");
        }
        let bq = back.quantizer.unwrap();
        assert_eq!(bq.projection, q.projection);
        assert_eq!(bq.codebook, q.codebook);
        assert!(back.adam.is_some());
    }

    #[test]
    fn corruption_is_detected_with_tensor_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk();
        let tree = init_params(&cfg, &["mlm_head"], 9);
        save_checkpoint(dir.path(), &tree, None, None, &meta(cfg)).unwrap();
        let bin = dir.path().join(TENSORS_FILE);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[10] ^= 0xff;
        fs::write(&bin, bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("checksum mismatch"), "{msg}");
        assert!(msg.contains("mlm_head/"), "{msg}");
    }
}

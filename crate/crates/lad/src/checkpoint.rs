//! Checkpoint IO: a raw little-endian weights blob plus a JSON manifest
//! carrying the full training configuration and final metrics.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::segnet::{NetConfig, SegNet};
use crate::trainer::{RunKind, TrainConfig};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LADW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub val_miou: f64,
    /// None only for zero-iteration runs, which never compute a loss.
    pub loss_total: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: RunKind,
    pub train_config: TrainConfig,
    pub net: NetConfig,
    pub seed: u64,
    pub optimizer: String,
    pub final_metrics: FinalMetrics,
}

/// Checkpoints are addressed by a prefix; the artifacts live at
/// `<prefix>.weights`, `<prefix>.manifest.json`, `<prefix>.metrics.jsonl`.
fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn weights_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".weights")
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest.json")
}

pub fn metrics_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".metrics.jsonl")
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> LadError {
    LadError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_weights(path: &Path, net: &SegNet<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| ckpt_err(path, format!("create failed: {e}")))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| ckpt_err(path, format!("write failed: {e}"));
    w.write_all(&WEIGHTS_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    let params = net.params_flat();
    w.write_u64::<LittleEndian>(params.len() as u64).map_err(io)?;
    for &v in params.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a weights blob into a freshly built net of the given configuration.
pub fn load_weights(path: &Path, cfg: NetConfig) -> Result<SegNet<f32>> {
    let file = File::open(path).map_err(|e| ckpt_err(path, format!("open failed: {e}")))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| ckpt_err(path, format!("read failed: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != WEIGHTS_MAGIC {
        return Err(ckpt_err(path, "not a weights file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format_version {version} unsupported (expected {FORMAT_VERSION})"),
        ));
    }
    let count = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut net = SegNet::build(cfg)?;
    if count != net.num_params() {
        return Err(ckpt_err(
            path,
            format!(
                "parameter count {count} does not match the manifest net ({})",
                net.num_params()
            ),
        ));
    }
    let mut params = ndarray::Array1::<f32>::zeros(count);
    for v in params.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(io)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(ckpt_err(path, "trailing bytes after parameters"));
    }
    net.set_params_flat(params.view())?;
    Ok(net)
}

pub fn save_checkpoint(
    prefix: &Path,
    net: &SegNet<f32>,
    manifest: &CheckpointManifest,
) -> Result<()> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| LadError::io(format!("creating {}", parent.display()), e))?;
        }
    }
    save_weights(&weights_path(prefix), net)?;
    let path = manifest_path(prefix);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| ckpt_err(&path, format!("serialization failed: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| ckpt_err(&path, format!("write failed: {e}")))
}

pub fn load_manifest(prefix: &Path) -> Result<CheckpointManifest> {
    let path = manifest_path(prefix);
    let text =
        fs::read_to_string(&path).map_err(|e| ckpt_err(&path, format!("unreadable: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| ckpt_err(&path, format!("invalid manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            &path,
            format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

pub fn load_checkpoint(prefix: &Path) -> Result<(SegNet<f32>, CheckpointManifest)> {
    let manifest = load_manifest(prefix)?;
    let net = load_weights(&weights_path(prefix), manifest.net.clone())?;
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn dummy_manifest(net: NetConfig) -> CheckpointManifest {
        let config = TrainConfig::new(net.clone(), PathBuf::from("unused"), 3);
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: RunKind::Baseline,
            train_config: config,
            net,
            seed: 3,
            optimizer: "adam(lr=0.001)".into(),
            final_metrics: FinalMetrics {
                val_miou: 0.5,
                loss_total: Some(1.0),
                wall_clock_seconds: 0.1,
            },
        }
    }

    #[test]
    fn weights_round_trip_is_bitwise() {
        let dir = TempDir::new().unwrap();
        let cfg = NetConfig {
            base_width: 8,
            ..NetConfig::new(3, 4, 11)
        };
        let net = SegNet::<f32>::build(cfg.clone()).unwrap();
        let prefix = dir.path().join("run");
        save_checkpoint(&prefix, &net, &dummy_manifest(cfg.clone())).unwrap();
        let (loaded, manifest) = load_checkpoint(&prefix).unwrap();
        assert_eq!(net.params_flat(), loaded.params_flat());
        assert_eq!(manifest, dummy_manifest(cfg));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bogus.weights");
        fs::write(&path, b"nope").unwrap();
        let err = load_weights(&path, NetConfig::new(3, 4, 1)).unwrap_err();
        assert!(matches!(err, LadError::Checkpoint { .. }));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = TempDir::new().unwrap();
        let cfg = NetConfig {
            base_width: 8,
            ..NetConfig::new(3, 4, 11)
        };
        let net = SegNet::<f32>::build(cfg.clone()).unwrap();
        let path = dir.path().join("run.weights");
        save_weights(&path, &net).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&path, bytes).unwrap();
        assert!(load_weights(&path, cfg).is_err());
    }

    #[test]
    fn param_count_mismatch_is_rejected() {
        let dir = TempDir::new().unwrap();
        let cfg = NetConfig {
            base_width: 8,
            ..NetConfig::new(3, 4, 11)
        };
        let net = SegNet::<f32>::build(cfg).unwrap();
        let path = dir.path().join("run.weights");
        save_weights(&path, &net).unwrap();
        let wider = NetConfig {
            base_width: 16,
            ..NetConfig::new(3, 4, 11)
        };
        let err = load_weights(&path, wider).unwrap_err();
        match err {
            LadError::Checkpoint { reason, .. } => {
                assert!(reason.contains("parameter count"), "{reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_checkpoint_is_a_usage_error() {
        let err = load_checkpoint(Path::new("/nonexistent/run")).unwrap_err();
        assert!(err.is_usage());
    }
}

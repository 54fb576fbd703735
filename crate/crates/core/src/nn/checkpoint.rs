//! Checkpoint format: a JSON manifest (`<stem>.json`) describing layer shapes
//! and hyperparameters, and a binary blob (`<stem>.bin`) holding every
//! parameter as little-endian f64.
//!
//! Blob layout: 8-byte magic `PTTAPARM`, u32 format version, u32 reserved
//! (zero), u64 value count, then the values. Per layer in order: Linear
//! weight (row-major, out×in) and bias; BatchNorm γ, β and, if present, the
//! running mean and variance. RBN globals (mean, variance per BN layer)
//! follow when the manifest carries an `rbn` section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BatchNorm, BnStats, DenseNet, Layer, Linear, StatsProvenance, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rbn::RbnState;

pub const FORMAT: &str = "ptta-checkpoint";
pub const VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PTTAPARM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerManifest {
    Linear { inputs: usize, outputs: usize },
    BatchNorm { width: usize, eps: f64, has_running: bool },
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbnManifest {
    pub alpha: f64,
    pub widths: Vec<usize>,
    pub update_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub bn_momentum: f64,
    pub layers: Vec<LayerManifest>,
    pub rbn: Option<RbnManifest>,
    pub value_count: u64,
}

pub fn encode(net: &DenseNet, rbn: Option<&RbnState>) -> (Manifest, Vec<u8>) {
    let mut values: Vec<f64> = Vec::new();
    let mut layers = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Linear(l) => {
                layers.push(LayerManifest::Linear { inputs: l.weight.cols(), outputs: l.weight.rows() });
                values.extend_from_slice(l.weight.as_slice());
                values.extend_from_slice(&l.bias);
            }
            Layer::BatchNorm(bn) => {
                layers.push(LayerManifest::BatchNorm {
                    width: bn.width(),
                    eps: bn.eps,
                    has_running: bn.running.is_some(),
                });
                values.extend_from_slice(&bn.gamma);
                values.extend_from_slice(&bn.beta);
                if let Some(r) = &bn.running {
                    values.extend_from_slice(&r.mean);
                    values.extend_from_slice(&r.var);
                }
            }
            Layer::Relu => layers.push(LayerManifest::Relu),
        }
    }
    let rbn = rbn.map(|s| {
        let widths = (0..s.num_layers()).map(|i| s.provide(i).width()).collect();
        for i in 0..s.num_layers() {
            values.extend_from_slice(&s.provide(i).mean);
            values.extend_from_slice(&s.provide(i).var);
        }
        RbnManifest { alpha: s.alpha(), widths, update_counts: s.update_counts().to_vec() }
    });
    let mut blob = Vec::with_capacity(24 + 8 * values.len());
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&VERSION.to_le_bytes());
    blob.extend_from_slice(&0u32.to_le_bytes());
    blob.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in &values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        bn_momentum: BN_MOMENTUM,
        layers,
        rbn,
        value_count: values.len() as u64,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<(DenseNet, Option<RbnState>)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(&format!("unsupported {} v{}", manifest.format, manifest.version)));
    }
    if blob.len() < 24 || &blob[..8] != MAGIC {
        return Err(bad("missing blob header"));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("blob version {version}")));
    }
    let count = u64::from_le_bytes(blob[16..24].try_into().expect("8 bytes"));
    if count != manifest.value_count || blob.len() != 24 + 8 * count as usize {
        return Err(bad("blob length disagrees with manifest"));
    }
    let values: Vec<f64> =
        blob[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut rest = values.as_slice();
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if rest.len() < n {
            return Err(bad("blob too short"));
        }
        let (h, t) = rest.split_at(n);
        rest = t;
        Ok(h.to_vec())
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for lm in &manifest.layers {
        layers.push(match *lm {
            LayerManifest::Linear { inputs, outputs } => Layer::Linear(Linear {
                weight: Matrix::from_vec(outputs, inputs, take(inputs * outputs)?)?,
                bias: take(outputs)?,
            }),
            LayerManifest::BatchNorm { width, eps, has_running } => {
                let gamma = take(width)?;
                let beta = take(width)?;
                let running = if has_running {
                    Some(BnStats::new(take(width)?, take(width)?, StatsProvenance::TrainRunning))
                } else {
                    None
                };
                Layer::BatchNorm(BatchNorm { gamma, beta, running, eps })
            }
            LayerManifest::Relu => Layer::Relu,
        });
    }
    let net = DenseNet::from_layers(layers)?;
    let rbn = match &manifest.rbn {
        Some(r) => {
            let mut stats = Vec::with_capacity(r.widths.len());
            for &w in &r.widths {
                stats.push(BnStats::new(take(w)?, take(w)?, StatsProvenance::RbnGlobal));
            }
            Some(RbnState::from_parts(r.alpha, stats, r.update_counts.clone())?)
        }
        None => None,
    };
    if !rest.is_empty() {
        return Err(bad("trailing values in blob"));
    }
    Ok((net, rbn))
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save(stem: &Path, net: &DenseNet, rbn: Option<&RbnState>) -> Result<()> {
    let (json, bin) = paths(stem);
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (manifest, blob) = encode(net, rbn);
    fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(bin, blob)?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<(DenseNet, Option<RbnState>)> {
    let (json, bin) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    decode(&manifest, &fs::read(bin)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpSpec;

    fn net() -> DenseNet {
        let mut n = DenseNet::mlp(&MlpSpec { input_dim: 3, hidden: vec![4, 2], num_classes: 3 }, 5).unwrap();
        n.init_running_stats();
        n
    }

    #[test]
    fn roundtrip_with_rbn() {
        let n = net();
        let mut rbn = RbnState::init_from_pretrained(&n, 0.05).unwrap();
        rbn.ema_update_layer(1, &BnStats::new(vec![0.3, 0.1], vec![2.0, 0.5], StatsProvenance::TestBatch)).unwrap();
        let (m, blob) = encode(&n, Some(&rbn));
        assert_eq!(&blob[..8], b"PTTAPARM");
        let (n2, rbn2) = decode(&m, &blob).unwrap();
        assert_eq!(n2, n);
        assert_eq!(rbn2.unwrap(), rbn);
    }

    #[test]
    fn truncated_blob_rejected() {
        let (m, blob) = encode(&net(), None);
        assert!(decode(&m, &blob[..blob.len() - 8]).is_err());
        let mut wrong = m.clone();
        wrong.version = 2;
        assert!(decode(&wrong, &blob).is_err());
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt/source");
        let n = net();
        save(&stem, &n, None).unwrap();
        let (back, rbn) = load(&stem).unwrap();
        assert_eq!(back, n);
        assert!(rbn.is_none());
    }
}

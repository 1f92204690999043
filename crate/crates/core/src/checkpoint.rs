//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"IGT1"
//! u64            length of the JSON header in bytes
//! [u8]           JSON header: configuration, node ids, scalar state and the
//!                ordered manifest of tensors as {name, shape}
//! f64 * Σnumel   tensor data in manifest order, row-major
//! [u8; 32]       SHA-256 of every preceding byte
//! ```
//!
//! Scalars that must survive bit-for-bit are stored as their `u64` bit
//! patterns.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ElementType;
use crate::error::{IgtError, Result};
use crate::graph::NodeRegistry;
use crate::model::{FeatureScaler, Model, ModelParams, TargetScale};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::thegcn::EmbeddingTable;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"IGT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub registry: NodeRegistry,
    pub initial: Option<EmbeddingTable>,
    pub state: Option<EmbeddingTable>,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val_mae: f64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    raw_widths: [usize; 4],
    node_ids: [Vec<String>; 4],
    epoch: usize,
    best_val_mae_bits: u64,
    adam_step: u64,
    adam_lr_bits: u64,
    tensors: Vec<Entry>,
}

fn table_entries(prefix: &str, t: &Option<EmbeddingTable>, out: &mut Vec<(String, Tensor)>) {
    if let Some(t) = t {
        for kind in ElementType::ALL {
            out.push((format!("{prefix}.{kind}"), t.tables[kind.index()].clone()));
        }
    }
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("1-d")
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.params.flatten();
        table_entries("table.initial", &self.initial, &mut out);
        table_entries("table.state", &self.state, &mut out);
        for kind in ElementType::ALL {
            let k = kind.index();
            out.push((
                format!("scaler.mean.{kind}"),
                vec_tensor(&self.model.scaler.mean[k]),
            ));
            out.push((
                format!("scaler.std.{kind}"),
                vec_tensor(&self.model.scaler.std[k]),
            ));
        }
        let t = self.model.target;
        out.push(("target".into(), vec_tensor(&[t.shift, t.scale])));
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            out.push((format!("adam.m.{i}"), vec_tensor(m)));
            out.push((format!("adam.v.{i}"), vec_tensor(v)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            config: self.config.clone(),
            raw_widths: self.model.raw_widths,
            node_ids: ElementType::ALL.map(|k| self.registry.ids(k)),
            epoch: self.epoch,
            best_val_mae_bits: self.best_val_mae.to_bits(),
            adam_step: self.adam.step,
            adam_lr_bits: self.adam.config.lr.to_bits(),
            tensors: tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| IgtError::Checkpoint(format!("header encoding: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| IgtError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not an IGT1 checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let len = u64::from_le_bytes(body[4..12].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(12..12 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| IgtError::Checkpoint(format!("header: {e}")))?;
        let mut data = &body[12 + len..];
        let mut tensors = HashMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let (chunk, rest) = data.split_at(n * 8);
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, values)?);
            data = rest;
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| IgtError::Checkpoint(format!("missing tensor '{name}'")))
        };

        let cfg = header.config;
        let mut params = ModelParams::init(
            &cfg.model,
            header.raw_widths,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let mut failed = None;
        params.visit_mut(&mut |name, t| match take(name) {
            Ok(v) if v.shape() == t.shape() => *t = v.param(),
            Ok(v) => {
                failed.get_or_insert(IgtError::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            Err(e) => {
                failed.get_or_insert(e);
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        let mut table = |prefix: &str| -> Result<Option<EmbeddingTable>> {
            if !cfg.model.mode.uses_graph() {
                return Ok(None);
            }
            let mut it = ElementType::ALL.into_iter();
            let mut tables = Vec::with_capacity(4);
            for kind in &mut it {
                tables.push(take(&format!("{prefix}.{kind}"))?.param());
            }
            let tables: [Tensor; 4] = tables.try_into().expect("four tables");
            Ok(Some(EmbeddingTable { tables }))
        };
        let initial = table("table.initial")?;
        let state = table("table.state")?;
        let mut mean: [Vec<f64>; 4] = Default::default();
        let mut std: [Vec<f64>; 4] = Default::default();
        for kind in ElementType::ALL {
            mean[kind.index()] = take(&format!("scaler.mean.{kind}"))?.into_data();
            std[kind.index()] = take(&format!("scaler.std.{kind}"))?.into_data();
        }
        let target = take("target")?.into_data();
        if target.len() != 2 {
            return Err(bad("target must hold shift and scale"));
        }
        let mut adam_params: Vec<&Tensor> = Vec::new();
        let flat = params.flatten();
        adam_params.extend(flat.iter().map(|(_, t)| t));
        if let Some(t) = &initial {
            adam_params.extend(t.tables.iter());
        }
        let mut adam_cfg = cfg.adam();
        adam_cfg.lr = f64::from_bits(header.adam_lr_bits);
        let mut adam = AdamState::new(adam_cfg, &adam_params);
        adam.step = header.adam_step;
        for i in 0..adam.m.len() {
            adam.m[i] = take(&format!("adam.m.{i}"))?.into_data();
            adam.v[i] = take(&format!("adam.v.{i}"))?.into_data();
        }
        if let Some(name) = tensors.keys().next() {
            return Err(IgtError::Checkpoint(format!("unexpected tensor '{name}'")));
        }
        let model = Model {
            config: cfg.model.clone(),
            params,
            scaler: FeatureScaler { mean, std },
            target: TargetScale {
                shift: target[0],
                scale: target[1],
            },
            raw_widths: header.raw_widths,
        };
        Ok(Self {
            config: cfg,
            model,
            registry: NodeRegistry::from_ids(header.node_ids)?,
            initial,
            state,
            adam,
            epoch: header.epoch,
            best_val_mae: f64::from_bits(header.best_val_mae_bits),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

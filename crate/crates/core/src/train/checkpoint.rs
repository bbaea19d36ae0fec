//! Versioned single-file checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u32` manifest length, the
//! manifest as JSON, then every array as raw little-endian `f64`s in
//! manifest order. The manifest carries a SHA-256 over itself (with the
//! checksum field blank) and the data, so any edit to either is detected.

use std::collections::BTreeMap;
use std::path::Path;

use oodinv_tensor::optim::{Adam, AdamConfig, Moments};
use oodinv_tensor::{Array, Module};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nets::NetConfig;
use crate::pipeline::Model;
use crate::samm::SammConfig;

pub const MAGIC: &[u8; 8] = b"OODINVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    A1,
    A2,
    B,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::A1 => "a1",
            Stage::A2 => "a2",
            Stage::B => "b",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Stage::A1),
            "a2" => Ok(Stage::A2),
            "b" => Ok(Stage::B),
            _ => Err(Error::Validation(format!("unknown stage {s:?}; expected a1, a2 or b"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    net: NetConfig,
    samm: SammConfig,
    stages: Vec<Stage>,
    optimizers: BTreeMap<String, OptimizerEntry>,
    arrays: Vec<ArrayEntry>,
    /// Free-form provenance such as step counts.
    info: BTreeMap<String, serde_json::Value>,
    checksum: String,
}

/// A model plus training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub stages: Vec<Stage>,
    pub optimizers: BTreeMap<String, Adam>,
    pub info: BTreeMap<String, serde_json::Value>,
}

const GROUPS: [&str; 4] = ["generator", "encoder", "samm", "discriminator"];

fn module<'a>(model: &'a Model, group: &str) -> &'a dyn Module {
    match group {
        "generator" => &model.generator,
        "encoder" => &model.encoder,
        "samm" => &model.samm,
        _ => &model.discriminator,
    }
}

fn module_mut<'a>(model: &'a mut Model, group: &str) -> &'a mut dyn Module {
    match group {
        "generator" => &mut model.generator,
        "encoder" => &mut model.encoder,
        "samm" => &mut model.samm,
        _ => &mut model.discriminator,
    }
}

fn push(arrays: &mut Vec<ArrayEntry>, data: &mut Vec<u8>, name: String, a: &Array) {
    arrays.push(ArrayEntry { name, shape: a.shape().to_vec() });
    for v in a.iter() {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

fn digest(manifest: &Manifest, data: &[u8]) -> Result<String> {
    let mut blank = manifest.clone();
    blank.checksum.clear();
    let json = serde_json::to_vec(&blank).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(&json);
    h.update(data);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint { model, stages: Vec::new(), optimizers: BTreeMap::new(), info: BTreeMap::new() }
    }

    pub fn has_stage(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }

    pub fn mark_stage(&mut self, s: Stage) {
        if !self.has_stage(s) {
            self.stages.push(s);
            self.stages.sort();
        }
    }

    /// Fails unless every listed stage has been trained into this checkpoint.
    pub fn require(&self, needed: &[Stage], purpose: &str) -> Result<()> {
        let missing: Vec<&str> = needed.iter().filter(|s| !self.has_stage(**s)).map(|s| s.name()).collect();
        ensure!(
            missing.is_empty(),
            Precondition,
            "{purpose} needs a checkpoint containing stage(s) {}; missing {}",
            needed.iter().map(|s| s.name()).collect::<Vec<_>>().join("+"),
            missing.join(", ")
        );
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut data = Vec::new();
        for g in GROUPS {
            for (name, p) in module(&self.model, g).named_params() {
                push(&mut arrays, &mut data, format!("{g}.{name}"), p.value());
            }
        }
        let mut optimizers = BTreeMap::new();
        for (key, opt) in &self.optimizers {
            let c = &opt.config;
            optimizers.insert(key.clone(), OptimizerEntry { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, step: opt.step });
            for (pname, m) in &opt.state {
                push(&mut arrays, &mut data, format!("opt.{key}.m.{pname}"), &m.m);
                push(&mut arrays, &mut data, format!("opt.{key}.v.{pname}"), &m.v);
            }
        }
        let mut manifest = Manifest {
            format_version: FORMAT_VERSION,
            net: self.model.net.clone(),
            samm: self.model.samm.cfg.clone(),
            stages: self.stages.clone(),
            optimizers,
            arrays,
            info: self.info.clone(),
            checksum: String::new(),
        };
        manifest.checksum = digest(&manifest, &data)?;
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    /// Parses and verifies a checkpoint. With `expect_net`, the stored
    /// architecture must match it exactly.
    pub fn from_bytes(bytes: &[u8], expect_net: Option<&NetConfig>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        ensure!(bytes.len() >= 12 && &bytes[..8] == MAGIC, Checkpoint, "not a checkpoint file (bad magic)");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        ensure!(bytes.len() >= 12 + len, Checkpoint, "truncated manifest");
        let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + len]).map_err(|e| bad(&format!("manifest: {e}")))?;
        ensure!(
            manifest.format_version == FORMAT_VERSION,
            Checkpoint,
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        );
        let data = &bytes[12 + len..];
        ensure!(digest(&manifest, data)? == manifest.checksum, Checkpoint, "checksum mismatch: the file is corrupted or was edited");
        if let Some(net) = expect_net {
            ensure!(
                &manifest.net == net,
                Checkpoint,
                "checkpoint architecture {:?} does not match the configured {:?}",
                manifest.net,
                net
            );
        }
        let mut values: BTreeMap<String, Array> = BTreeMap::new();
        let mut off = 0;
        for e in &manifest.arrays {
            let n: usize = e.shape.iter().product();
            ensure!(off + 8 * n <= data.len(), Checkpoint, "array {} runs past the end of the file", e.name);
            let v: Vec<f64> = data[off..off + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            off += 8 * n;
            values.insert(e.name.clone(), Array::from_shape_vec(ndarray::IxDyn(&e.shape), v).unwrap());
        }
        ensure!(off == data.len(), Checkpoint, "{} trailing bytes after the last array", data.len() - off);

        let mut model = Model::new(&manifest.net, manifest.samm.clone(), 0)?;
        for g in GROUPS {
            let mut err = None;
            module_mut(&mut model, g).visit_mut("", &mut |name, p| {
                let key = format!("{g}.{name}");
                match values.remove(&key) {
                    Some(a) if a.shape() == p.value().shape() => p.set_value(a),
                    Some(a) => err = Some(format!("{key} has shape {:?}, expected {:?}", a.shape(), p.value().shape())),
                    None => err = Some(format!("missing array {key}")),
                }
            });
            if let Some(e) = err {
                return Err(Error::Checkpoint(e));
            }
        }
        let mut optimizers = BTreeMap::new();
        for (key, o) in &manifest.optimizers {
            let mut adam = Adam::new(AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps });
            adam.step = o.step;
            let prefix = format!("opt.{key}.m.");
            let names: Vec<String> = values.keys().filter_map(|k| k.strip_prefix(&prefix).map(str::to_string)).collect();
            for pname in names {
                let m = values.remove(&format!("opt.{key}.m.{pname}")).unwrap();
                let v = values
                    .remove(&format!("opt.{key}.v.{pname}"))
                    .ok_or_else(|| bad(&format!("optimizer {key} lacks second moments for {pname}")))?;
                adam.state.insert(pname, Moments { m, v });
            }
            optimizers.insert(key.clone(), adam);
        }
        ensure!(values.is_empty(), Checkpoint, "unexpected arrays: {:?}", values.keys().collect::<Vec<_>>());
        Ok(Checkpoint { model, stages: manifest.stages, optimizers, info: manifest.info })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, None)
    }

    /// The manifest checksum, a stable identifier of the exact contents.
    pub fn id(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(checkpoint_id(&bytes))
    }
}

/// Checksum recorded in a serialized checkpoint, without a full parse.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    if bytes.len() < 12 {
        return String::new();
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    serde_json::from_slice::<Manifest>(&bytes[12..(12 + len).min(bytes.len())]).map(|m| m.checksum).unwrap_or_default()
}

/// SHA-256 over every parameter of a module, in visiting order.
pub fn param_hash(m: &dyn Module) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.value().iter() {
            h.update(v.to_le_bytes());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

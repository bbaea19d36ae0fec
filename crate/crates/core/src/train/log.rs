//! Line-delimited JSON training log: a header record describing the run,
//! then one flat record per logged step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::Result;

pub struct TrainLog {
    sink: Option<BufWriter<File>>,
    records: Vec<Map<String, Value>>,
    snapshot: Option<PathBuf>,
}

impl TrainLog {
    /// In-memory only.
    pub fn memory() -> Self {
        TrainLog { sink: None, records: Vec::new(), snapshot: None }
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TrainLog { sink: Some(BufWriter::new(f)), records: Vec::new(), snapshot: None })
    }

    /// Where periodic checkpoints are written during training.
    pub fn with_snapshots(mut self, path: &Path) -> Self {
        self.snapshot = Some(path.to_path_buf());
        self
    }

    pub(crate) fn maybe_snapshot(&mut self, ckpt: &super::Checkpoint, stage: &str, step: usize, every: usize) -> Result<()> {
        if every == 0 || (step + 1) % every != 0 {
            return Ok(());
        }
        if let Some(path) = self.snapshot.clone() {
            ckpt.save(&path)?;
            let mut rec = Map::new();
            rec.insert("snapshot".into(), path.display().to_string().into());
            rec.insert("step".into(), step.into());
            self.note(stage, rec)?;
        }
        Ok(())
    }

    pub fn header(&mut self, stage: &str, config: &impl serde::Serialize, keys: &[&str]) -> Result<()> {
        let mut rec = Map::new();
        rec.insert("type".into(), "header".into());
        rec.insert("stage".into(), stage.into());
        rec.insert("keys".into(), json!(keys));
        rec.insert("config".into(), serde_json::to_value(config).unwrap_or(Value::Null));
        self.write(rec)
    }

    pub fn step(&mut self, stage: &str, step: usize, mut fields: Map<String, Value>) -> Result<()> {
        fields.insert("type".into(), "step".into());
        fields.insert("stage".into(), stage.into());
        fields.insert("step".into(), step.into());
        self.write(fields)
    }

    pub fn note(&mut self, stage: &str, mut fields: Map<String, Value>) -> Result<()> {
        fields.insert("type".into(), "summary".into());
        fields.insert("stage".into(), stage.into());
        self.write(fields)
    }

    fn write(&mut self, rec: Map<String, Value>) -> Result<()> {
        if let Some(w) = &mut self.sink {
            writeln!(w, "{}", Value::Object(rec.clone()))?;
            w.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[Map<String, Value>] {
        &self.records
    }

    /// Values of `key` over the step records of `stage`, in order.
    pub fn series(&self, stage: &str, key: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.get("type").and_then(Value::as_str) == Some("step") && r.get("stage").and_then(Value::as_str) == Some(stage))
            .filter_map(|r| r.get(key).and_then(Value::as_f64))
            .collect()
    }
}

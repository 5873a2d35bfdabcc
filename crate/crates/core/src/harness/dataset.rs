//! On-disk dataset: `dataset.json` metadata, `annotations.jsonl` records and
//! one `RTEN` feature tensor (`frames × cells × dim`) per sample.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fusion::{Model, ModelConfig, PreparedSample, Target};
use crate::retrieval::VisualTokenGrid;
use crate::semantics::Detection;

pub const META_FILE: &str = "dataset.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FORMAT_NAME: &str = "ravar-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub num_samples: usize,
    pub frames: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub world_seed: u64,
    pub encoder_seed: u64,
}

impl DatasetMeta {
    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Errors when a model cannot consume this dataset.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        let mismatch = |what: &str, m: String, d: String| {
            Err(Error::Config(format!("model {what} {m} does not match dataset {what} {d}")))
        };
        if model.dim != self.dim {
            return mismatch("dim", model.dim.to_string(), self.dim.to_string());
        }
        if model.num_classes != self.classes {
            return mismatch("classes", model.num_classes.to_string(), self.classes.to_string());
        }
        if model.encoder_seed != self.encoder_seed {
            return mismatch(
                "encoder seed",
                model.encoder_seed.to_string(),
                self.encoder_seed.to_string(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SampleRecord {
    pub video_id: String,
    pub num_frames: usize,
    pub keyframe_index: usize,
    pub reference: String,
    pub gt_bbox: [f64; 4],
    pub action_labels: Vec<usize>,
    pub features_ref: String,
    pub detections: Vec<Detection>,
}

const FIELDS: [&str; 8] = [
    "video-id",
    "num-frames",
    "keyframe-index",
    "reference",
    "gt-bbox",
    "action-labels",
    "features-ref",
    "detections",
];

fn parse_error(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| parse_error(line, name, "missing field"))?;
    serde_json::from_value(v.clone()).map_err(|e| parse_error(line, name, e.to_string()))
}

fn well_formed_box(b: &[f64; 4]) -> bool {
    b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] < b[2] && b[1] < b[3]
}

/// Parses one annotation line (1-based `line`) and checks record invariants.
pub fn parse_record(text: &str, line: usize) -> Result<SampleRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_error(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_error(line, "<record>", "expected an object"))?;
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(parse_error(line, extra, "unknown field"));
    }
    let rec = SampleRecord {
        video_id: field(obj, "video-id", line)?,
        num_frames: field(obj, "num-frames", line)?,
        keyframe_index: field(obj, "keyframe-index", line)?,
        reference: field(obj, "reference", line)?,
        gt_bbox: field(obj, "gt-bbox", line)?,
        action_labels: field(obj, "action-labels", line)?,
        features_ref: field(obj, "features-ref", line)?,
        detections: field(obj, "detections", line)?,
    };
    if rec.video_id.is_empty() {
        return Err(parse_error(line, "video-id", "empty id"));
    }
    if rec.num_frames == 0 {
        return Err(parse_error(line, "num-frames", "must be at least 1"));
    }
    if rec.keyframe_index >= rec.num_frames {
        return Err(parse_error(
            line,
            "keyframe-index",
            format!("{} is not below num-frames {}", rec.keyframe_index, rec.num_frames),
        ));
    }
    if rec.reference.trim().is_empty() {
        return Err(parse_error(line, "reference", "empty reference"));
    }
    if !well_formed_box(&rec.gt_bbox) {
        return Err(parse_error(
            line,
            "gt-bbox",
            format!("{:?} is not a normalized box with x1<x2, y1<y2", rec.gt_bbox),
        ));
    }
    if rec.features_ref.is_empty() {
        return Err(parse_error(line, "features-ref", "empty path"));
    }
    for (i, d) in rec.detections.iter().enumerate() {
        d.validate()
            .map_err(|e| parse_error(line, "detections", format!("detection {i}: {e}")))?;
    }
    Ok(rec)
}

/// Reads line-delimited records, stopping at the first invalid line.
pub fn load_annotations(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

pub fn write_annotations(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        if meta.format != FORMAT_NAME || meta.version != 1 {
            return Err(Error::Format(format!(
                "{}: unsupported dataset format {} v{}",
                meta_path.display(),
                meta.format,
                meta.version
            )));
        }
        let records = load_annotations(&root.join(ANNOTATIONS_FILE))?;
        for (i, r) in records.iter().enumerate() {
            if let Some(bad) = r.action_labels.iter().find(|c| **c >= meta.classes) {
                return Err(parse_error(
                    i + 1,
                    "action-labels",
                    format!("class {bad} outside 0..{}", meta.classes),
                ));
            }
        }
        if records.len() != meta.num_samples {
            return Err(Error::Format(format!(
                "metadata lists {} samples, annotations hold {}",
                meta.num_samples,
                records.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Feature grid of sample `index`; a missing or unreadable tensor is a
    /// resolution error.
    pub fn load_grid(&self, index: usize) -> Result<VisualTokenGrid> {
        let rec = &self.records[index];
        let path = self.root.join(&rec.features_ref);
        let tensor = Tensor::read(&path).map_err(|e| Error::Resolution {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let expected = [rec.num_frames, self.meta.cells(), self.meta.dim];
        if tensor.dims != expected {
            return Err(Error::Resolution {
                path,
                message: format!("tensor dims {:?}, expected {expected:?}", tensor.dims),
            });
        }
        VisualTokenGrid::new(expected[0], expected[1], expected[2], tensor.data)
    }

    pub fn target(&self, index: usize) -> Target {
        let rec = &self.records[index];
        let mut labels = vec![0.0; self.meta.classes];
        for c in &rec.action_labels {
            labels[*c] = 1.0;
        }
        Target {
            bbox: rec.gt_bbox,
            labels,
        }
    }

    /// Every sample with ground truth attached, ready for a model.
    pub fn prepare(&self, model: &Model) -> Result<Vec<PreparedSample>> {
        self.meta.check_model(model.config())?;
        (0..self.len())
            .map(|i| {
                let rec = &self.records[i];
                model.prepare(
                    rec.video_id.clone(),
                    self.load_grid(i)?,
                    &rec.reference,
                    rec.detections.clone(),
                    Some(self.target(i)),
                )
            })
            .collect()
    }
}

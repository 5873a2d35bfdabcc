//! Runs a trained model over a dataset and aggregates the metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Model, PreparedSample};
use crate::metrics::{iou, summarize, EvalRecord, MetricSummary};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricSummary,
    pub num_samples: usize,
    pub samples: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Forward pass per sample (in parallel over `workers` threads), then metrics.
pub fn predict_records(
    model: &Model,
    params: &ParamStore,
    samples: &[PreparedSample],
    workers: usize,
) -> Result<Vec<EvalRecord>> {
    let one = |s: &PreparedSample| -> Result<EvalRecord> {
        let target = s
            .target
            .as_ref()
            .ok_or_else(|| Error::Input(format!("sample {} has no ground truth", s.id)))?;
        let out = model.forward(params, s)?;
        Ok(EvalRecord {
            sample_id: s.id.clone(),
            gt_bbox: target.bbox,
            pred_bbox: out.bbox,
            gt_labels: target.labels.iter().map(|v| *v > 0.5).collect(),
            pred_scores: out.class_probs,
        })
    };
    if workers <= 1 || samples.len() <= 1 {
        return samples.iter().map(one).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

pub fn report_from_records(records: Vec<EvalRecord>) -> Result<EvalReport> {
    let metrics = summarize(&records)?;
    Ok(EvalReport {
        metrics,
        num_samples: records.len(),
        samples: records
            .into_iter()
            .map(|r| ReportRow {
                iou: iou(&r.gt_bbox, &r.pred_bbox),
                record: r,
            })
            .collect(),
    })
}

pub fn evaluate(model: &Model, params: &ParamStore, samples: &[PreparedSample], workers: usize) -> Result<EvalReport> {
    report_from_records(predict_records(model, params, samples, workers)?)
}

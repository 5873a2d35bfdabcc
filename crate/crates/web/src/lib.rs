//! Browser bindings for three interactive views: keyword retrieval over a
//! synthetic clip, the response of a one-state scan, and box overlap.
//! Every binding returns a JSON string; the plain functions in [`demo`] do the
//! work and are usable natively.

use wasm_bindgen::prelude::*;

pub mod demo {
    use ravar::harness::fixtures::{generate_samples, FixtureConfig};
    use ravar::metrics::iou;
    use ravar::retrieval::{build_trajectory_set, TrajectoryKind};
    use ravar::semantics::{embed_reference, StopSet, SyntheticEncoder};
    use ravar::ssm::{ssm_scan, ssm_scan_oracle, SsmLayerParams};
    use ravar::DenseMatrix;
    use serde::Serialize;

    #[derive(Serialize)]
    pub struct KeywordTrack {
        pub keyword: String,
        /// Chosen cell per frame.
        pub cells: Vec<usize>,
        /// `frames × cells` Euclidean distances.
        pub distances: Vec<Vec<f64>>,
    }

    #[derive(Serialize)]
    pub struct RetrievalView {
        pub frames: usize,
        pub rows: usize,
        pub cols: usize,
        pub reference: String,
        pub planted_cell: usize,
        pub gt_bbox: [f64; 4],
        pub tracks: Vec<KeywordTrack>,
    }

    fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
        serde_json::to_string(v).map_err(|e| e.to_string())
    }

    /// Generates one fixture clip and traces its keywords through the grid.
    pub fn retrieval(seed: u64, frames: usize, rows: usize, cols: usize) -> Result<String, String> {
        let cfg = FixtureConfig {
            num_samples: 1,
            frames,
            grid_rows: rows,
            grid_cols: cols,
            seed,
            ..FixtureConfig::default()
        };
        let sample = generate_samples(&cfg)
            .map_err(|e| e.to_string())?
            .pop()
            .ok_or("no sample generated")?;
        let encoder = SyntheticEncoder {
            dim: cfg.dim,
            seed: cfg.encoder_seed,
        };
        let bundle = embed_reference(&sample.record.reference, &StopSet::default_list(), &encoder)
            .map_err(|e| e.to_string())?;
        let set = build_trajectory_set(&bundle.keyword_embeddings, &sample.grid, TrajectoryKind::Keyword)
            .map_err(|e| e.to_string())?;
        let tracks = set
            .trajectories
            .iter()
            .map(|t| {
                let q = bundle.keyword_embeddings.row(t.query_index);
                let distances = (0..frames)
                    .map(|l| {
                        (0..sample.grid.cells())
                            .map(|s| {
                                let tok = sample.grid.token(l, s);
                                q.iter().zip(tok).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                            })
                            .collect()
                    })
                    .collect();
                KeywordTrack {
                    keyword: bundle.keywords[t.query_index].clone(),
                    cells: t.spatial_indices(),
                    distances,
                }
            })
            .collect();
        to_json(&RetrievalView {
            frames,
            rows,
            cols,
            reference: sample.record.reference.clone(),
            planted_cell: sample.planted.1,
            gt_bbox: sample.record.gt_bbox,
            tracks,
        })
    }

    #[derive(Serialize)]
    pub struct ScanView {
        pub input: Vec<f64>,
        pub output: Vec<f64>,
        pub reference_output: Vec<f64>,
    }

    /// One-state scan `h = a·h + x`, `y = h`, driven by an impulse or a step.
    pub fn scan_response(decay: f64, length: usize, step_input: bool) -> Result<String, String> {
        if length == 0 || length > 4096 {
            return Err("length must be in 1..=4096".into());
        }
        let input: Vec<f64> = (0..length)
            .map(|l| if step_input || l == 0 { 1.0 } else { 0.0 })
            .collect();
        let x = DenseMatrix::new(length, 1, input.clone()).map_err(|e| e.to_string())?;
        let params = SsmLayerParams::diagonal(1, decay);
        let fast = ssm_scan(&x, &params).map_err(|e| e.to_string())?;
        let slow = ssm_scan_oracle(&x, &params).map_err(|e| e.to_string())?;
        to_json(&ScanView {
            input,
            output: fast.outputs.into_data(),
            reference_output: slow.outputs.into_data(),
        })
    }

    #[derive(Serialize)]
    pub struct OverlapView {
        pub iou: f64,
    }

    pub fn overlap(a: [f64; 4], b: [f64; 4]) -> Result<String, String> {
        to_json(&OverlapView { iou: iou(&a, &b) })
    }
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn retrieval_view(seed: u32, frames: u32, rows: u32, cols: u32) -> Result<String, JsValue> {
    js(demo::retrieval(seed as u64, frames as usize, rows as usize, cols as usize))
}

#[wasm_bindgen]
pub fn scan_view(decay: f64, length: u32, step_input: bool) -> Result<String, JsValue> {
    js(demo::scan_response(decay, length as usize, step_input))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn overlap_view(ax1: f64, ay1: f64, ax2: f64, ay2: f64, bx1: f64, by1: f64, bx2: f64, by2: f64) -> Result<String, JsValue> {
    js(demo::overlap([ax1, ay1, ax2, ay2], [bx1, by1, bx2, by2]))
}

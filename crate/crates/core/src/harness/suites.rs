//! Randomized equivalence and property suites shared by the command line and
//! the test suite, plus the full-model gradient check setup.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fixtures::{generate_samples, FixtureConfig};
use crate::error::{Error, Result};
use crate::fusion::{Model, ModelConfig, ModelObjective, PreparedSample, Target};
use crate::metrics::{self, oracle, EvalRecord};
use crate::numerics::{grad_check, DenseMatrix, GradCheckReport};
use crate::ssm::{ssm_scan, ssm_scan_oracle, SsmLayerParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_diff: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {}/{} cases within {:e} (max diff {:.3e}, {:.2?})",
            self.name,
            self.cases - self.failures,
            self.cases,
            self.tolerance,
            self.max_diff,
            self.elapsed
        )
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseMatrix::new(rows, cols, data).expect("sized buffer")
}

/// Random layer with `N_L ≤ 32`, `d, d_s, n ≤ 8` and row sums of `|A|` below
/// one so sequences stay bounded.
pub fn random_scan_case(rng: &mut ChaCha8Rng) -> (DenseMatrix, SsmLayerParams) {
    let len = rng.gen_range(1..=32);
    let d = rng.gen_range(1..=8);
    let d_s = rng.gen_range(1..=8);
    let n = rng.gen_range(1..=8);
    let params = SsmLayerParams {
        in_proj: random_matrix(rng, d, d_s, 1.0),
        a: random_matrix(rng, n, n, 0.95 / n as f64),
        b: random_matrix(rng, n, d_s, 1.0),
        c: random_matrix(rng, d_s, n, 1.0),
    };
    (random_matrix(rng, len, d, 2.0), params)
}

fn run_suite(
    name: &'static str,
    cases: usize,
    tolerance: f64,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let (mut failures, mut max_diff) = (0, 0.0f64);
    for _ in 0..cases {
        let diff = case(&mut rng)?;
        if !(diff <= tolerance) {
            failures += 1;
        }
        max_diff = max_diff.max(if diff.is_nan() { f64::INFINITY } else { diff });
    }
    Ok(SuiteReport {
        name,
        cases,
        failures,
        max_diff,
        tolerance,
        elapsed: start.elapsed(),
    })
}

/// Fast scan against the scalar-loop reference.
pub fn scan_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    run_suite("scan-oracle", cases, 1e-10, seed, |rng| {
        let (x, p) = random_scan_case(rng);
        let fast = ssm_scan(&x, &p)?;
        let slow = ssm_scan_oracle(&x, &p)?;
        Ok(fast.outputs.max_abs_diff(&slow.outputs))
    })
}

/// `scan(αx + βy) = α·scan(x) + β·scan(y)`.
pub fn scan_linearity_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    run_suite("scan-linearity", cases, 1e-10, seed, |rng| {
        let (x, p) = random_scan_case(rng);
        let y = random_matrix(rng, x.rows(), x.cols(), 2.0);
        let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mixed = ssm_scan(&x.scale(alpha).add(&y.scale(beta))?, &p)?.outputs;
        let split = ssm_scan(&x, &p)?
            .outputs
            .scale(alpha)
            .add(&ssm_scan(&y, &p)?.outputs.scale(beta))?;
        Ok(mixed.max_abs_diff(&split))
    })
}

/// Scanning a prefix reproduces the first rows of the full scan.
pub fn scan_prefix_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    run_suite("scan-prefix", cases, 1e-10, seed, |rng| {
        let (x, p) = random_scan_case(rng);
        let k = rng.gen_range(1..=x.rows());
        let rows: Vec<&[f64]> = (0..k).map(|i| x.row(i)).collect();
        let prefix = ssm_scan(&DenseMatrix::from_rows(&rows)?, &p)?.outputs;
        let full = ssm_scan(&x, &p)?.outputs;
        let head: Vec<&[f64]> = (0..k).map(|i| full.row(i)).collect();
        Ok(prefix.max_abs_diff(&DenseMatrix::from_rows(&head)?))
    })
}

/// Up to 6 samples × 3 classes with scores from a coarse grid, so ties are
/// common.
pub fn random_metric_instance(rng: &mut ChaCha8Rng) -> Vec<EvalRecord> {
    let samples = rng.gen_range(1..=6);
    let classes = rng.gen_range(1..=3);
    (0..samples)
        .map(|i| EvalRecord {
            sample_id: i.to_string(),
            gt_bbox: [0.0, 0.0, 1.0, 1.0],
            pred_bbox: [0.0, 0.0, 1.0, 1.0],
            gt_labels: (0..classes).map(|_| rng.gen_bool(0.5)).collect(),
            pred_scores: (0..classes).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect(),
        })
        .collect()
}

fn compare(fast: Result<f64>, slow: Option<f64>) -> f64 {
    match (fast, slow) {
        (Ok(a), Some(b)) => (a - b).abs(),
        (Err(_), None) => 0.0,
        _ => f64::INFINITY,
    }
}

pub fn map_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    run_suite("map-oracle", cases, 1e-9, seed, |rng| {
        let recs = random_metric_instance(rng);
        Ok(compare(metrics::multilabel_map(&recs), oracle::multilabel_map(&recs)))
    })
}

pub fn auroc_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    run_suite("auroc-oracle", cases, 1e-9, seed, |rng| {
        let recs = random_metric_instance(rng);
        Ok(compare(metrics::auroc(&recs), oracle::auroc(&recs)))
    })
}

/// Small end-to-end setup for finite-difference checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub frames: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub samples: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                dim: 16,
                ssm_dim: 8,
                attn_dim: 8,
                state_dim: 4,
                num_prompts: 2,
                num_classes: 5,
                ..ModelConfig::default()
            },
            frames: 4,
            grid_rows: 2,
            grid_cols: 2,
            samples: 2,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Fixture samples matching the model dims.
    pub fn samples(&self, model: &Model, seed: u64) -> Result<Vec<PreparedSample>> {
        let fixtures = generate_samples(&FixtureConfig {
            num_samples: self.samples,
            frames: self.frames,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            dim: self.model.dim,
            classes: self.model.num_classes,
            seed,
            encoder_seed: self.model.encoder_seed,
            ..FixtureConfig::default()
        })?;
        fixtures
            .into_iter()
            .map(|f| {
                let mut labels = vec![0.0; self.model.num_classes];
                f.record.action_labels.iter().for_each(|c| labels[*c] = 1.0);
                model.prepare(
                    f.record.video_id,
                    f.grid,
                    &f.record.reference,
                    f.record.detections,
                    Some(Target {
                        bbox: f.record.gt_bbox,
                        labels,
                    }),
                )
            })
            .collect()
    }
}

/// Central differences over every parameter of a freshly initialized model.
pub fn model_grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(cfg.model.clone())?;
    let samples = cfg.samples(&model, seed)?;
    let mut params = model.init_params(seed)?;
    let objective = ModelObjective {
        model: &model,
        samples: &samples,
    };
    grad_check(&objective, &mut params, cfg.eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for report in [
            scan_oracle_suite(50, 1).unwrap(),
            scan_linearity_suite(50, 2).unwrap(),
            scan_prefix_suite(50, 3).unwrap(),
            map_oracle_suite(50, 4).unwrap(),
            auroc_oracle_suite(50, 5).unwrap(),
        ] {
            assert!(report.passed(), "{report}");
        }
    }
}

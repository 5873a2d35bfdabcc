//! Synthetic planted-signal datasets. Every background cell carries a shared
//! offset, a fixed position vector and noise. The referred person sits at one
//! cell: its token is the encoding of the reference keywords plus its own
//! position vector and the sum of its action classes' signature vectors. The
//! ground-truth box is that cell's rectangle.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_annotations, DatasetMeta, SampleRecord, ANNOTATIONS_FILE, FORMAT_NAME, META_FILE};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::numerics::params::stable_hash;
use crate::retrieval::VisualTokenGrid;
use crate::semantics::{Detection, SyntheticEncoder, TextEncoder};

pub const KEYWORDS: [&str; 24] = [
    "man", "woman", "boy", "girl", "red", "blue", "green", "black", "white", "shirt", "jacket", "hat",
    "tall", "short", "glasses", "beard", "young", "old", "dress", "coat", "left", "right", "striped",
    "bald",
];

pub const OBJECT_CATEGORIES: [&str; 8] = ["chair", "table", "car", "cup", "dog", "bag", "bottle", "person"];

const TEMPLATES: [&str; 4] = ["the {0} is {1}", "a {0} with the {1}", "this {0} near the {1}", "the {0} and the {1}"];

const POSITION_SCALE: f64 = 1.0;
const SIGNATURE_SCALE: f64 = 0.5;
const BACKGROUND_STD: f64 = 0.25;
const BACKGROUND_OFFSET: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub num_samples: usize,
    pub frames: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dim: usize,
    pub classes: usize,
    /// Seeds the per-sample draws.
    pub seed: u64,
    /// Seeds shared structure (class signatures, cell embeddings) so that
    /// splits generated with different `seed`s come from one world.
    pub world_seed: u64,
    pub encoder_seed: u64,
    /// Standard deviation of the noise added to the planted token.
    pub plant_noise: f64,
    /// Plant the referred person at the target cell in every frame rather
    /// than only at the keyframe.
    pub persistent_target: bool,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            num_samples: 32,
            frames: 8,
            grid_rows: 4,
            grid_cols: 4,
            dim: 32,
            classes: 10,
            seed: 7,
            world_seed: 0,
            encoder_seed: 0,
            plant_noise: 0.05,
            persistent_target: true,
        }
    }
}

impl FixtureConfig {
    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn keyframe(&self) -> usize {
        self.frames / 2
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.grid_rows == 0 || self.grid_cols == 0 || self.classes == 0 {
            return Err(Error::Config("frames, grid and classes must be at least 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if !(self.plant_noise >= 0.0 && self.plant_noise.is_finite()) {
            return Err(Error::Config("plant_noise must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            format: FORMAT_NAME.into(),
            version: 1,
            num_samples: self.num_samples,
            frames: self.frames,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            dim: self.dim,
            classes: self.classes,
            seed: self.seed,
            world_seed: self.world_seed,
            encoder_seed: self.encoder_seed,
        }
    }
}

fn scaled_direction(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x *= scale / norm);
    v
}

struct World {
    signatures: Vec<Vec<f64>>,
    positions: Vec<Vec<f64>>,
    /// Added to every scenery token, keeping it away from the unit sphere
    /// where keyword embeddings live.
    offset: Vec<f64>,
}

impl World {
    fn new(cfg: &FixtureConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(b"fixture-world", cfg.world_seed));
        Self {
            signatures: (0..cfg.classes)
                .map(|_| scaled_direction(&mut rng, cfg.dim, SIGNATURE_SCALE))
                .collect(),
            positions: (0..cfg.cells())
                .map(|_| scaled_direction(&mut rng, cfg.dim, POSITION_SCALE))
                .collect(),
            offset: scaled_direction(&mut rng, cfg.dim, BACKGROUND_OFFSET),
        }
    }
}

/// A generated sample with its planted `(frame, cell)`.
#[derive(Debug, Clone)]
pub struct FixtureSample {
    pub record: SampleRecord,
    pub grid: VisualTokenGrid,
    pub planted: (usize, usize),
    pub keywords: Vec<String>,
}

/// Normalized box of grid cell `cell` (row-major).
pub fn cell_box(cell: usize, rows: usize, cols: usize) -> [f64; 4] {
    let (r, c) = ((cell / cols) as f64, (cell % cols) as f64);
    let (w, h) = (1.0 / cols as f64, 1.0 / rows as f64);
    [c * w, r * h, (c + 1.0) * w, (r + 1.0) * h]
}

fn generate_one(cfg: &FixtureConfig, world: &World, encoder: &SyntheticEncoder, index: usize) -> Result<FixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&(index as u64).to_le_bytes(), cfg.seed));
    let background = Normal::new(0.0, BACKGROUND_STD).expect("positive std");
    let plant = Normal::new(0.0, cfg.plant_noise.max(f64::MIN_POSITIVE)).expect("positive std");
    let (frames, cells, dim) = (cfg.frames, cfg.cells(), cfg.dim);

    let count = rng.gen_range(1..=2usize);
    let keywords: Vec<String> = KEYWORDS
        .choose_multiple(&mut rng, count)
        .map(|s| s.to_string())
        .collect();
    let reference = if count == 1 {
        format!("the {}", keywords[0])
    } else {
        let t = TEMPLATES.choose(&mut rng).expect("templates");
        t.replace("{0}", &keywords[0]).replace("{1}", &keywords[1])
    };

    let n_labels = rng.gen_range(1..=cfg.classes.min(3));
    let mut labels: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.classes, n_labels).into_vec();
    labels.sort_unstable();
    let mut actions = vec![0.0; dim];
    for c in &labels {
        actions.iter_mut().zip(&world.signatures[*c]).for_each(|(s, v)| *s += v);
    }

    let target_cell = rng.gen_range(0..cells);
    let keyframe = cfg.keyframe();

    let mut tokens = Vec::with_capacity(frames * cells * dim);
    for _ in 0..frames {
        for s in 0..cells {
            for k in 0..dim {
                tokens.push(background.sample(&mut rng) + world.offset[k] + world.positions[s][k]);
            }
        }
    }
    let look = encoder.encode_sentence(&keywords)?;
    let planted_frames = if cfg.persistent_target { 0..frames } else { keyframe..keyframe + 1 };
    for l in planted_frames {
        let at = (l * cells + target_cell) * dim;
        for (k, v) in tokens[at..at + dim].iter_mut().enumerate() {
            *v = look[k] + plant.sample(&mut rng) + world.positions[target_cell][k] + actions[k];
        }
    }

    let gt_bbox = cell_box(target_cell, cfg.grid_rows, cfg.grid_cols);
    let mut detections = vec![Detection {
        bbox: gt_bbox,
        category: "person".into(),
        confidence: 0.95,
    }];
    for _ in 0..rng.gen_range(0..=3usize) {
        let w = rng.gen_range(0.1..0.3);
        let h = rng.gen_range(0.1..0.3);
        let x1: f64 = rng.gen_range(0.0..1.0 - w);
        let y1: f64 = rng.gen_range(0.0..1.0 - h);
        detections.push(Detection {
            bbox: [x1, y1, x1 + w, y1 + h],
            category: OBJECT_CATEGORIES.choose(&mut rng).expect("categories").to_string(),
            confidence: rng.gen_range(0.3..0.94),
        });
    }
    detections.shuffle(&mut rng);

    let video_id = format!("vid{index:05}");
    let record = SampleRecord {
        features_ref: format!("features/{video_id}.rten"),
        video_id,
        num_frames: frames,
        keyframe_index: keyframe,
        reference,
        gt_bbox,
        action_labels: labels,
        detections,
    };
    Ok(FixtureSample {
        record,
        grid: VisualTokenGrid::new(frames, cells, dim, tokens)?,
        planted: (keyframe, target_cell),
        keywords,
    })
}

/// In-memory samples; a pure function of the config.
pub fn generate_samples(cfg: &FixtureConfig) -> Result<Vec<FixtureSample>> {
    cfg.validate()?;
    let world = World::new(cfg);
    let encoder = SyntheticEncoder {
        dim: cfg.dim,
        seed: cfg.encoder_seed,
    };
    (0..cfg.num_samples)
        .map(|i| generate_one(cfg, &world, &encoder, i))
        .collect()
}

/// Writes metadata, annotations and feature tensors under `out`.
pub fn generate_fixtures(cfg: &FixtureConfig, out: &Path) -> Result<Vec<FixtureSample>> {
    let samples = generate_samples(cfg)?;
    let features = out.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    for s in &samples {
        let grid = &s.grid;
        Tensor::new(vec![grid.frames(), grid.cells(), grid.dim()], grid.tokens().to_vec())?
            .write(&out.join(&s.record.features_ref))?;
    }
    let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
    write_annotations(&out.join(ANNOTATIONS_FILE), &records)?;
    let meta_path = out.join(META_FILE);
    let mut meta = serde_json::to_string_pretty(&cfg.meta()).map_err(|e| Error::Format(e.to_string()))?;
    meta.push('\n');
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(samples)
}

//! Minibatch training with Adam, linear warmup and stepwise decay.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::{Model, PreparedSample};
use crate::numerics::params::stable_hash;
use crate::numerics::{DenseMatrix, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

/// Mean loss and mean gradients over `batch`. Per-sample work is spread over
/// `workers` threads but reduced in sample order, so the result does not
/// depend on the thread count.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    batch: &[&PreparedSample],
    workers: usize,
) -> Result<(f64, BTreeMap<String, DenseMatrix>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per_sample: Vec<Result<(f64, BTreeMap<String, DenseMatrix>)>> = if workers <= 1 || batch.len() == 1 {
        batch
            .iter()
            .map(|s| model.loss_and_grad(params, s).map(|(l, g, _)| (l, g)))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| model.loss_and_grad(params, s).map(|(l, g, _)| (l, g)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };

    let mut loss = 0.0;
    let mut grads: BTreeMap<String, DenseMatrix> = BTreeMap::new();
    for item in per_sample {
        let (l, g) = item?;
        loss += l;
        for (name, m) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&m)?,
                None => {
                    grads.insert(name, m);
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for m in grads.values_mut() {
        *m = m.scale(inv);
    }
    Ok((loss * inv, grads))
}

struct Adam {
    m: BTreeMap<String, DenseMatrix>,
    v: BTreeMap<String, DenseMatrix>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamStore) -> Self {
        let zeros = || -> BTreeMap<String, DenseMatrix> {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), DenseMatrix::zeros(p.rows(), p.cols())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, DenseMatrix>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

fn snapshot(step: usize, rng: &ChaCha8Rng, seed: u64, config: &TrainConfig, params: &ParamStore, adam: &Adam) -> Checkpoint {
    let mut c = Checkpoint::from_store(
        step,
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        },
        config.clone(),
        params,
    );
    if adam.t > 0 {
        c.first_moment = adam.m.clone();
        c.second_moment = adam.v.clone();
    }
    c
}

/// Trains from a fresh initialization. `observe` sees every step.
pub fn train(
    model: &Model,
    config: &TrainConfig,
    samples: &[PreparedSample],
    mut observe: impl FnMut(&StepRecord),
) -> Result<TrainRun> {
    config.validate()?;
    if model.config() != &config.model {
        return Err(Error::Config("model was built from a different config".into()));
    }
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut params = model.init_params(config.seed)?;
    let mut adam = Adam::new(&params);
    let rng_seed = stable_hash(b"batch-order", config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let batch = config.batch_size.min(samples.len());
    let per_epoch = samples.len() / batch;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = per_epoch;
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if cursor == per_epoch {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let members: Vec<&PreparedSample> = order[cursor * batch..(cursor + 1) * batch]
            .iter()
            .map(|&i| &samples[i])
            .collect();
        cursor += 1;

        let (loss, grads) = batch_gradients(model, &params, &members, config.workers)?;
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(snapshot(step, &rng, rng_seed, config, &params, &adam)),
            });
        }
        let lr = config.lr_at(step, per_epoch);
        adam.update(&mut params, &grads, lr)?;
        let record = StepRecord { step, loss, lr };
        observe(&record);
        history.push(record);
    }
    Ok(TrainRun {
        checkpoint: snapshot(config.steps, &rng, rng_seed, config, &params, &adam),
        history,
    })
}

/// `step,loss,lr` CSV with exact float formatting.
pub fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss,lr").expect("in-memory write");
    for r in history {
        writeln!(out, "{},{:?},{:?}", r.step, r.loss, r.lr).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

//! State-space aggregation of token sequences.
//!
//! Each layer projects its input (`d → d_s`) and then runs
//! `h(l) = A·h(l−1) + B·x̃(l)`, `out(l) = C·h(l)` with a unit step size, so
//! `A`, `B`, `C` are used as learned, without discretization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::param_rng;
use crate::numerics::recurrence;
use crate::numerics::{DenseMatrix, ParamStore};
use crate::retrieval::TrajectorySet;

#[derive(Debug, Clone, PartialEq)]
pub struct SsmLayerParams {
    /// `d × d_s`
    pub in_proj: DenseMatrix,
    /// `n × n`
    pub a: DenseMatrix,
    /// `n × d_s`
    pub b: DenseMatrix,
    /// `d_s × n`
    pub c: DenseMatrix,
}

impl SsmLayerParams {
    pub fn input_dim(&self) -> usize {
        self.in_proj.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.in_proj.cols()
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_s, n) = (self.model_dim(), self.state_dim());
        if self.a.shape() != (n, n) {
            return Err(Error::dim("ssm A", self.a.shape(), (n, n)));
        }
        if self.b.shape() != (n, d_s) {
            return Err(Error::dim("ssm B", self.b.shape(), (n, d_s)));
        }
        if self.c.shape() != (d_s, n) {
            return Err(Error::dim("ssm C", self.c.shape(), (d_s, n)));
        }
        Ok(())
    }

    /// Registers `{prefix}.in_proj/.a/.b/.c` in `store`. `A` starts diagonal
    /// with entries in `[0.5, 0.95)`, so its spectral radius is below one.
    pub fn init_in_store(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        model_dim: usize,
        state_dim: usize,
    ) -> Result<()> {
        store.init_projection(&format!("{prefix}.in_proj"), input_dim, model_dim)?;
        let a_name = format!("{prefix}.a");
        let mut rng = param_rng(&a_name, store.seed());
        let mut a = DenseMatrix::zeros(state_dim, state_dim);
        for i in 0..state_dim {
            a.set(i, i, rng.gen_range(0.5..0.95));
        }
        store.insert(a_name, a)?;
        // B is n × d_s and C is d_s × n; both scaled by their fan-in.
        let bound = |fan_in: usize| 1.0 / (fan_in.max(1) as f64).sqrt();
        store.init_uniform(&format!("{prefix}.b"), state_dim, model_dim, bound(model_dim))?;
        store.init_uniform(&format!("{prefix}.c"), model_dim, state_dim, bound(state_dim))?;
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let p = Self {
            in_proj: store.get(&format!("{prefix}.in_proj"))?.clone(),
            a: store.get(&format!("{prefix}.a"))?.clone(),
            b: store.get(&format!("{prefix}.b"))?.clone(),
            c: store.get(&format!("{prefix}.c"))?.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Identity-style layer for tests: `in_proj = I_d`, `B = I`, `C = I`,
    /// `A = decay · I`, with `d = d_s = n`.
    pub fn diagonal(dim: usize, decay: f64) -> Self {
        Self {
            in_proj: DenseMatrix::identity(dim),
            a: DenseMatrix::identity(dim).scale(decay),
            b: DenseMatrix::identity(dim),
            c: DenseMatrix::identity(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    /// `L × d_s`
    pub outputs: DenseMatrix,
    pub final_state: Vec<f64>,
}

impl ScanOutput {
    pub fn last(&self) -> &[f64] {
        self.outputs.row(self.outputs.rows() - 1)
    }
}

fn check_input(inputs: &DenseMatrix, params: &SsmLayerParams) -> Result<()> {
    params.validate()?;
    if inputs.rows() == 0 {
        return Err(Error::Domain("ssm_scan over an empty sequence".into()));
    }
    if inputs.cols() != params.input_dim() {
        return Err(Error::dim("ssm_scan input", inputs.shape(), params.in_proj.shape()));
    }
    Ok(())
}

/// Projects the whole sequence at once, then runs the recurrence kernel.
pub fn ssm_scan(inputs: &DenseMatrix, params: &SsmLayerParams) -> Result<ScanOutput> {
    check_input(inputs, params)?;
    let projected = inputs.matmul(&params.in_proj)?;
    let trace = recurrence::run(&projected, &params.a, &params.b, &params.c)?;
    let final_state = trace.states.row(trace.states.rows() - 1).to_vec();
    Ok(ScanOutput {
        outputs: trace.outputs,
        final_state,
    })
}

/// Reference scan: the recurrence written out step by step with scalar loops.
pub fn ssm_scan_oracle(inputs: &DenseMatrix, params: &SsmLayerParams) -> Result<ScanOutput> {
    check_input(inputs, params)?;
    let (len, d) = inputs.shape();
    let (d_s, n) = (params.model_dim(), params.state_dim());
    let mut h = vec![0.0; n];
    let mut outputs = DenseMatrix::zeros(len, d_s);
    for l in 0..len {
        let mut x = vec![0.0; d_s];
        for (j, xj) in x.iter_mut().enumerate() {
            for k in 0..d {
                *xj += inputs.get(l, k) * params.in_proj.get(k, j);
            }
        }
        let mut next = vec![0.0; n];
        for (i, hi) in next.iter_mut().enumerate() {
            for j in 0..n {
                *hi += params.a.get(i, j) * h[j];
            }
            for j in 0..d_s {
                *hi += params.b.get(i, j) * x[j];
            }
        }
        h = next;
        for k in 0..d_s {
            let mut y = 0.0;
            for i in 0..n {
                y += params.c.get(k, i) * h[i];
            }
            outputs.set(l, k, y);
        }
    }
    Ok(ScanOutput {
        outputs,
        final_state: h,
    })
}

/// One token per trajectory: the last-step readout of an independent scan
/// (zero initial state each). Empty set gives a `0 × d_s` matrix.
pub fn aggregate_keyword(set: &TrajectorySet, params: &SsmLayerParams) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(set.len(), params.model_dim());
    for (k, traj) in set.trajectories.iter().enumerate() {
        let scan = ssm_scan(&traj.token_matrix(), params)?;
        out.row_mut(k).copy_from_slice(scan.last());
    }
    Ok(out)
}

/// Per-timestep tokens: independent scans averaged across trajectories.
/// Empty set gives a `0 × d_s` matrix.
pub fn aggregate_scene(set: &TrajectorySet, params: &SsmLayerParams) -> Result<DenseMatrix> {
    let Some(first) = set.trajectories.first() else {
        return Ok(DenseMatrix::zeros(0, params.model_dim()));
    };
    let len = first.len();
    let mut acc = DenseMatrix::zeros(len, params.model_dim());
    for traj in &set.trajectories {
        if traj.len() != len {
            return Err(Error::dim("aggregate_scene", (len, 0), (traj.len(), 0)));
        }
        acc.add_assign(&ssm_scan(&traj.token_matrix(), params)?.outputs)?;
    }
    Ok(acc.scale(1.0 / set.len() as f64))
}

/// Single scan over a pooled branch sequence, all steps returned.
pub fn aggregate_holistic(tokens: &DenseMatrix, params: &SsmLayerParams) -> Result<DenseMatrix> {
    Ok(ssm_scan(tokens, params)?.outputs)
}

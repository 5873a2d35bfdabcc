use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ParamStore, Tape, Var};
use crate::retrieval::VisualTokenGrid;

/// Semantic query hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hierarchy {
    /// Whole-sentence embedding as the query.
    Holistic,
    /// Keyword-trajectory readouts as queries.
    Keyword,
    /// Per-timestep scene-attribute tokens as queries.
    Attribute,
}

impl Hierarchy {
    pub const ALL: [Hierarchy; 3] = [Hierarchy::Holistic, Hierarchy::Keyword, Hierarchy::Attribute];

    pub fn as_str(self) -> &'static str {
        match self {
            Hierarchy::Holistic => "holistic",
            Hierarchy::Keyword => "keyword",
            Hierarchy::Attribute => "attribute",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Frames as context (cells averaged away).
    Temporal,
    /// Cells as context (frames averaged away).
    Spatial,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Temporal, Branch::Spatial];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Temporal => "temporal",
            Branch::Spatial => "spatial",
        }
    }
}

/// Mean over the cells of each frame: `N_L × d`.
pub fn pool_spatial(grid: &VisualTokenGrid) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(grid.frames(), grid.dim());
    let inv = 1.0 / grid.cells() as f64;
    for l in 0..grid.frames() {
        let row = out.row_mut(l);
        for s in 0..grid.cells() {
            row.iter_mut().zip(grid.token(l, s)).for_each(|(o, v)| *o += v);
        }
        row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

/// Mean over the frames of each cell: `N_S × d`.
pub fn pool_temporal(grid: &VisualTokenGrid) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(grid.cells(), grid.dim());
    let inv = 1.0 / grid.frames() as f64;
    for s in 0..grid.cells() {
        let row = out.row_mut(s);
        for l in 0..grid.frames() {
            row.iter_mut().zip(grid.token(l, s)).for_each(|(o, v)| *o += v);
        }
        row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

/// Pooled sequence of one branch and its state-space-enhanced tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchContext {
    pub branch: Branch,
    /// `L × d`
    pub pooled: DenseMatrix,
    /// `L × d_s`
    pub enhanced: DenseMatrix,
}

/// Query/key/value projections and learnable prompt rows for one
/// (hierarchy, branch) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyAttnParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    /// `N_p × d_a`; zero rows disables prompts.
    pub prompts: DenseMatrix,
}

impl HierarchyAttnParams {
    pub fn attn_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_q = store.get(&format!("{prefix}.w_q"))?.clone();
        let prompts = match store.get(&format!("{prefix}.prompts")) {
            Ok(p) => p.clone(),
            Err(_) => DenseMatrix::zeros(0, w_q.cols()),
        };
        Ok(Self {
            w_k: store.get(&format!("{prefix}.w_k"))?.clone(),
            w_v: store.get(&format!("{prefix}.w_v"))?.clone(),
            w_q,
            prompts,
        })
    }
}

/// Tape handles for one attention block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub prompts: Option<Var>,
    pub attn_dim: usize,
}

impl AttnVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_q = tape.param(store, &format!("{prefix}.w_q"))?;
        let prompts_name = format!("{prefix}.prompts");
        let prompts = if store.get(&prompts_name).is_ok() {
            Some(tape.param(store, &prompts_name)?)
        } else {
            None
        };
        Ok(Self {
            w_q,
            w_k: tape.param(store, &format!("{prefix}.w_k"))?,
            w_v: tape.param(store, &format!("{prefix}.w_v"))?,
            prompts,
            attn_dim: tape.value(w_q).cols(),
        })
    }

    fn constants(tape: &mut Tape, p: &HierarchyAttnParams) -> Self {
        let prompts = (p.prompts.rows() > 0).then(|| tape.constant(p.prompts.clone()));
        Self {
            w_q: tape.constant(p.w_q.clone()),
            w_k: tape.constant(p.w_k.clone()),
            w_v: tape.constant(p.w_v.clone()),
            prompts,
            attn_dim: p.attn_dim(),
        }
    }
}

/// `softmax([Q·W_q ; P]·(C·W_k)ᵀ / √d_a)·(C·W_v)`
pub(crate) fn cross_attention_on(
    tape: &mut Tape,
    queries: Var,
    context: Var,
    p: &AttnVars,
) -> Result<Var> {
    if tape.value(context).rows() == 0 {
        return Err(Error::Domain("cross-attention over an empty context".into()));
    }
    let q = tape.matmul(queries, p.w_q)?;
    let q = match p.prompts {
        Some(prompts) => tape.concat_rows(&[q, prompts])?,
        None => q,
    };
    let k = tape.matmul(context, p.w_k)?;
    let v = tape.matmul(context, p.w_v)?;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (p.attn_dim as f64).sqrt());
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Returns the `(Q + N_p) × d_a` attention output.
pub fn cross_attention(
    queries: &DenseMatrix,
    context: &DenseMatrix,
    params: &HierarchyAttnParams,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let c = tape.constant(context.clone());
    let vars = AttnVars::constants(&mut tape, params);
    let out = cross_attention_on(&mut tape, q, c, &vars)?;
    Ok(tape.value(out).clone())
}

/// Each active hierarchy's attention output is mean-pooled over its rows,
/// then the pooled vectors are averaged. Hierarchies with no query rows are
/// dropped from the average.
pub(crate) fn mhs_ca_on(
    tape: &mut Tape,
    context: Var,
    queries: &[(Hierarchy, Var, AttnVars)],
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(queries.len());
    for (_, q, vars) in queries {
        if tape.value(*q).rows() == 0 {
            continue;
        }
        let z = cross_attention_on(tape, *q, context, vars)?;
        pooled.push(tape.mean_rows(z));
    }
    if pooled.is_empty() {
        return Err(Error::Config("every query hierarchy is disabled for this branch".into()));
    }
    tape.mean_of(&pooled)
}

/// Queries for each hierarchy; `None` or zero rows disables it.
#[derive(Debug, Clone, Default)]
pub struct HierarchyQueries<'a> {
    /// `t_R`, `N_R × d`
    pub holistic: Option<&'a DenseMatrix>,
    /// `t_KW`, `N̂_K × d_s`
    pub keyword: Option<&'a DenseMatrix>,
    /// `ĥ_BS`, `N_L × d_s`
    pub attribute: Option<&'a DenseMatrix>,
}

/// Branch representation `z` (length `d_a`).
pub fn mhs_ca_branch(
    branch: &BranchContext,
    queries: &HierarchyQueries<'_>,
    params: &[(Hierarchy, &HierarchyAttnParams)],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let context = tape.constant(branch.enhanced.clone());
    let mut bound = Vec::new();
    for (h, p) in params {
        let q = match h {
            Hierarchy::Holistic => queries.holistic,
            Hierarchy::Keyword => queries.keyword,
            Hierarchy::Attribute => queries.attribute,
        };
        if let Some(q) = q {
            let qv = tape.constant(q.clone());
            let vars = AttnVars::constants(&mut tape, p);
            bound.push((*h, qv, vars));
        }
    }
    let z = mhs_ca_on(&mut tape, context, &bound)?;
    Ok(tape.value(z).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn identity_params(d: usize, prompts: usize) -> HierarchyAttnParams {
        HierarchyAttnParams {
            w_q: DenseMatrix::identity(d),
            w_k: DenseMatrix::identity(d),
            w_v: DenseMatrix::identity(d),
            prompts: DenseMatrix::filled(prompts, d, 0.3),
        }
    }

    #[test]
    fn pooling_examples() {
        let grid = VisualTokenGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pool_spatial(&grid).data(), &[0.5, 0.5]);
        assert_eq!(pool_temporal(&grid), grid.frame_matrix(0));

        let grid = VisualTokenGrid::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pool_temporal(&grid).data(), &[0.5, 0.5]);
        assert_eq!(pool_spatial(&grid), m(&[&[1.0, 0.0], &[0.0, 1.0]]));

        let grid = VisualTokenGrid::new(3, 4, 2, vec![0.25; 24]).unwrap();
        assert!(pool_spatial(&grid).data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn singleton_context_returns_value_row() {
        let p = identity_params(2, 2);
        let out = cross_attention(&m(&[&[3.0, -1.0]]), &m(&[&[0.2, 0.7]]), &p).unwrap();
        assert_eq!(out.shape(), (3, 2));
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.2, 0.7]);
        }
    }

    #[test]
    fn identical_context_rows_average_to_value() {
        let p = identity_params(2, 0);
        let out = cross_attention(&m(&[&[1.0, 5.0]]), &m(&[&[0.4, 0.1], &[0.4, 0.1]]), &p).unwrap();
        assert!((out.get(0, 0) - 0.4).abs() < 1e-15 && (out.get(0, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_attention() {
        // d_a = 2, q = [1, 0], keys = [[1, 0], [0, 0]], values = [[2, 0], [0, 4]].
        let p = HierarchyAttnParams {
            w_q: DenseMatrix::identity(2),
            w_k: m(&[&[1.0, 0.0], &[0.0, 0.0]]),
            w_v: m(&[&[2.0, 0.0], &[0.0, 4.0]]),
            prompts: DenseMatrix::zeros(0, 2),
        };
        let out = cross_attention(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]]), &p).unwrap();
        let s = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = s / (s + 1.0);
        let expected = [2.0 * w0, 4.0 * (1.0 - w0)];
        assert!((out.get(0, 0) - expected[0]).abs() < 1e-12);
        assert!((out.get(0, 1) - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn empty_context_is_domain_error() {
        let p = identity_params(2, 0);
        let err = cross_attention(&m(&[&[1.0, 0.0]]), &DenseMatrix::zeros(0, 2), &p).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn hierarchy_average() {
        let ctx = BranchContext {
            branch: Branch::Temporal,
            pooled: DenseMatrix::zeros(2, 2),
            enhanced: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        };
        let p = identity_params(2, 1);
        let rv = m(&[&[2.0, 0.0]]);
        let only = mhs_ca_branch(
            &ctx,
            &HierarchyQueries {
                holistic: Some(&rv),
                ..Default::default()
            },
            &[(Hierarchy::Holistic, &p)],
        )
        .unwrap();
        let direct = cross_attention(&rv, &ctx.enhanced, &p).unwrap().mean_rows();
        assert_eq!(only, direct.data());

        // Same queries for all three hierarchies: the mean equals any one of them.
        let all = mhs_ca_branch(
            &ctx,
            &HierarchyQueries {
                holistic: Some(&rv),
                keyword: Some(&rv),
                attribute: Some(&rv),
            },
            &[(Hierarchy::Holistic, &p), (Hierarchy::Keyword, &p), (Hierarchy::Attribute, &p)],
        )
        .unwrap();
        for (a, b) in all.iter().zip(&only) {
            assert!((a - b).abs() < 1e-15);
        }

        let err = mhs_ca_branch(&ctx, &HierarchyQueries::default(), &[(Hierarchy::Holistic, &p)]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn distinct_hierarchies_are_averaged() {
        let ctx = BranchContext {
            branch: Branch::Spatial,
            pooled: DenseMatrix::zeros(3, 2),
            enhanced: m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, -0.5]]),
        };
        let p = identity_params(2, 0);
        let (a, b, c) = (m(&[&[3.0, 0.0]]), m(&[&[0.0, 3.0]]), m(&[&[-1.0, 1.0], &[2.0, 2.0]]));
        let z = mhs_ca_branch(
            &ctx,
            &HierarchyQueries {
                holistic: Some(&a),
                keyword: Some(&b),
                attribute: Some(&c),
            },
            &[(Hierarchy::Holistic, &p), (Hierarchy::Keyword, &p), (Hierarchy::Attribute, &p)],
        )
        .unwrap();
        let parts: Vec<DenseMatrix> = [&a, &b, &c]
            .iter()
            .map(|q| cross_attention(q, &ctx.enhanced, &p).unwrap().mean_rows())
            .collect();
        for k in 0..2 {
            let mean = (parts[0].get(0, k) + parts[1].get(0, k) + parts[2].get(0, k)) / 3.0;
            assert!((z[k] - mean).abs() < 1e-12);
        }
    }
}

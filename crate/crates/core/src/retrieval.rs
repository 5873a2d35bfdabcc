//! Nearest-token retrieval: for each semantic query and each timestep, pick
//! the spatial visual token closest in Euclidean distance. The per-timestep
//! picks form that query's trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linear, DenseMatrix};

/// `N_L × N_S × d` visual tokens for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenGrid {
    frames: usize,
    cells: usize,
    dim: usize,
    tokens: Vec<f64>,
    frame_indices: Vec<usize>,
}

impl VisualTokenGrid {
    pub fn new(frames: usize, cells: usize, dim: usize, tokens: Vec<f64>) -> Result<Self> {
        Self::with_frame_indices(frames, cells, dim, tokens, (0..frames).collect())
    }

    pub fn with_frame_indices(
        frames: usize,
        cells: usize,
        dim: usize,
        tokens: Vec<f64>,
        frame_indices: Vec<usize>,
    ) -> Result<Self> {
        if frames == 0 || cells == 0 || dim == 0 {
            return Err(Error::Input(format!(
                "token grid needs at least one frame, cell and feature (got {frames}×{cells}×{dim})"
            )));
        }
        if tokens.len() != frames * cells * dim {
            return Err(Error::dim("VisualTokenGrid", (frames * cells, dim), (tokens.len(), 1)));
        }
        if frame_indices.len() != frames {
            return Err(Error::dim("frame indices", (frames, 1), (frame_indices.len(), 1)));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("token grid contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            cells,
            dim,
            tokens,
            frame_indices,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `N_v = N_L × N_S`
    pub fn token_count(&self) -> usize {
        self.frames * self.cells
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn token(&self, frame: usize, cell: usize) -> &[f64] {
        let start = (frame * self.cells + cell) * self.dim;
        &self.tokens[start..start + self.dim]
    }

    /// Tokens of one frame as an `N_S × d` slice, row-major.
    pub fn frame(&self, frame: usize) -> &[f64] {
        let stride = self.cells * self.dim;
        &self.tokens[frame * stride..(frame + 1) * stride]
    }

    pub fn frame_matrix(&self, frame: usize) -> DenseMatrix {
        DenseMatrix::new(self.cells, self.dim, self.frame(frame).to_vec())
            .expect("frame slice has cells × dim entries")
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nearest {
    pub index: usize,
    pub distance: f64,
    pub token: Vec<f64>,
}

/// Argmin of `‖query − token‖₂` over the rows of `frame_tokens`; ties go to
/// the lowest index.
pub fn nearest_token(query: &[f64], frame_tokens: &DenseMatrix) -> Result<Nearest> {
    nearest_in_rows(query, frame_tokens.data(), frame_tokens.rows(), frame_tokens.cols())
}

fn nearest_in_rows(query: &[f64], data: &[f64], rows: usize, cols: usize) -> Result<Nearest> {
    if query.len() != cols {
        return Err(Error::dim("nearest_token", (1, query.len()), (rows, cols)));
    }
    if rows == 0 {
        return Err(Error::Domain("nearest_token over zero candidates".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in data.chunks_exact(cols).enumerate() {
        let d = squared_distance(query, row);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(Nearest {
        index: best.0,
        distance: best.1.sqrt(),
        token: data[best.0 * cols..(best.0 + 1) * cols].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Keyword,
    SceneAttribute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub timestep: usize,
    pub spatial_index: usize,
    pub distance: f64,
    pub token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub query_index: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn spatial_indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.spatial_index).collect()
    }

    /// Selected tokens stacked as `N_L × d`.
    pub fn token_matrix(&self) -> DenseMatrix {
        let rows: Vec<&[f64]> = self.steps.iter().map(|s| s.token.as_slice()).collect();
        DenseMatrix::from_rows(&rows).expect("trajectory tokens share the grid dim")
    }
}

/// Retrieves one token per frame for `query`. With `projection`, the query is
/// first mapped through `(weight, bias)`.
pub fn build_trajectory(
    query: &[f64],
    grid: &VisualTokenGrid,
    projection: Option<(&DenseMatrix, &[f64])>,
    kind: TrajectoryKind,
    query_index: usize,
) -> Result<Trajectory> {
    let projected;
    let query = match projection {
        Some((w, b)) => {
            projected = linear(&DenseMatrix::row_vector(query), w, b)?.into_data();
            projected.as_slice()
        }
        None => query,
    };
    let steps = (0..grid.frames())
        .map(|l| {
            let hit = nearest_in_rows(query, grid.frame(l), grid.cells(), grid.dim())?;
            Ok(TrajectoryStep {
                timestep: l,
                spatial_index: hit.index,
                distance: hit.distance,
                token: hit.token,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        kind,
        query_index,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub kind: TrajectoryKind,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Every selected spatial index, trajectory-major. Used to detect when a
    /// parameter perturbation flips a hard selection.
    pub fn selection_fingerprint(&self) -> Vec<usize> {
        self.trajectories
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.spatial_index))
            .collect()
    }
}

/// One trajectory per row of `queries`, in row order.
pub fn build_trajectory_set(
    queries: &DenseMatrix,
    grid: &VisualTokenGrid,
    kind: TrajectoryKind,
) -> Result<TrajectorySet> {
    let trajectories = (0..queries.rows())
        .map(|k| build_trajectory(queries.row(k), grid, None, kind, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectorySet { kind, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn nearest_examples() {
        let tokens = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let hit = nearest_token(&[1.0, 0.0], &tokens).unwrap();
        assert_eq!((hit.index, hit.distance), (0, 0.0));

        let tied = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(nearest_token(&[0.0, 0.0], &tied).unwrap().index, 0);

        let hit = nearest_token(&[0.6, 0.8], &tokens).unwrap();
        assert_eq!(hit.index, 1);
        assert!((hit.distance * hit.distance - 0.4).abs() < 1e-12);

        assert!(matches!(
            nearest_token(&[1.0, 0.0, 0.0], &tokens),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_frame_trajectory() {
        let grid = VisualTokenGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = build_trajectory(&[0.1, 0.9], &grid, None, TrajectoryKind::Keyword, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.steps[0].spatial_index, 1);
        assert_eq!(t.steps[0].token, [0.0, 1.0]);
    }

    #[test]
    fn planted_exact_matches() {
        let (frames, cells, dim) = (5, 3, 2);
        let query = [0.7, -0.3];
        let mut tokens = vec![5.0; frames * cells * dim];
        for l in 0..frames {
            let s = l % cells;
            let at = (l * cells + s) * dim;
            tokens[at..at + dim].copy_from_slice(&query);
        }
        let grid = VisualTokenGrid::new(frames, cells, dim, tokens).unwrap();
        let t = build_trajectory(&query, &grid, None, TrajectoryKind::Keyword, 0).unwrap();
        assert_eq!(t.spatial_indices(), [0, 1, 2, 0, 1]);
        assert!(t.steps.iter().all(|s| s.distance == 0.0));
    }

    #[test]
    fn projection_is_applied_before_distance() {
        let grid = VisualTokenGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let t = build_trajectory(
            &[1.0, 0.0],
            &grid,
            Some((&swap, &[0.0, 0.0])),
            TrajectoryKind::SceneAttribute,
            0,
        )
        .unwrap();
        assert_eq!(t.spatial_indices(), [1]);
    }

    #[test]
    fn empty_and_duplicate_query_sets() {
        let grid = VisualTokenGrid::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, -1.0, 0.0]).unwrap();
        let empty = build_trajectory_set(&DenseMatrix::zeros(0, 2), &grid, TrajectoryKind::Keyword).unwrap();
        assert!(empty.is_empty());
        let dup = build_trajectory_set(&m(&[&[0.2, 0.1], &[0.2, 0.1]]), &grid, TrajectoryKind::Keyword)
            .unwrap();
        assert_eq!(dup.trajectories[0].steps, dup.trajectories[1].steps);
    }

    #[test]
    fn grid_validation() {
        assert!(VisualTokenGrid::new(0, 1, 1, vec![]).is_err());
        assert!(VisualTokenGrid::new(1, 1, 2, vec![0.0]).is_err());
        assert!(VisualTokenGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
    }
}

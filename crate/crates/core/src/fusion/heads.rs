use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::tape::{bce_value, mse_value};
use crate::numerics::{DenseMatrix, ParamStore, Tape, Var};

use super::attention::Branch;

/// Two-layer perceptron `z → relu(z·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(input, hidden),
            b1: DenseMatrix::zeros(1, hidden),
            w2: DenseMatrix::zeros(hidden, output),
            b2: DenseMatrix::zeros(1, output),
        }
    }

    pub fn init_in_store(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<()> {
        store.init_projection(&format!("{prefix}.w1"), input, hidden)?;
        store.init_zeros(&format!("{prefix}.b1"), 1, hidden)?;
        store.init_projection(&format!("{prefix}.w2"), hidden, output)?;
        store.init_zeros(&format!("{prefix}.b2"), 1, output)
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.get(&format!("{prefix}.w1"))?.clone(),
            b1: store.get(&format!("{prefix}.b1"))?.clone(),
            w2: store.get(&format!("{prefix}.w2"))?.clone(),
            b2: store.get(&format!("{prefix}.b2"))?.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl MlpVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: tape.param(store, &format!("{prefix}.w1"))?,
            b1: tape.param(store, &format!("{prefix}.b1"))?,
            w2: tape.param(store, &format!("{prefix}.w2"))?,
            b2: tape.param(store, &format!("{prefix}.b2"))?,
        })
    }

    fn constants(tape: &mut Tape, p: &MlpParams) -> Self {
        Self {
            w1: tape.constant(p.w1.clone()),
            b1: tape.constant(p.b1.clone()),
            w2: tape.constant(p.w2.clone()),
            b2: tape.constant(p.b2.clone()),
        }
    }
}

/// Sigmoid-activated MLP output.
pub(crate) fn head_on(tape: &mut Tape, z: Var, p: &MlpVars) -> Result<Var> {
    let h = tape.matmul(z, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.w2)?;
    let o = tape.add_row(o, p.b2)?;
    Ok(tape.sigmoid(o))
}

/// Box regression and multi-label classification from a branch vector `z`.
/// Both outputs pass through a sigmoid.
pub fn heads(z: &[f64], reg: &MlpParams, cls: &MlpParams) -> Result<([f64; 4], Vec<f64>)> {
    let mut tape = Tape::new();
    let zv = tape.constant(DenseMatrix::row_vector(z));
    let rv = MlpVars::constants(&mut tape, reg);
    let cv = MlpVars::constants(&mut tape, cls);
    let b = head_on(&mut tape, zv, &rv)?;
    let y = head_on(&mut tape, zv, &cv)?;
    let bbox = tape.value(b).data();
    if bbox.len() != 4 {
        return Err(crate::error::Error::dim("bbox head", (1, bbox.len()), (1, 4)));
    }
    Ok((
        [bbox[0], bbox[1], bbox[2], bbox[3]],
        tape.value(y).data().to_vec(),
    ))
}

/// Per-branch predictions before fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPrediction {
    pub branch: Branch,
    pub z: Vec<f64>,
    pub bbox: [f64; 4],
    pub class_probs: Vec<f64>,
}

/// Fused box and class probabilities plus the per-branch intermediates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub bbox: [f64; 4],
    pub class_probs: Vec<f64>,
    pub branches: Vec<BranchPrediction>,
}

/// Elementwise midpoint of the two branch predictions.
pub fn fuse_predictions(
    temporal: (&[f64; 4], &[f64]),
    spatial: (&[f64; 4], &[f64]),
) -> ([f64; 4], Vec<f64>) {
    let bbox = std::array::from_fn(|i| (temporal.0[i] + spatial.0[i]) / 2.0);
    let probs = temporal
        .1
        .iter()
        .zip(spatial.1)
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    (bbox, probs)
}

/// `−(1/N_c)·Σ[y·ln ŷ + (1−y)·ln(1−ŷ)]` with `ŷ` clamped to `[1e-7, 1−1e-7]`.
pub fn bce_loss(target: &[f64], probs: &[f64]) -> Result<f64> {
    bce_value(probs, target)
}

/// Summed squared error over the four box coordinates.
pub fn mse_loss(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != 4 || pred.len() != 4 {
        return Err(crate::error::Error::dim("mse_loss", (1, target.len()), (1, pred.len())));
    }
    mse_value(pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_heads_give_half() {
        let reg = MlpParams::zeros(3, 3, 4);
        let cls = MlpParams::zeros(3, 3, 5);
        let (bbox, probs) = heads(&[0.3, -2.0, 1.0], &reg, &cls).unwrap();
        assert_eq!(bbox, [0.5; 4]);
        assert_eq!(probs, vec![0.5; 5]);
    }

    #[test]
    fn large_class_bias_saturates() {
        let reg = MlpParams::zeros(2, 2, 4);
        let mut cls = MlpParams::zeros(2, 2, 3);
        cls.b2 = DenseMatrix::filled(1, 3, 10.0);
        let (_, probs) = heads(&[1.0, 1.0], &reg, &cls).unwrap();
        assert!(probs.iter().all(|p| *p >= 0.9999));
    }

    #[test]
    fn heads_are_deterministic() {
        let mut store = ParamStore::new(2);
        MlpParams::init_in_store(&mut store, "reg", 4, 4, 4).unwrap();
        MlpParams::init_in_store(&mut store, "cls", 4, 4, 6).unwrap();
        let reg = MlpParams::from_store(&store, "reg").unwrap();
        let cls = MlpParams::from_store(&store, "cls").unwrap();
        let z = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(heads(&z, &reg, &cls).unwrap(), heads(&z, &reg, &cls).unwrap());
    }

    #[test]
    fn fusion_examples() {
        let (b, _) = fuse_predictions((&[0.1, 0.2, 0.3, 0.4], &[]), (&[0.1, 0.2, 0.3, 0.4], &[]));
        assert_eq!(b, [0.1, 0.2, 0.3, 0.4]);
        let (b, _) = fuse_predictions((&[0.0; 4], &[]), (&[1.0; 4], &[]));
        assert_eq!(b, [0.5; 4]);
        let (_, y) = fuse_predictions((&[0.0; 4], &[0.2, 0.8]), (&[0.0; 4], &[0.4, 0.4]));
        assert!((y[0] - 0.3).abs() < 1e-15 && (y[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        assert!((bce_loss(&[1.0], &[0.5]).unwrap() - 0.693147).abs() < 1e-6);
        assert!((bce_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(mse_loss(&[0.0; 4], &[1.0; 4]).unwrap(), 4.0);
        assert_eq!(mse_loss(&[0.2; 4], &[0.2; 4]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0; 4], &[0.5, 0.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!(mse_loss(&[0.0; 3], &[0.0; 4]).is_err());
        assert!(bce_loss(&[1.0, 0.0], &[0.5]).is_err());
    }
}

//! Layer building blocks shared by the model modules.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;
use crate::DetRng;

/// Probabilities are clamped into this range before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// I.i.d. Gaussian with the given standard deviation.
    Normal(f64),
}

/// Creates parameters (fresh initialization) or re-binds them from an existing
/// store (checkpoint load), so both paths share one layout definition.
pub enum ParamBuilder<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut DetRng,
    },
    Load {
        store: &'a ParamStore,
    },
}

impl ParamBuilder<'_> {
    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        match self {
            ParamBuilder::Init { store, rng } => {
                let data = match init {
                    Init::Zeros => vec![0.0; rows * cols],
                    Init::Ones => vec![1.0; rows * cols],
                    Init::Normal(sd) => (0..rows * cols)
                        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                Ok(store.insert(name, Tensor::matrix(rows, cols, data)?))
            }
            ParamBuilder::Load { store } => {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                let shape = store.get(id).shape();
                if shape != [rows, cols] {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {shape:?}, config expects [{rows}, {cols}]"
                    )));
                }
                Ok(id)
            }
        }
    }
}

/// `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn build(pb: &mut ParamBuilder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let sd = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w: pb.param(&format!("{name}.w"), fan_in, fan_out, Init::Normal(sd))?,
            b: pb.param(&format!("{name}.b"), 1, fan_out, Init::Zeros)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn build(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: pb.param(&format!("{name}.g"), 1, dim, Init::Ones)?,
            bias: pb.param(&format!("{name}.b"), 1, dim, Init::Zeros)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layer_norm(x, g, b)
    }
}

/// Mean binary cross-entropy of probabilities `p` against a constant target in `{0, 1}`.
pub fn bce_mean(tape: &mut Tape, p: Var, target: f64) -> Result<Var> {
    if target != 0.0 && target != 1.0 {
        return Err(Error::contract("bce", format!("target must be 0 or 1, got {target}")));
    }
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = if target == 1.0 { p } else { tape.rsub_scalar(1.0, p)? };
    let log = tape.log(q)?;
    let mean = tape.reduce_mean(log, Axis::All)?;
    tape.scalar_mul(mean, -1.0)
}

/// Mean of the rows of `x` at the top-`k` entries of the `N×1` score column.
pub fn topk_rows_mean(tape: &mut Tape, x: Var, scores: Var, k: usize) -> Result<(Var, Vec<usize>)> {
    let (idx, _) = crate::topk::topk_rows(tape.value(scores).data(), k)?;
    let rows = tape.gather_rows(x, &idx)?;
    Ok((tape.reduce_mean(rows, Axis::Rows)?, idx))
}

/// Mean of the `k` largest entries of an `N×1` column, as a `1×1` node.
pub fn column_topk_mean(tape: &mut Tape, col: Var, k: usize) -> Result<Var> {
    let row = tape.transpose(col)?;
    tape.topk_mean_rows(row, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_of_half_is_ln2() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::filled(5, 1, 0.5)).unwrap();
        for target in [0.0, 1.0] {
            let l = bce_mean(&mut t, p, target).unwrap();
            assert!((t.item(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_clamps_exact_zero_and_one() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        let l = bce_mean(&mut t, p, 1.0).unwrap();
        let expected = -(PROB_CLAMP.ln() + (1.0 - PROB_CLAMP).ln()) / 2.0;
        assert!((t.item(l).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        let mut rng = <DetRng as rand::SeedableRng>::seed_from_u64(0);
        Affine::build(&mut ParamBuilder::Init { store: &mut store, rng: &mut rng }, "fc", 3, 2).unwrap();
        let ok = Affine::build(&mut ParamBuilder::Load { store: &store }, "fc", 3, 2);
        assert!(ok.is_ok());
        let wrong = Affine::build(&mut ParamBuilder::Load { store: &store }, "fc", 4, 2);
        assert!(matches!(wrong, Err(Error::Checkpoint(_))));
        let missing = Affine::build(&mut ParamBuilder::Load { store: &store }, "other", 3, 2);
        assert!(missing.is_err());
    }
}

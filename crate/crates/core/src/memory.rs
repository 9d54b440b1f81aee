//! Dual memory units: normal and abnormal prototype banks.
//!
//! A query scores every snippet against every prototype with
//! `S = sigmoid(x·Pᵀ/√D)` and reads `M_aug = S·P`. Per snippet, the mean of
//! the top-`K` prototype scores (`K = ⌊M/16⌋ + 1`) says how strongly the
//! snippet matches the bank.

use crate::error::{Error, Result};
use crate::nn::{bce_mean, column_topk_mean, topk_rows_mean, Init, ParamBuilder};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Axis, Tape, Var};
use crate::topk::{topk_count, topk_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankRole {
    Normal,
    Abnormal,
}

impl BankRole {
    pub fn name(self) -> &'static str {
        match self {
            BankRole::Normal => "normal",
            BankRole::Abnormal => "abnormal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryBank {
    pub prototypes: ParamId,
    pub role: BankRole,
    pub slots: usize,
    pub dim: usize,
}

impl MemoryBank {
    /// Prototypes start i.i.d. N(0, 1/D).
    pub fn build(pb: &mut ParamBuilder<'_>, role: BankRole, slots: usize, dim: usize) -> Result<Self> {
        if slots == 0 || dim == 0 {
            return Err(Error::contract("memory_bank", "slots and dim must be >= 1"));
        }
        let sd = 1.0 / (dim as f64).sqrt();
        let prototypes = pb.param(&format!("mem.{}", role.name()), slots, dim, Init::Normal(sd))?;
        Ok(Self {
            prototypes,
            role,
            slots,
            dim,
        })
    }

    /// Top-k size used against this bank.
    pub fn k(&self) -> usize {
        topk_count(self.slots)
    }
}

#[derive(Clone, Debug)]
pub struct QueryResult {
    /// `N×M` query scores in (0, 1).
    pub scores: Var,
    /// `N×D` memory-augmented features.
    pub augmented: Var,
    /// `N×1` mean of each row's top-k scores.
    pub topk_scores: Var,
    /// Per snippet, the prototype indices that entered the top-k mean.
    pub topk_indices: Vec<Vec<usize>>,
}

pub fn memory_query(tape: &mut Tape, store: &ParamStore, x: Var, bank: &MemoryBank) -> Result<QueryResult> {
    let (_, d) = tape.dims(x);
    if d != bank.dim {
        return Err(Error::contract(
            "memory_query",
            format!("feature dim {d} does not match {} bank dim {}", bank.role.name(), bank.dim),
        ));
    }
    let protos = tape.param(store, bank.prototypes)?;
    let pt = tape.transpose(protos)?;
    let logits = tape.matmul(x, pt)?;
    let logits = tape.scalar_mul(logits, 1.0 / (d as f64).sqrt())?;
    let scores = tape.sigmoid(logits)?;
    let augmented = tape.matmul(scores, protos)?;
    let k = bank.k();
    let topk_scores = tape.topk_mean_rows(scores, k)?;
    let s = tape.value(scores);
    let topk_indices = (0..s.rows())
        .map(|i| topk_rows(s.row(i), k).map(|(idx, _)| idx))
        .collect::<Result<_>>()?;
    Ok(QueryResult {
        scores,
        augmented,
        topk_scores,
        topk_indices,
    })
}

/// Four-term memory loss over the per-snippet top-k match scores.
///
/// `snn`/`san`: normal video against the normal/abnormal bank (targets 1 and 0
/// for every snippet). `sna`/`saa`: abnormal video against the normal/abnormal
/// bank; only the mean of their top-`⌊N/16⌋+1` snippets is supervised, with
/// target 1 for both.
pub fn dual_memory_loss(tape: &mut Tape, snn: Var, san: Var, sna: Var, saa: Var) -> Result<Var> {
    let n = tape.dims(sna).0;
    let k = topk_count(n);
    let a = bce_mean(tape, snn, 1.0)?;
    let b = bce_mean(tape, san, 0.0)?;
    let na = column_topk_mean(tape, sna, k)?;
    let c = bce_mean(tape, na, 1.0)?;
    let aa = column_topk_mean(tape, saa, k)?;
    let d = bce_mean(tape, aa, 1.0)?;
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    tape.add(ab, cd)
}

/// Euclidean norm of a `1×D` row as a `1×1` node.
pub(crate) fn row_norm(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = tape.sq_l2_norm_rows(v)?;
    tape.sqrt(sq)
}

/// Triplet margin loss between the top-k snippet features of the two videos.
///
/// Anchor: normal-video rows picked by `snn`; positive: abnormal-video rows
/// picked by `sna` (its normal part); negative: abnormal-video rows picked by
/// `saa` (its anomalous part).
pub fn triplet_separation_loss(
    tape: &mut Tape,
    snn: Var,
    x_normal: Var,
    sna: Var,
    saa: Var,
    x_abnormal: Var,
    margin: f64,
) -> Result<Var> {
    if tape.dims(x_normal) != tape.dims(x_abnormal) {
        return Err(Error::contract(
            "triplet",
            format!(
                "feature shapes differ: {:?} vs {:?}",
                tape.dims(x_normal),
                tape.dims(x_abnormal)
            ),
        ));
    }
    let k = topk_count(tape.dims(x_normal).0);
    let (anchor, _) = topk_rows_mean(tape, x_normal, snn, k)?;
    let (positive, _) = topk_rows_mean(tape, x_abnormal, sna, k)?;
    let (negative, _) = topk_rows_mean(tape, x_abnormal, saa, k)?;
    triplet_from_points(tape, anchor, positive, negative, margin)
}

/// `max(0, ‖a - p‖ - ‖a - n‖ + margin)` for `1×D` rows.
pub fn triplet_from_points(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let ap = tape.sub(anchor, positive)?;
    let an = tape.sub(anchor, negative)?;
    let dp = row_norm(tape, ap)?;
    let dn = row_norm(tape, an)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(gap)?;
    tape.reduce_sum(hinge, Axis::All)
}

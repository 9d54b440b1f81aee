//! Built-in property suites: gradient checks, closed forms, oracle
//! equivalence and invariants. Each group reports pass or fail with a detail
//! line naming the failing property.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::attention::{temporal_mask, GlMhsaConfig, GlMhsaParams};
use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::error::Result;
use crate::features::{decode_fvb, encode_fvb, synth_generate, SynthConfig, VideoLabel};
use crate::gradcheck::finite_diff_check;
use crate::latent::{encode_and_sample, kl_loss, magnitude_distance_loss, NulParams, Sampling};
use crate::memory::{dual_memory_loss, memory_query, triplet_separation_loss, BankRole, MemoryBank};
use crate::metrics::{pr_ap, roc_auc};
use crate::model::{total_loss, MemoryMode, Model, ModelConfig, PairNoise};
use crate::nn::{bce_mean, ParamBuilder};
use crate::oracle::{gaussian_kl, pairwise_auc, rank_walk_ap, scalar_bce, sorted_topk};
use crate::params::ParamStore;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;
use crate::topk::{topk_count, topk_rows};
use crate::train::{train_loop, TrainConfig};
use crate::DetRng;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelftestOptions {
    /// Random instances per oracle-equivalence group.
    pub oracle_instances: usize,
    /// Debug hook: flips the sign of every KL value the suite observes.
    pub corrupt_kl_sign: bool,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { oracle_instances: 1000, corrupt_kl_sign: false, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn rng(seed: u64, salt: u64) -> DetRng {
    DetRng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn gaussian(rng: &mut DetRng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sizes match")
}

#[derive(Clone, Copy)]
enum Dist {
    Normal,
    /// Uniform on [0.5, 2].
    Positive,
    /// Magnitude in [0.2, 2] with random sign, away from kinks at 0.
    AwayFromZero,
    /// Distinct values, so top-k selections are stable.
    Distinct,
}

fn sample(rng: &mut DetRng, rows: usize, cols: usize, dist: Dist) -> Tensor {
    let n = rows * cols;
    let data: Vec<f64> = match dist {
        Dist::Normal => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        Dist::Positive => (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        Dist::AwayFromZero => (0..n)
            .map(|_| {
                let m: f64 = rng.random_range(0.2..2.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Dist::Distinct => {
            let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 1.0).collect();
            for i in (1..n).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            v
        }
    };
    Tensor::matrix(rows, cols, data).expect("sizes match")
}

type PrimitiveFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Max relative gradient error of `op` on random inputs, through a random weighted sum.
fn primitive_case(rng: &mut DetRng, inputs: &[(usize, usize, Dist)], op: PrimitiveFn) -> Result<f64> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, &(r, c, d))| store.insert(format!("x{i}"), sample(rng, r, c, d)))
        .collect();
    let mut probe = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect::<Result<_>>()?;
    let out = op(&mut probe, &vars)?;
    let (r, c) = probe.dims(out);
    let weights = gaussian(rng, r, c);
    let report = finite_diff_check(
        |t, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect::<Result<_>>()?;
            let y = op(t, &vars)?;
            let w = t.constant(weights.clone())?;
            let y = t.mul(y, w)?;
            t.reduce_sum(y, Axis::All)
        },
        &mut store,
        1e-5,
    )?;
    Ok(report.max_rel_error)
}

/// `(primitive name, max relative error)` for every differentiable tape operation.
pub fn primitive_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use Dist::*;
    let cases: Vec<(&'static str, Vec<(usize, usize, Dist)>, PrimitiveFn)> = vec![
        ("matmul", vec![(3, 4, Normal), (4, 2, Normal)], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![(3, 4, Normal), (3, 4, Normal)], |t, v| t.add(v[0], v[1])),
        ("sub", vec![(3, 4, Normal), (3, 4, Normal)], |t, v| t.sub(v[0], v[1])),
        ("elementwise_mul", vec![(3, 4, Normal), (3, 4, Normal)], |t, v| t.mul(v[0], v[1])),
        ("scalar_mul", vec![(3, 4, Normal)], |t, v| t.scalar_mul(v[0], -1.7)),
        ("add_scalar", vec![(3, 4, Normal)], |t, v| t.add_scalar(v[0], 0.3)),
        ("rsub_scalar", vec![(3, 4, Normal)], |t, v| t.rsub_scalar(2.0, v[0])),
        ("row_softmax", vec![(3, 5, Normal)], |t, v| t.row_softmax(v[0])),
        ("sigmoid", vec![(3, 4, Normal)], |t, v| t.sigmoid(v[0])),
        ("relu", vec![(3, 4, AwayFromZero)], |t, v| t.relu(v[0])),
        ("exp", vec![(3, 4, Normal)], |t, v| t.exp(v[0])),
        ("log", vec![(3, 4, Positive)], |t, v| t.log(v[0])),
        ("square", vec![(3, 4, Normal)], |t, v| t.square(v[0])),
        ("sqrt", vec![(3, 4, Positive)], |t, v| t.sqrt(v[0])),
        ("clamp", vec![(3, 4, AwayFromZero)], |t, v| t.clamp(v[0], -0.1, 1.0)),
        ("layer_norm", vec![(3, 6, Normal), (1, 6, Normal), (1, 6, Normal)], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        ("linear", vec![(3, 4, Normal), (4, 5, Normal), (1, 5, Normal)], |t, v| t.linear(v[0], v[1], v[2])),
        ("concat_last_dim", vec![(3, 2, Normal), (3, 4, Normal)], |t, v| t.concat_cols(v[0], v[1])),
        ("slice_cols", vec![(3, 6, Normal)], |t, v| t.slice_cols(v[0], 1, 4)),
        ("reduce_mean_rows", vec![(3, 4, Normal)], |t, v| t.reduce_mean(v[0], Axis::Rows)),
        ("reduce_mean_cols", vec![(3, 4, Normal)], |t, v| t.reduce_mean(v[0], Axis::Cols)),
        ("reduce_mean_all", vec![(3, 4, Normal)], |t, v| t.reduce_mean(v[0], Axis::All)),
        ("reduce_sum", vec![(3, 4, Normal)], |t, v| t.reduce_sum(v[0], Axis::Cols)),
        ("sq_l2_norm_rows", vec![(3, 4, Normal)], |t, v| t.sq_l2_norm_rows(v[0])),
        ("transpose", vec![(3, 4, Normal)], |t, v| t.transpose(v[0])),
        ("broadcast_row", vec![(1, 4, Normal)], |t, v| t.broadcast_rows(v[0], 3)),
        ("gather_rows", vec![(4, 3, Normal)], |t, v| t.gather_rows(v[0], &[2, 0, 2])),
        ("topk_mean_rows", vec![(3, 6, Distinct)], |t, v| t.topk_mean_rows(v[0], 2)),
    ];
    let mut r = rng(seed, 1);
    cases
        .into_iter()
        .map(|(name, inputs, op)| Ok((name, primitive_case(&mut r, &inputs, op)?)))
        .collect()
}

fn memory_fixture(seed: u64, n: usize, d: usize, m: usize) -> (ParamStore, MemoryBank, MemoryBank, [crate::ParamId; 2]) {
    let mut r = rng(seed, 2);
    let mut store = ParamStore::new();
    let xn = store.insert("xn", gaussian(&mut r, n, d));
    let mut xa = gaussian(&mut r, n, d);
    xa.data_mut().iter_mut().for_each(|v| *v += 0.5);
    let xa = store.insert("xa", xa);
    let mut pb = ParamBuilder::Init { store: &mut store, rng: &mut r };
    let nb = MemoryBank::build(&mut pb, BankRole::Normal, m, d).expect("valid bank");
    let ab = MemoryBank::build(&mut pb, BankRole::Abnormal, m, d).expect("valid bank");
    (store, nb, ab, [xn, xa])
}

/// `(loss name, max relative error)` for each training loss and the full model.
pub fn loss_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let (n, d, m) = (8, 6, 5);
    let mut out = Vec::new();

    let (mut store, nb, ab, [xn_id, xa_id]) = memory_fixture(seed, n, d, m);
    let report = finite_diff_check(
        |t, s| {
            let (xn, xa) = (t.param(s, xn_id)?, t.param(s, xa_id)?);
            let nn = memory_query(t, s, xn, &nb)?;
            let an = memory_query(t, s, xn, &ab)?;
            let na = memory_query(t, s, xa, &nb)?;
            let aa = memory_query(t, s, xa, &ab)?;
            dual_memory_loss(t, nn.topk_scores, an.topk_scores, na.topk_scores, aa.topk_scores)
        },
        &mut store,
        1e-5,
    )?;
    out.push(("dual_memory_loss", report.max_rel_error));

    let report = finite_diff_check(
        |t, s| {
            let (xn, xa) = (t.param(s, xn_id)?, t.param(s, xa_id)?);
            let nn = memory_query(t, s, xn, &nb)?;
            let na = memory_query(t, s, xa, &nb)?;
            let aa = memory_query(t, s, xa, &ab)?;
            triplet_separation_loss(t, nn.topk_scores, xn, na.topk_scores, aa.topk_scores, xa, 1.0)
        },
        &mut store,
        1e-5,
    )?;
    out.push(("triplet_separation_loss", report.max_rel_error));

    let mut r = rng(seed, 3);
    let mut store = ParamStore::new();
    let aug = store.insert("m_aug", gaussian(&mut r, n, d));
    let nul = NulParams::build(&mut ParamBuilder::Init { store: &mut store, rng: &mut r }, d)?;
    let eps = gaussian(&mut r, n, d);
    let report = finite_diff_check(
        |t, s| {
            let x = t.param(s, aug)?;
            let sample = encode_and_sample(t, s, x, &nul, Sampling::TrainWithNoise(eps.clone()))?;
            kl_loss(t, sample.mu, sample.sigma.expect("training mode"))
        },
        &mut store,
        1e-5,
    )?;
    out.push(("kl_loss", report.max_rel_error));

    let report = finite_diff_check(
        |t, s| {
            let x = t.param(s, aug)?;
            let sample = encode_and_sample(t, s, x, &nul, Sampling::TrainWithNoise(eps.clone()))?;
            let a = t.gather_rows(sample.mu, &[0, 3])?;
            let a = t.reduce_mean(a, Axis::Rows)?;
            let z = t.gather_rows(sample.z, &[1, 2])?;
            let z = t.reduce_mean(z, Axis::Rows)?;
            magnitude_distance_loss(t, a, z, 100.0)
        },
        &mut store,
        1e-5,
    )?;
    out.push(("magnitude_distance_loss", report.max_rel_error));

    for (name, memory) in [("total_loss", MemoryMode::Dual), ("total_loss_bypass", MemoryMode::Bypass)] {
        out.push((name, model_gradient_error(seed, memory)?));
    }
    Ok(out)
}

/// Full-model gradient check on one pair at `N = 8`, `D = 16`, `M = 4`.
pub fn model_gradient_error(seed: u64, memory: MemoryMode) -> Result<f64> {
    let cfg = ModelConfig {
        feature_dim: 6,
        dim: 16,
        heads: 4,
        ff_dim: 16,
        mem_n: 4,
        mem_a: 4,
        cls_hidden: (8, 4),
        memory,
        ..Default::default()
    };
    let mut r = rng(seed, 4);
    let model = Model::init(cfg, &mut r)?;
    let noise = PairNoise::draw(&mut r, 8, &cfg)?;
    let xn = gaussian(&mut r, 8, 6);
    let mut xa = gaussian(&mut r, 8, 6);
    xa.data_mut().iter_mut().for_each(|v| *v += 0.5);
    let params = model.params.clone();
    let mut store = model.store;
    let report = finite_diff_check(
        |t, s| {
            let m = Model { cfg, params: params.clone(), store: s.clone() };
            let (a, b) = (t.constant(xn.clone())?, t.constant(xa.clone())?);
            let parts = m.forward_pair(t, a, b, &noise)?;
            total_loss(t, &parts, [0.1, 0.1, 0.001, 0.0001])
        },
        &mut store,
        1e-5,
    )?;
    Ok(report.max_rel_error)
}

/// `(property, observed, expected)` for the closed-form identities.
pub fn closed_form_values(corrupt_kl_sign: bool) -> Result<Vec<(&'static str, f64, f64)>> {
    let sign = if corrupt_kl_sign { -1.0 } else { 1.0 };
    let mut t = Tape::new();
    let mut kl_at = |mu: f64, sigma: f64, d: usize| -> Result<f64> {
        let m = t.constant(Tensor::filled(1, d, mu))?;
        let s = t.constant(Tensor::filled(1, d, sigma))?;
        let kl = kl_loss(&mut t, m, s)?;
        Ok(sign * t.item(kl)?)
    };
    let kl0 = kl_at(0.0, 1.0, 8)?;
    let kl1 = kl_at(1.0, 1.0, 1)?;
    let mut t = Tape::new();
    let p = t.constant(Tensor::filled(4, 1, 0.5))?;
    let bce = bce_mean(&mut t, p, 1.0)?;
    let mask = temporal_mask(7, 1.0)?;
    let diag = (0..7).map(|i| mask.at(i, i).abs()).fold(0.0, f64::max);
    Ok(vec![
        ("kl_loss(mu=0,sigma=1)", kl0, 0.0),
        ("kl_loss(mu=1,sigma=1,D=1)", kl1, 0.5),
        ("bce(0.5)", t.item(bce)?, std::f64::consts::LN_2),
        ("temporal_mask diagonal", diag, 0.0),
        ("topk K for M=60", topk_count(60) as f64, 4.0),
        ("topk K for N=200", topk_count(200) as f64, 13.0),
    ])
}

/// Vectors of small integers (many ties) of length 1..=200 with random `k`.
fn tied_vector(r: &mut DetRng) -> (Vec<f64>, usize) {
    let len = r.random_range(1..=200);
    let v: Vec<f64> = (0..len).map(|_| r.random_range(0..10) as f64 / 3.0).collect();
    let k = r.random_range(1..=len);
    (v, k)
}

/// Scores with ties and a random label vector of at most 100 points.
fn metric_instance(r: &mut DetRng, need_both: bool) -> (Vec<f64>, Vec<u8>) {
    loop {
        let len = r.random_range(2..=100);
        let levels = r.random_range(2..=30);
        let s: Vec<f64> = (0..len).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let y: Vec<u8> = (0..len).map(|_| r.random_range(0..2)).collect();
        if y.contains(&1) && (!need_both || y.contains(&0)) {
            return (s, y);
        }
    }
}

/// Largest deviation of the fast top-k from a full sort (indices must match exactly).
pub fn topk_oracle_deviation(seed: u64, instances: usize) -> Result<f64> {
    let mut r = rng(seed, 5);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (v, k) = tied_vector(&mut r);
        let (idx, mean) = topk_rows(&v, k)?;
        let (oidx, omean) = sorted_topk(&v, k);
        if idx != oidx {
            return Ok(f64::INFINITY);
        }
        worst = worst.max((mean - omean).abs());
    }
    Ok(worst)
}

pub fn auc_oracle_deviation(seed: u64, instances: usize) -> Result<f64> {
    let mut r = rng(seed, 6);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (s, y) = metric_instance(&mut r, true);
        worst = worst.max((roc_auc(&s, &y)? - pairwise_auc(&s, &y)).abs());
    }
    Ok(worst)
}

pub fn ap_oracle_deviation(seed: u64, instances: usize) -> Result<f64> {
    let mut r = rng(seed, 7);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (s, y) = metric_instance(&mut r, false);
        worst = worst.max((pr_ap(&s, &y)? - rank_walk_ap(&s, &y)).abs());
    }
    Ok(worst)
}

fn kl_oracle_deviation(seed: u64, instances: usize, sign: f64) -> Result<f64> {
    let mut r = rng(seed, 8);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, d) = (r.random_range(1..6), r.random_range(1..9));
        let mu = gaussian(&mut r, n, d);
        let sigma = sample(&mut r, n, d, Dist::Positive);
        let expected = gaussian_kl(mu.data(), sigma.data());
        let mut t = Tape::new();
        let (m, s) = (t.constant(mu)?, t.constant(sigma)?);
        let kl = kl_loss(&mut t, m, s)?;
        worst = worst.max((sign * t.item(kl)? - expected).abs());
    }
    Ok(worst)
}

fn dual_loss_oracle_deviation(seed: u64, instances: usize) -> Result<f64> {
    let mut r = rng(seed, 9);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.random_range(1..40);
        let cols: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| r.random_range(0.01..0.99)).collect()).collect();
        let k = topk_count(n);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let expected = mean(&cols[0].iter().map(|&p| scalar_bce(p, 1.0)).collect::<Vec<_>>())
            + mean(&cols[1].iter().map(|&p| scalar_bce(p, 0.0)).collect::<Vec<_>>())
            + scalar_bce(sorted_topk(&cols[2], k).1, 1.0)
            + scalar_bce(sorted_topk(&cols[3], k).1, 1.0);
        let mut t = Tape::new();
        let v: Vec<Var> = cols
            .iter()
            .map(|c| t.constant(Tensor::matrix(n, 1, c.clone())?))
            .collect::<Result<_>>()?;
        let l = dual_memory_loss(&mut t, v[0], v[1], v[2], v[3])?;
        worst = worst.max((t.item(l)? - expected).abs());
    }
    Ok(worst)
}

fn attention_invariants(seed: u64) -> Result<std::result::Result<(), String>> {
    let mut r = rng(seed, 10);
    let cfg = GlMhsaConfig { feature_dim: 5, dim: 16, heads: 4, ff_dim: 32, tau: 1.0 };
    let mut store = ParamStore::new();
    let block = GlMhsaParams::build(&mut ParamBuilder::Init { store: &mut store, rng: &mut r }, cfg)?;
    let mut t = Tape::new();
    let x = t.constant(gaussian(&mut r, 9, 5))?;
    let (y, trace) = block.forward_traced(&mut t, &store, x, crate::attention::Branches::Both)?;
    for w in trace.global.iter().chain([&trace.local]) {
        let v = t.value(*w);
        for i in 0..v.rows() {
            let sum: f64 = v.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-12 || v.row(i).iter().any(|&p| p < 0.0) {
                return Ok(Err(format!("attention row {i} is not stochastic (sum {sum})")));
            }
        }
    }
    let out = t.value(y);
    for i in 0..out.rows() {
        let mean = out.row(i).iter().sum::<f64>() / out.cols() as f64;
        if mean.abs() > 1e-8 {
            return Ok(Err(format!("normalized output row {i} has mean {mean}")));
        }
    }
    Ok(Ok(()))
}

fn memory_invariants(seed: u64) -> Result<std::result::Result<(), String>> {
    let (store, nb, _, [xn, _]) = memory_fixture(seed, 7, 6, 9);
    let mut t = Tape::new();
    let x = t.param(&store, xn)?;
    let q = memory_query(&mut t, &store, x, &nb)?;
    let s = t.value(q.scores).clone();
    if s.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Ok(Err("query score outside (0,1)".into()));
    }
    let protos = store.get(nb.prototypes);
    let bound: f64 = (0..protos.rows())
        .map(|m| protos.row(m).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    let aug = t.value(q.augmented);
    for i in 0..aug.rows() {
        for j in 0..aug.cols() {
            let direct: f64 = (0..protos.rows()).map(|m| s.at(i, m) * protos.at(m, j)).sum();
            if (direct - aug.at(i, j)).abs() > 1e-12 {
                return Ok(Err(format!("augmented feature ({i},{j}) differs from S·P")));
            }
        }
        if aug.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() > bound {
            return Ok(Err(format!("augmented row {i} exceeds the prototype norm bound")));
        }
        let (_, top) = topk_rows(s.row(i), nb.k())?;
        if (top - t.value(q.topk_scores).at(i, 0)).abs() > 1e-12 {
            return Ok(Err(format!("top-k score of row {i} disagrees with direct top-k")));
        }
    }
    Ok(Ok(()))
}

fn latent_invariants(seed: u64) -> Result<std::result::Result<(), String>> {
    let mut r = rng(seed, 11);
    let mut store = ParamStore::new();
    let nul = NulParams::build(&mut ParamBuilder::Init { store: &mut store, rng: &mut r }, 6)?;
    let input = gaussian(&mut r, 4, 6);
    let mut t = Tape::new();
    let x = t.constant(input.clone())?;
    let test = encode_and_sample(&mut t, &store, x, &nul, Sampling::Test)?;
    if t.value(test.z).data() != t.value(test.mu).data() {
        return Ok(Err("test-mode latent differs from the mean".into()));
    }
    let eps = gaussian(&mut r, 4, 6);
    let s = encode_and_sample(&mut t, &store, x, &nul, Sampling::TrainWithNoise(eps.clone()))?;
    let (mu, sigma, z) = (t.value(s.mu), t.value(s.sigma.expect("training mode")), t.value(s.z));
    for i in 0..z.numel() {
        if z.data()[i] != mu.data()[i] + sigma.data()[i] * eps.data()[i] || !(sigma.data()[i] > 0.0) {
            return Ok(Err(format!("reparameterized sample {i} is not mu + sigma·eps")));
        }
    }
    Ok(Ok(()))
}

fn metric_invariants(seed: u64) -> Result<std::result::Result<(), String>> {
    let mut r = rng(seed, 12);
    for _ in 0..200 {
        let (s, y) = metric_instance(&mut r, true);
        let base = roc_auc(&s, &y)?;
        let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let a: Vec<f64> = s.iter().map(|v| 2.5 * v + 1.0).collect();
        if (roc_auc(&e, &y)? - base).abs() > 1e-12 || (roc_auc(&a, &y)? - base).abs() > 1e-12 {
            return Ok(Err("roc_auc changed under a monotone transform".into()));
        }
        let flat = vec![0.5; y.len()];
        let prevalence = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
        if (pr_ap(&flat, &y)? - prevalence).abs() > 1e-12 {
            return Ok(Err("pr_ap of equal scores differs from prevalence".into()));
        }
    }
    Ok(Ok(()))
}

fn format_round_trips(seed: u64) -> Result<std::result::Result<(), String>> {
    let ds = synth_generate(&SynthConfig {
        videos_per_class: 2,
        test_videos_per_class: 1,
        min_len: 3,
        max_len: 9,
        feature_dim: 4,
        seed,
        ..Default::default()
    })?;
    for seq in ds.train.iter().chain(&ds.test) {
        let bytes = encode_fvb(seq)?;
        let back = decode_fvb(&bytes, &seq.id)?;
        if &back != seq || encode_fvb(&back)? != bytes {
            return Ok(Err(format!("feature file round trip changed video {}", seq.id)));
        }
    }
    let model_cfg = ModelConfig { feature_dim: 4, dim: 8, ff_dim: 8, mem_n: 3, mem_a: 5, cls_hidden: (4, 2), ..Default::default() };
    let cfg = TrainConfig { model: model_cfg, seed, ..Default::default() };
    let model = Model::init(model_cfg, &mut rng(seed, 13))?;
    let bytes = encode_checkpoint(&model, &cfg)?;
    let (cfg2, model2) = decode_checkpoint(&bytes)?;
    if cfg2 != cfg || model2.store != model.store || encode_checkpoint(&model2, &cfg2)? != bytes {
        return Ok(Err("checkpoint round trip is not exact".into()));
    }
    Ok(Ok(()))
}

fn training_determinism(seed: u64) -> Result<std::result::Result<(), String>> {
    let ds = synth_generate(&SynthConfig {
        videos_per_class: 3,
        test_videos_per_class: 1,
        min_len: 10,
        max_len: 20,
        feature_dim: 4,
        seed,
        ..Default::default()
    })?;
    let (n, a): (Vec<_>, Vec<_>) = ds.train.into_iter().partition(|s| s.video_label == VideoLabel::Normal);
    let model = ModelConfig { feature_dim: 4, dim: 8, ff_dim: 8, mem_n: 4, mem_a: 4, cls_hidden: (8, 4), ..Default::default() };
    let cfg = TrainConfig { model, n_snippets: 12, batch: 4, iters: 3, lr: 1e-3, seed, ..Default::default() };
    let first = train_loop(&cfg, &n, &a, |_| {})?;
    let second = train_loop(&cfg, &n, &a, |_| {})?;
    if first.trace != second.trace || first.model.store != second.model.store {
        return Ok(Err("two runs with one seed diverged".into()));
    }
    if first.trace.iter().any(|l| !l.total.is_finite()) {
        return Ok(Err("non-finite loss in trace".into()));
    }
    Ok(Ok(()))
}

fn max_named(values: &[(&'static str, f64)]) -> (&'static str, f64) {
    values
        .iter()
        .copied()
        .fold(("none", 0.0), |acc, v| if v.1 > acc.1 || v.1.is_nan() { v } else { acc })
}

/// Runs every group. Never panics on a failing property; errors become failed groups.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<GroupResult> {
    let seed = opts.seed;
    let n = opts.oracle_instances;
    let kl_sign = if opts.corrupt_kl_sign { -1.0 } else { 1.0 };
    type Check<'a> = Box<dyn Fn() -> Result<std::result::Result<String, String>> + 'a>;
    let below = |what: &'static str, value: f64, tol: f64| {
        if value < tol {
            Ok(format!("{what} {value:.3e} < {tol:.0e}"))
        } else {
            Err(format!("{what} {value:.3e} >= {tol:.0e}"))
        }
    };
    let groups: Vec<(&'static str, Check)> = vec![
        (
            "primitive_gradients",
            Box::new(move || {
                let errs = primitive_gradient_errors(seed)?;
                let (name, worst) = max_named(&errs);
                Ok(below(name, worst, PRIMITIVE_TOLERANCE).map(|m| format!("{} ops, worst {m}", errs.len())))
            }),
        ),
        (
            "loss_gradients",
            Box::new(move || {
                let errs = loss_gradient_errors(seed)?;
                let (name, worst) = max_named(&errs);
                Ok(below(name, worst, LOSS_TOLERANCE).map(|m| format!("{} losses, worst {m}", errs.len())))
            }),
        ),
        (
            "closed_forms",
            Box::new(move || {
                for (name, got, want) in closed_form_values(opts.corrupt_kl_sign)? {
                    if (got - want).abs() > CLOSED_FORM_TOLERANCE {
                        return Ok(Err(format!("{name} = {got}, expected {want}")));
                    }
                }
                Ok(Ok("KL, BCE, mask diagonal and K values exact".into()))
            }),
        ),
        (
            "kl_loss",
            Box::new(move || {
                let dev = kl_oracle_deviation(seed, n, kl_sign)?;
                Ok(below("kl_loss vs Gaussian KL, max deviation", dev, CLOSED_FORM_TOLERANCE))
            }),
        ),
        (
            "topk_oracle",
            Box::new(move || {
                let dev = topk_oracle_deviation(seed, n)?;
                Ok(below("topk vs full sort, max deviation", dev, ORACLE_TOLERANCE))
            }),
        ),
        (
            "auc_oracle",
            Box::new(move || {
                let dev = auc_oracle_deviation(seed, n)?;
                Ok(below("roc_auc vs pairwise, max deviation", dev, ORACLE_TOLERANCE))
            }),
        ),
        (
            "ap_oracle",
            Box::new(move || {
                let dev = ap_oracle_deviation(seed, n)?;
                Ok(below("pr_ap vs rank walk, max deviation", dev, ORACLE_TOLERANCE))
            }),
        ),
        (
            "dual_memory_loss_oracle",
            Box::new(move || {
                let dev = dual_loss_oracle_deviation(seed, n)?;
                Ok(below("dual_memory_loss vs scalar formula, max deviation", dev, ORACLE_TOLERANCE))
            }),
        ),
        ("attention_invariants", Box::new(move || Ok(attention_invariants(seed)?.map(|_| "rows stochastic, outputs normalized".into())))),
        ("memory_invariants", Box::new(move || Ok(memory_invariants(seed)?.map(|_| "S in (0,1), M_aug = S·P, norm bound".into())))),
        ("latent_invariants", Box::new(move || Ok(latent_invariants(seed)?.map(|_| "z = mu + sigma·eps, test mode z = mu".into())))),
        ("metric_invariants", Box::new(move || Ok(metric_invariants(seed)?.map(|_| "monotone invariance, prevalence".into())))),
        ("format_round_trips", Box::new(move || Ok(format_round_trips(seed)?.map(|_| "feature files and checkpoints exact".into())))),
        ("training_determinism", Box::new(move || Ok(training_determinism(seed)?.map(|_| "identical traces and parameters".into())))),
    ];
    groups
        .into_iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            GroupResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let opts = SelftestOptions { oracle_instances: 50, ..Default::default() };
        let results = run_selftest(&opts);
        assert!(results.len() >= 12);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_kl_sign_is_caught() {
        let opts = SelftestOptions { oracle_instances: 20, corrupt_kl_sign: true, ..Default::default() };
        let failed: Vec<_> = run_selftest(&opts).into_iter().filter(|r| !r.passed).collect();
        assert!(failed.iter().any(|r| r.name == "kl_loss"));
        assert!(failed.iter().all(|r| r.name == "kl_loss" || r.detail.contains("kl_loss")));
    }
}

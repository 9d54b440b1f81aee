//! The full detector: attention block, dual memories, latent path and
//! snippet classifier, plus the per-pair training objective.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{GlMhsaConfig, GlMhsaParams};
use crate::error::{Error, Result};
use crate::latent::{encode_and_sample, fuse, kl_loss, magnitude_distance_loss, NulParams, Sampling};
use crate::memory::{dual_memory_loss, memory_query, triplet_separation_loss, BankRole, MemoryBank};
use crate::nn::{bce_mean, column_topk_mean, topk_rows_mean, Affine, ParamBuilder};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::topk::topk_count;
use crate::DetRng;

/// How the memory banks take part in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    Dual,
    /// Banks are skipped: the latent encoders read the attention output
    /// directly and the memory losses are zero.
    Bypass,
}

impl MemoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryMode::Dual => "dual",
            MemoryMode::Bypass => "bypass",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dual" => Some(MemoryMode::Dual),
            "bypass" => Some(MemoryMode::Bypass),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub tau: f64,
    pub mem_n: usize,
    pub mem_a: usize,
    pub cls_hidden: (usize, usize),
    pub dropout: f64,
    pub margin: f64,
    pub dist_d: f64,
    pub memory: MemoryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2048,
            dim: 128,
            heads: 4,
            ff_dim: 512,
            tau: 1.0,
            mem_n: 60,
            mem_a: 60,
            cls_hidden: (512, 128),
            dropout: 0.6,
            margin: 1.0,
            dist_d: 100.0,
            memory: MemoryMode::Dual,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> GlMhsaConfig {
        GlMhsaConfig {
            feature_dim: self.feature_dim,
            dim: self.dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        let bad = |msg: String| Err(Error::contract("model_config", msg));
        if self.mem_n == 0 || self.mem_a == 0 {
            return bad("memory banks need at least one slot".into());
        }
        if self.cls_hidden.0 == 0 || self.cls_hidden.1 == 0 {
            return bad("classifier widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if !(self.margin >= 0.0) || !(self.dist_d > 0.0) {
            return bad(format!("need margin >= 0 and d > 0, got {} and {}", self.margin, self.dist_d));
        }
        Ok(())
    }
}

/// Parameter handles for every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub gl: GlMhsaParams,
    pub bank_n: MemoryBank,
    pub bank_a: MemoryBank,
    pub nul: NulParams,
    pub classifier: [Affine; 3],
}

impl ModelParams {
    fn build(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let (h1, h2) = cfg.cls_hidden;
        Ok(Self {
            gl: GlMhsaParams::build(pb, cfg.attention())?,
            bank_n: MemoryBank::build(pb, BankRole::Normal, cfg.mem_n, d)?,
            bank_a: MemoryBank::build(pb, BankRole::Abnormal, cfg.mem_a, d)?,
            nul: NulParams::build(pb, d)?,
            classifier: [
                Affine::build(pb, "cls.fc1", 2 * d, h1)?,
                Affine::build(pb, "cls.fc2", h1, h2)?,
                Affine::build(pb, "cls.fc3", h2, 1)?,
            ],
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore,
}

/// Random inputs consumed by one training forward of a video pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNoise {
    pub eps_normal: Tensor,
    pub eps_abnormal: Tensor,
    pub dropout_normal: [Tensor; 2],
    pub dropout_abnormal: [Tensor; 2],
}

impl PairNoise {
    pub fn draw(rng: &mut DetRng, n: usize, cfg: &ModelConfig) -> Result<Self> {
        let gauss = |rng: &mut DetRng| {
            let data = (0..n * cfg.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(n, cfg.dim, data)
        };
        let eps_normal = gauss(rng)?;
        let eps_abnormal = gauss(rng)?;
        let keep = 1.0 / (1.0 - cfg.dropout);
        let mask = |rng: &mut DetRng, cols: usize| {
            let data = (0..n * cols)
                .map(|_| if rng.random::<f64>() < cfg.dropout { 0.0 } else { keep })
                .collect();
            Tensor::matrix(n, cols, data)
        };
        let (h1, h2) = cfg.cls_hidden;
        let dropout_normal = [mask(rng, h1)?, mask(rng, h2)?];
        let dropout_abnormal = [mask(rng, h1)?, mask(rng, h2)?];
        Ok(Self {
            eps_normal,
            eps_abnormal,
            dropout_normal,
            dropout_abnormal,
        })
    }

    /// No dropout and zero latent noise.
    pub fn quiet(n: usize, cfg: &ModelConfig) -> Self {
        let (h1, h2) = cfg.cls_hidden;
        let ones = || [Tensor::filled(n, h1, 1.0), Tensor::filled(n, h2, 1.0)];
        Self {
            eps_normal: Tensor::zeros(n, cfg.dim),
            eps_abnormal: Tensor::zeros(n, cfg.dim),
            dropout_normal: ones(),
            dropout_abnormal: ones(),
        }
    }
}

/// Unweighted loss terms of one pair.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub dm: Var,
    pub trip: Var,
    pub kl: Var,
    pub dis: Var,
}

/// `cls + Σ λ_i·part_i` over memory, triplet, KL and distance terms.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, lambda: [f64; 4]) -> Result<Var> {
    let mut total = parts.cls;
    for (part, l) in [parts.dm, parts.trip, parts.kl, parts.dis].into_iter().zip(lambda) {
        let weighted = tape.scalar_mul(part, l)?;
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// MIL loss: top-k mean snippet score against the video label, normal then abnormal.
pub fn cls_loss(tape: &mut Tape, scores_n: Var, scores_a: Var) -> Result<Var> {
    let k = topk_count(tape.dims(scores_n).0);
    let vn = column_topk_mean(tape, scores_n, k)?;
    let ln = bce_mean(tape, vn, 0.0)?;
    let k = topk_count(tape.dims(scores_a).0);
    let va = column_topk_mean(tape, scores_a, k)?;
    let la = bce_mean(tape, va, 1.0)?;
    tape.add(ln, la)
}

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut DetRng) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ModelParams::build(&mut ParamBuilder::Init { store: &mut store, rng }, &cfg)?;
        let mut model = Self { cfg, params, store };
        model.apply_memory_mode();
        Ok(model)
    }

    /// Re-binds a loaded tensor set, checking every name and shape against `cfg`.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let params = ModelParams::build(&mut ParamBuilder::Load { store: &store }, &cfg)?;
        if store.len() != expected_tensor_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected_tensor_count(),
                store.len()
            )));
        }
        let mut model = Self { cfg, params, store };
        model.apply_memory_mode();
        Ok(model)
    }

    fn apply_memory_mode(&mut self) {
        let trainable = self.cfg.memory == MemoryMode::Dual;
        for bank in [self.params.bank_n, self.params.bank_a] {
            self.store.set_trainable(bank.prototypes, trainable);
        }
    }

    /// Snippet probabilities `N×1`; `masks` are the two dropout masks (training only).
    pub fn classify(&self, tape: &mut Tape, fused: Var, masks: Option<&[Tensor; 2]>) -> Result<Var> {
        let [fc1, fc2, fc3] = &self.params.classifier;
        let mut h = fused;
        for (i, layer) in [fc1, fc2].into_iter().enumerate() {
            h = layer.apply(tape, &self.store, h)?;
            h = tape.relu(h)?;
            if let Some(masks) = masks {
                let m = tape.constant(masks[i].clone())?;
                h = tape.mul(h, m)?;
            }
        }
        let logits = fc3.apply(tape, &self.store, h)?;
        tape.sigmoid(logits)
    }

    /// Training-mode forward of one (normal, abnormal) pair of `N×F` inputs.
    pub fn forward_pair(&self, tape: &mut Tape, x_normal: Var, x_abnormal: Var, noise: &PairNoise) -> Result<LossParts> {
        if tape.dims(x_normal) != tape.dims(x_abnormal) {
            return Err(Error::contract("forward_pair", "normal and abnormal inputs differ in shape"));
        }
        let p = &self.params;
        let store = &self.store;
        let n = tape.dims(x_normal).0;
        let k = topk_count(n);
        let gn = p.gl.forward(tape, store, x_normal)?;
        let ga = p.gl.forward(tape, store, x_abnormal)?;

        let (aug_n, aug_a_normal_bank, aug_a_abnormal_bank, dm, trip, sel_n, sel_a) = match self.cfg.memory {
            MemoryMode::Dual => {
                let nn = memory_query(tape, store, gn, &p.bank_n)?;
                let an = memory_query(tape, store, gn, &p.bank_a)?;
                let na = memory_query(tape, store, ga, &p.bank_n)?;
                let aa = memory_query(tape, store, ga, &p.bank_a)?;
                let dm = dual_memory_loss(tape, nn.topk_scores, an.topk_scores, na.topk_scores, aa.topk_scores)?;
                let trip = triplet_separation_loss(
                    tape,
                    nn.topk_scores,
                    gn,
                    na.topk_scores,
                    aa.topk_scores,
                    ga,
                    self.cfg.margin,
                )?;
                (
                    nn.augmented,
                    na.augmented,
                    aa.augmented,
                    dm,
                    trip,
                    Some(nn.topk_scores),
                    Some(aa.topk_scores),
                )
            }
            MemoryMode::Bypass => {
                let zero = tape.constant(Tensor::scalar(0.0))?;
                (gn, ga, ga, zero, zero, None, None)
            }
        };

        let latent_n = encode_and_sample(
            tape,
            store,
            aug_n,
            &p.nul,
            Sampling::TrainWithNoise(noise.eps_normal.clone()),
        )?;
        let latent_a = encode_and_sample(
            tape,
            store,
            aug_a_normal_bank,
            &p.nul,
            Sampling::TrainWithNoise(noise.eps_abnormal.clone()),
        )?;
        let kl = kl_loss(tape, latent_n.mu, latent_n.sigma.expect("training mode"))?;

        let fused_n = fuse(tape, gn, latent_n.z)?;
        let fused_a = fuse(tape, ga, latent_a.z)?;
        let scores_n = self.classify(tape, fused_n, Some(&noise.dropout_normal))?;
        let scores_a = self.classify(tape, fused_a, Some(&noise.dropout_abnormal))?;
        let cls = cls_loss(tape, scores_n, scores_a)?;

        // Without banks the classifier's own scores pick the snippets.
        let sel_n = sel_n.unwrap_or(scores_n);
        let sel_a = sel_a.unwrap_or(scores_a);
        let mu_a = p.nul.mean_encoder.apply(tape, store, aug_a_abnormal_bank)?;
        let (mu_a_k, _) = topk_rows_mean(tape, mu_a, sel_a, k)?;
        let (z_n_k, _) = topk_rows_mean(tape, latent_n.z, sel_n, k)?;
        let dis = magnitude_distance_loss(tape, mu_a_k, z_n_k, self.cfg.dist_d)?;

        Ok(LossParts { cls, dm, trip, kl, dis })
    }

    /// Test-mode snippet scores for an `N×F` feature matrix: no dropout, `z = mu`.
    pub fn score(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone())?;
        let p = &self.params;
        let g = p.gl.forward(&mut tape, &self.store, x)?;
        let aug = match self.cfg.memory {
            MemoryMode::Dual => memory_query(&mut tape, &self.store, g, &p.bank_n)?.augmented,
            MemoryMode::Bypass => g,
        };
        let latent = encode_and_sample(&mut tape, &self.store, aug, &p.nul, Sampling::Test)?;
        let fused = fuse(&mut tape, g, latent.z)?;
        let s = self.classify(&mut tape, fused, None)?;
        Ok(tape.value(s).data().to_vec())
    }
}

/// Tensors in a model checkpoint: 16 attention, 2 memory, 4 latent, 6 classifier.
pub const fn expected_tensor_count() -> usize {
    16 + 2 + 4 + 6
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;

    fn micro() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            dim: 16,
            heads: 4,
            ff_dim: 16,
            mem_n: 4,
            mem_a: 4,
            cls_hidden: (8, 4),
            ..Default::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64, shift: f64) -> Tensor {
        let mut rng = DetRng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_inventory() {
        let cfg = ModelConfig {
            feature_dim: 32,
            ..Default::default()
        };
        let m = Model::init(cfg, &mut DetRng::seed_from_u64(0)).unwrap();
        assert_eq!(m.store.len(), 28);
        assert_eq!(m.store.by_name("cls.fc1.w").unwrap().shape(), &[256, 512]);
        assert_eq!(m.store.by_name("mem.normal").unwrap().shape(), &[60, 128]);
    }

    #[test]
    fn zero_classifier_scores_half() {
        let mut m = Model::init(micro(), &mut DetRng::seed_from_u64(1)).unwrap();
        for layer in m.params.classifier {
            let n = m.store.get(layer.w).numel();
            m.store.assign(layer.w, &vec![0.0; n]).unwrap();
        }
        let s = m.score(&random(7, 6, 2, 0.0)).unwrap();
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scoring_is_deterministic_and_in_range() {
        let cfg = ModelConfig { feature_dim: 6, dim: 32, ..micro() };
        let m = Model::init(cfg, &mut DetRng::seed_from_u64(3)).unwrap();
        let x = random(200, 6, 4, 0.0);
        let a = m.score(&x).unwrap();
        assert_eq!(a, m.score(&x).unwrap());
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cls_loss_values() {
        let mut t = Tape::new();
        let half = t.constant(Tensor::filled(200, 1, 0.5)).unwrap();
        let l = cls_loss(&mut t, half, half).unwrap();
        assert!((t.item(l).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let lo = t.constant(Tensor::filled(10, 1, 1e-9)).unwrap();
        let hi = t.constant(Tensor::filled(10, 1, 1.0 - 1e-9)).unwrap();
        let l = cls_loss(&mut t, lo, hi).unwrap();
        assert!(t.item(l).unwrap() < 1e-5);
    }

    #[test]
    fn total_loss_weights() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::scalar(1.0)).unwrap();
        let parts = LossParts { cls: one, dm: one, trip: one, kl: one, dis: one };
        let l = total_loss(&mut t, &parts, [0.1, 0.1, 0.001, 0.0001]).unwrap();
        assert!((t.item(l).unwrap() - 1.2011).abs() < 1e-12);
        let l = total_loss(&mut t, &parts, [0.0; 4]).unwrap();
        assert_eq!(t.item(l).unwrap(), 1.0);
    }

    #[test]
    fn load_rejects_wrong_config() {
        let m = Model::init(micro(), &mut DetRng::seed_from_u64(5)).unwrap();
        assert!(Model::from_store(micro(), m.store.clone()).is_ok());
        let other = ModelConfig { mem_n: 5, ..micro() };
        assert!(matches!(Model::from_store(other, m.store.clone()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bypass_freezes_banks() {
        let cfg = ModelConfig { memory: MemoryMode::Bypass, ..micro() };
        let m = Model::init(cfg, &mut DetRng::seed_from_u64(6)).unwrap();
        assert!(!m.store.get(m.params.bank_n.prototypes).requires_grad);
        assert!(m.store.get(m.params.gl.w_q).requires_grad);
    }

    fn pair_gradcheck(memory: MemoryMode, seed: u64) -> f64 {
        let cfg = ModelConfig { memory, ..micro() };
        let mut rng = DetRng::seed_from_u64(seed);
        let model = Model::init(cfg, &mut rng).unwrap();
        let noise = PairNoise::draw(&mut rng, 8, &cfg).unwrap();
        let (xn, xa) = (random(8, 6, 10, 0.0), random(8, 6, 11, 0.5));
        let (layout, mut store) = (model.params.clone(), model.store.clone());
        let report = finite_diff_check(
            |t, s| {
                let m = Model { cfg, params: layout.clone(), store: s.clone() };
                let a = t.constant(xn.clone())?;
                let b = t.constant(xa.clone())?;
                let parts = m.forward_pair(t, a, b, &noise)?;
                total_loss(t, &parts, [0.1, 0.1, 0.001, 0.0001])
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for seed in 0..3 {
            for mode in [MemoryMode::Dual, MemoryMode::Bypass] {
                let err = pair_gradcheck(mode, seed);
                assert!(err < 1e-4, "{mode:?} seed {seed}: {err}");
            }
        }
    }
}

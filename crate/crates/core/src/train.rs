//! Paired-batch training loop.

use std::fmt::Write as _;

use log::debug;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::features::{sample_batch, VideoFeatureSequence};
use crate::model::{total_loss, MemoryMode, Model, ModelConfig, PairNoise};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::DetRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub n_snippets: usize,
    pub lr: f64,
    /// Videos per batch, half normal and half abnormal.
    pub batch: usize,
    pub iters: usize,
    /// Weights of the memory, triplet, KL and distance losses.
    pub lambda: [f64; 4],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            n_snippets: 200,
            lr: 1e-4,
            batch: 64,
            iters: 3000,
            lambda: [0.1, 0.1, 0.001, 0.0001],
            seed: 0,
        }
    }
}

const KEYS: [&str; 21] = [
    "feature_dim",
    "dim",
    "heads",
    "ff_dim",
    "tau",
    "mem_n",
    "mem_a",
    "cls_hidden1",
    "cls_hidden2",
    "dropout",
    "margin",
    "dist_d",
    "memory",
    "n_snippets",
    "lr",
    "batch",
    "iters",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::contract("train_config", msg));
        if self.n_snippets == 0 {
            return bad("n_snippets must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 || self.batch % 2 != 0 {
            return bad(format!("batch must be even and > 0, got {}", self.batch));
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad(format!("lambdas must be finite and >= 0, got {:?}", self.lambda));
        }
        Ok(())
    }

    /// `key=value` lines; floats use the shortest exact representation.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let values: [String; 21] = [
            m.feature_dim.to_string(),
            m.dim.to_string(),
            m.heads.to_string(),
            m.ff_dim.to_string(),
            m.tau.to_string(),
            m.mem_n.to_string(),
            m.mem_a.to_string(),
            m.cls_hidden.0.to_string(),
            m.cls_hidden.1.to_string(),
            m.dropout.to_string(),
            m.margin.to_string(),
            m.dist_d.to_string(),
            m.memory.as_str().to_string(),
            self.n_snippets.to_string(),
            self.lr.to_string(),
            self.batch.to_string(),
            self.iters.to_string(),
            self.lambda[0].to_string(),
            self.lambda[1].to_string(),
            self.lambda[2].to_string(),
            self.lambda[3].to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").expect("writing to a String");
        }
        writeln!(out, "seed={}", self.seed).expect("writing to a String");
        out
    }

    /// Inverse of [`to_kv`](Self::to_kv). Every key is required exactly once.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut seen: Vec<(&str, &str)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("config line without '=': {line:?}")))?;
            if seen.iter().any(|(s, _)| *s == k) {
                return Err(Error::Input(format!("duplicate config key {k}")));
            }
            seen.push((k, v));
        }
        let get = |key: &str| {
            seen.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Input(format!("missing config key {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Input(format!("bad value for {key}: {v:?}")))
        }
        let u = |key: &str| get(key).and_then(|v| num::<usize>(key, v));
        let f = |key: &str| get(key).and_then(|v| num::<f64>(key, v));
        if let Some((k, _)) = seen.iter().find(|(k, _)| *k != "seed" && !KEYS.contains(k)) {
            return Err(Error::Input(format!("unknown config key {k}")));
        }
        let memory = get("memory")?;
        let model = ModelConfig {
            feature_dim: u("feature_dim")?,
            dim: u("dim")?,
            heads: u("heads")?,
            ff_dim: u("ff_dim")?,
            tau: f("tau")?,
            mem_n: u("mem_n")?,
            mem_a: u("mem_a")?,
            cls_hidden: (u("cls_hidden1")?, u("cls_hidden2")?),
            dropout: f("dropout")?,
            margin: f("margin")?,
            dist_d: f("dist_d")?,
            memory: MemoryMode::parse(memory)
                .ok_or_else(|| Error::Input(format!("bad value for memory: {memory:?}")))?,
        };
        Ok(Self {
            model,
            n_snippets: u("n_snippets")?,
            lr: f("lr")?,
            batch: u("batch")?,
            iters: u("iters")?,
            lambda: [f("lambda1")?, f("lambda2")?, f("lambda3")?, f("lambda4")?],
            seed: get("seed").and_then(|v| num::<u64>("seed", v))?,
        })
    }
}

/// Batch-mean loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub dm: f64,
    pub trip: f64,
    pub kl: f64,
    pub dis: f64,
}

impl StepLoss {
    pub const CSV_HEADER: &'static str = "step,total,cls,dm,trip,kl,dis";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.total, self.cls, self.dm, self.trip, self.kl, self.dis
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<StepLoss>,
}

/// Computes the batch loss, accumulating gradients of its mean over pairs into the model.
pub fn accumulate_pair_gradients(
    model: &mut Model,
    pairs: &[(crate::Tensor, crate::Tensor, PairNoise)],
    lambda: [f64; 4],
) -> Result<StepLoss> {
    let scale = 1.0 / pairs.len() as f64;
    let mut acc = StepLoss { step: 0, total: 0.0, cls: 0.0, dm: 0.0, trip: 0.0, kl: 0.0, dis: 0.0 };
    let mut tape = Tape::new();
    for (xn, xa, noise) in pairs {
        let a = tape.constant(xn.clone())?;
        let b = tape.constant(xa.clone())?;
        let parts = model.forward_pair(&mut tape, a, b, noise)?;
        let total = total_loss(&mut tape, &parts, lambda)?;
        acc.total += scale * tape.item(total)?;
        acc.cls += scale * tape.item(parts.cls)?;
        acc.dm += scale * tape.item(parts.dm)?;
        acc.trip += scale * tape.item(parts.trip)?;
        acc.kl += scale * tape.item(parts.kl)?;
        acc.dis += scale * tape.item(parts.dis)?;
        let scaled = tape.scalar_mul(total, scale)?;
        tape.backward(scaled, &mut model.store)?;
    }
    Ok(acc)
}

/// Trains from scratch. `on_step` sees every step's losses as they are produced.
///
/// All randomness (initialization, then per step: batch draw, latent noise and
/// dropout) comes from one generator seeded with `cfg.seed`.
pub fn train_loop(
    cfg: &TrainConfig,
    normal: &[VideoFeatureSequence],
    abnormal: &[VideoFeatureSequence],
    mut on_step: impl FnMut(&StepLoss),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::Input("training needs at least one normal and one abnormal video".into()));
    }
    for seq in normal.iter().chain(abnormal) {
        if seq.feature_dim() != cfg.model.feature_dim {
            return Err(Error::Input(format!(
                "video {} has {} features, model expects {}",
                seq.id,
                seq.feature_dim(),
                cfg.model.feature_dim
            )));
        }
    }
    let mut rng = DetRng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.model, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &model.store)?;
    let mut trace = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        let diverged = |e: Error| {
            if e.is_numeric() {
                Error::Diverged { step, source: Box::new(e) }
            } else {
                e
            }
        };
        let batch = sample_batch(normal, abnormal, cfg.batch, cfg.n_snippets, &mut rng)?;
        let mut pairs = Vec::with_capacity(batch.pairs());
        for (xn, xa) in batch.normal.into_iter().zip(batch.abnormal) {
            let noise = PairNoise::draw(&mut rng, cfg.n_snippets, &cfg.model)?;
            pairs.push((xn, xa, noise));
        }
        let mut loss = accumulate_pair_gradients(&mut model, &pairs, cfg.lambda).map_err(diverged)?;
        if !loss.total.is_finite() {
            return Err(diverged(Error::NumericFault { op: "total_loss" }));
        }
        adam.step(&mut model.store).map_err(diverged)?;
        loss.step = step;
        debug!("step {step} loss {:.6}", loss.total);
        on_step(&loss);
        trace.push(loss);
    }
    Ok(TrainOutcome { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_generate, SynthConfig, VideoLabel};
    use crate::Tensor;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn micro_model() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            dim: 16,
            heads: 4,
            ff_dim: 16,
            mem_n: 4,
            mem_a: 4,
            cls_hidden: (8, 4),
            ..Default::default()
        }
    }

    fn data() -> (Vec<VideoFeatureSequence>, Vec<VideoFeatureSequence>) {
        let ds = synth_generate(&SynthConfig {
            videos_per_class: 4,
            test_videos_per_class: 1,
            min_len: 20,
            max_len: 40,
            feature_dim: 8,
            ..Default::default()
        })
        .unwrap();
        ds.train.into_iter().partition(|s| s.video_label == VideoLabel::Normal)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { model: micro_model(), n_snippets: 16, batch: 4, iters: 5, lr: 1e-3, seed: 3, ..Default::default() }
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let cfg = TrainConfig { lr: 0.1 + 0.2, seed: u64::MAX, ..quick_cfg() };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let defaults = TrainConfig::default();
        assert_eq!(TrainConfig::from_kv(&defaults.to_kv()).unwrap(), defaults);
    }

    #[test]
    fn kv_rejects_missing_unknown_and_bad() {
        let text = quick_cfg().to_kv();
        assert!(TrainConfig::from_kv(&text.replace("seed=3\n", "")).is_err());
        assert!(TrainConfig::from_kv(&format!("{text}extra=1\n")).is_err());
        assert!(TrainConfig::from_kv(&text.replace("lr=0.001", "lr=fast")).is_err());
        assert!(TrainConfig::from_kv(&format!("{text}seed=4\n")).is_err());
    }

    #[test]
    fn zero_iters_returns_the_initialization() {
        let (n, a) = data();
        let cfg = TrainConfig { iters: 0, ..quick_cfg() };
        let out = train_loop(&cfg, &n, &a, |_| {}).unwrap();
        let init = Model::init(cfg.model, &mut DetRng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.model.store, init.store);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn same_seed_same_trace() {
        let (n, a) = data();
        let first = train_loop(&quick_cfg(), &n, &a, |_| {}).unwrap();
        let second = train_loop(&quick_cfg(), &n, &a, |_| {}).unwrap();
        assert_eq!(first.trace, second.trace);
        assert_eq!(first.model.store, second.model.store);
        let other = train_loop(&TrainConfig { seed: 4, ..quick_cfg() }, &n, &a, |_| {}).unwrap();
        assert_ne!(first.trace, other.trace);
    }

    #[test]
    fn callback_sees_every_step() {
        let (n, a) = data();
        let mut steps = Vec::new();
        train_loop(&quick_cfg(), &n, &a, |l| steps.push(l.step)).unwrap();
        assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bad_inputs() {
        let (n, a) = data();
        assert!(train_loop(&quick_cfg(), &n, &[], |_| {}).is_err());
        assert!(train_loop(&TrainConfig { batch: 3, ..quick_cfg() }, &n, &a, |_| {}).is_err());
        let wide = TrainConfig { model: ModelConfig { feature_dim: 9, ..micro_model() }, ..quick_cfg() };
        assert!(matches!(train_loop(&wide, &n, &a, |_| {}), Err(Error::Input(_))));
    }

    #[test]
    fn huge_inputs_report_the_diverged_step() {
        let (mut n, a) = data();
        for s in &mut n {
            s.features.data_mut().iter_mut().for_each(|v| *v *= 1e300);
        }
        match train_loop(&quick_cfg(), &n, &a, |_| {}) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
        }
    }

    #[test]
    fn one_small_step_descends() {
        // Fixed micro-batch and noise; Adam's first step is lr·sign(g).
        let cfg = micro_model();
        let mut decreased = 0;
        for seed in 0..100 {
            let mut rng = DetRng::seed_from_u64(seed);
            let mut model = Model::init(cfg, &mut rng).unwrap();
            let pairs: Vec<_> = (0..2)
                .map(|_| {
                    let mut x = |shift: f64| {
                        let d = (0..8 * 8).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
                        Tensor::matrix(8, 8, d).unwrap()
                    };
                    let (xn, xa) = (x(0.0), x(1.0));
                    (xn, xa, PairNoise::draw(&mut rng, 8, &cfg).unwrap())
                })
                .collect();
            let lambda = [0.1, 0.1, 0.001, 0.0001];
            let mut adam = Adam::new(AdamConfig { lr: 1e-5, ..Default::default() }, &model.store).unwrap();
            let before = accumulate_pair_gradients(&mut model, &pairs, lambda).unwrap().total;
            adam.step(&mut model.store).unwrap();
            let after = accumulate_pair_gradients(&mut model, &pairs, lambda).unwrap().total;
            model.store.zero_grads();
            decreased += (after < before) as usize;
        }
        assert!(decreased >= 95, "{decreased}/100");
    }
}

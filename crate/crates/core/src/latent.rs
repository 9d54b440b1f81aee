//! Normal-data uncertainty learning.
//!
//! Two affine encoders map memory-augmented features to a mean and a
//! log-variance. Training samples `z = mu + sigma·eps`; at test time only the
//! mean encoder runs and `z = mu`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Affine, ParamBuilder};
use crate::params::ParamStore;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;
use crate::DetRng;

#[derive(Clone, Debug, PartialEq)]
pub struct NulParams {
    pub mean_encoder: Affine,
    /// Produces `log sigma²`.
    pub logvar_encoder: Affine,
}

impl NulParams {
    pub fn build(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            mean_encoder: Affine::build(pb, "nul.mu", dim, dim)?,
            logvar_encoder: Affine::build(pb, "nul.logvar", dim, dim)?,
        })
    }
}

pub enum Sampling<'a> {
    /// Fresh standard-normal noise from the run's generator.
    Train(&'a mut DetRng),
    /// Training-mode sampling with caller-supplied noise.
    TrainWithNoise(Tensor),
    /// Mean encoder only; consumes no randomness.
    Test,
}

#[derive(Clone, Debug)]
pub struct LatentSample {
    pub mu: Var,
    /// `None` in test mode.
    pub sigma: Option<Var>,
    pub z: Var,
    pub eps: Option<Tensor>,
}

pub fn encode_and_sample(
    tape: &mut Tape,
    store: &ParamStore,
    m_aug: Var,
    params: &NulParams,
    sampling: Sampling<'_>,
) -> Result<LatentSample> {
    let mu = params.mean_encoder.apply(tape, store, m_aug)?;
    let (n, d) = tape.dims(mu);
    let eps = match sampling {
        Sampling::Test => {
            return Ok(LatentSample {
                mu,
                sigma: None,
                z: mu,
                eps: None,
            })
        }
        Sampling::Train(rng) => {
            let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(n, d, data)?
        }
        Sampling::TrainWithNoise(eps) => {
            if eps.dims2()? != (n, d) {
                return Err(Error::contract(
                    "encode_and_sample",
                    format!("noise shape {:?} != {n}x{d}", eps.shape()),
                ));
            }
            eps
        }
    };
    let logvar = params.logvar_encoder.apply(tape, store, m_aug)?;
    let half = tape.scalar_mul(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps.clone())?;
    let noise = tape.mul(sigma, e)?;
    let z = tape.add(mu, noise)?;
    Ok(LatentSample {
        mu,
        sigma: Some(sigma),
        z,
        eps: Some(eps),
    })
}

/// Per snippet `-(1/2D)·Σ(1 + log sigma² - mu² - sigma²)`, averaged over snippets.
pub fn kl_loss(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    if tape.dims(mu) != tape.dims(sigma) {
        return Err(Error::contract("kl_loss", "mu and sigma shapes differ"));
    }
    let d = tape.dims(mu).1 as f64;
    let var = tape.square(sigma)?;
    let log_var = tape.log(var)?;
    let mu2 = tape.square(mu)?;
    let inner = tape.add_scalar(log_var, 1.0)?;
    let inner = tape.sub(inner, mu2)?;
    let inner = tape.sub(inner, var)?;
    let per_snippet = tape.reduce_sum(inner, Axis::Cols)?;
    let mean = tape.reduce_mean(per_snippet, Axis::All)?;
    tape.scalar_mul(mean, -1.0 / (2.0 * d))
}

/// `max(0, d - (‖mu_a‖² - ‖z_n‖²))` for `1×D` rows.
pub fn magnitude_distance_loss(tape: &mut Tape, mu_a_topk: Var, z_n_topk: Var, d: f64) -> Result<Var> {
    if !(d > 0.0) {
        return Err(Error::contract("magnitude_distance_loss", format!("d must be > 0, got {d}")));
    }
    let a = tape.sq_l2_norm_rows(mu_a_topk)?;
    let a = tape.reduce_sum(a, Axis::All)?;
    let n = tape.sq_l2_norm_rows(z_n_topk)?;
    let n = tape.reduce_sum(n, Axis::All)?;
    let gap = tape.sub(a, n)?;
    let slack = tape.rsub_scalar(d, gap)?;
    tape.relu(slack)
}

/// Feature-axis concatenation `[x ; z]`.
pub fn fuse(tape: &mut Tape, x: Var, z: Var) -> Result<Var> {
    tape.concat_cols(x, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;

    fn params(dim: usize, seed: u64) -> (ParamStore, NulParams) {
        let mut store = ParamStore::new();
        let mut rng = DetRng::seed_from_u64(seed);
        let p = NulParams::build(&mut ParamBuilder::Init { store: &mut store, rng: &mut rng }, dim).unwrap();
        (store, p)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = DetRng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    fn consts(t: &mut Tape, rows: usize, cols: usize, v: f64) -> Var {
        t.constant(Tensor::filled(rows, cols, v)).unwrap()
    }

    #[test]
    fn test_mode_returns_the_mean() {
        let (store, p) = params(4, 1);
        let mut t = Tape::new();
        let m = t.constant(random(3, 4, 2)).unwrap();
        let s = encode_and_sample(&mut t, &store, m, &p, Sampling::Test).unwrap();
        assert_eq!(s.z, s.mu);
        assert!(s.sigma.is_none() && s.eps.is_none());
    }

    #[test]
    fn zero_noise_returns_the_mean() {
        let (store, p) = params(4, 1);
        let mut t = Tape::new();
        let m = t.constant(random(3, 4, 2)).unwrap();
        let s = encode_and_sample(&mut t, &store, m, &p, Sampling::TrainWithNoise(Tensor::zeros(3, 4))).unwrap();
        assert_eq!(t.value(s.z).data(), t.value(s.mu).data());
    }

    #[test]
    fn sampled_spread_matches_sigma() {
        let (mut store, p) = params(2, 3);
        let w = store.get(p.logvar_encoder.w).numel();
        store.assign(p.logvar_encoder.w, &vec![0.0; w]).unwrap();
        store.assign(p.logvar_encoder.b, &[4.0f64.ln(); 2]).unwrap();
        let mut rng = DetRng::seed_from_u64(4);
        let input = Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap();
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                let mut t = Tape::new();
                let m = t.constant(input.clone()).unwrap();
                let s = encode_and_sample(&mut t, &store, m, &p, Sampling::Train(&mut rng)).unwrap();
                t.value(s.z).data()[0]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64).sqrt();
        assert!((sd - 2.0).abs() / 2.0 < 0.03, "sd {sd}");
    }

    #[test]
    fn kl_closed_form_points() {
        let mut t = Tape::new();
        let (mu, sigma) = (consts(&mut t, 3, 5, 0.0), consts(&mut t, 3, 5, 1.0));
        let kl = kl_loss(&mut t, mu, sigma).unwrap();
        assert!(t.item(kl).unwrap().abs() < 1e-12);
        let (mu, sigma) = (consts(&mut t, 1, 1, 1.0), consts(&mut t, 1, 1, 1.0));
        let kl = kl_loss(&mut t, mu, sigma).unwrap();
        assert!((t.item(kl).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_minimum_is_the_standard_normal_on_a_grid() {
        let mut t = Tape::new();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=60 {
            for j in 0..=29 {
                let (m, s) = (-3.0 + 0.1 * i as f64, 0.1 + 0.1 * j as f64);
                let (mu, sigma) = (consts(&mut t, 1, 3, m), consts(&mut t, 1, 3, s));
                let kl = kl_loss(&mut t, mu, sigma).unwrap();
                let v = t.item(kl).unwrap();
                if v < best.0 {
                    best = (v, m, s);
                }
            }
        }
        assert!(best.0.abs() < 1e-12);
        assert!(best.1.abs() < 1e-9 && (best.2 - 1.0).abs() < 1e-9, "{best:?}");
    }

    #[test]
    fn kl_gradient_is_closed_form() {
        // d/dmu = mu/(D·N), d/dsigma = (sigma - 1/sigma)/(D·N)
        let (n, d) = (3, 4);
        let mut store = ParamStore::new();
        let mu_id = store.insert("mu", random(n, d, 7));
        let mut sig = random(n, d, 8);
        sig.data_mut().iter_mut().for_each(|v| *v = 0.2 + v.abs());
        let sig_id = store.insert("sigma", sig);
        let mut t = Tape::new();
        let mu = t.param(&store, mu_id).unwrap();
        let sigma = t.param(&store, sig_id).unwrap();
        let kl = kl_loss(&mut t, mu, sigma).unwrap();
        t.backward(kl, &mut store).unwrap();
        let scale = (n * d) as f64;
        for (g, m) in store.get(mu_id).grad.as_ref().unwrap().iter().zip(store.get(mu_id).data()) {
            assert!((g - m / scale).abs() < 1e-10);
        }
        for (g, s) in store.get(sig_id).grad.as_ref().unwrap().iter().zip(store.get(sig_id).data()) {
            assert!((g - (s - 1.0 / s) / scale).abs() < 1e-10);
        }
        let report = finite_diff_check(
            |t, s| {
                let mu = t.param(s, mu_id)?;
                let sigma = t.param(s, sig_id)?;
                kl_loss(t, mu, sigma)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn distance_loss_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![12.0, 9.0]).unwrap()).unwrap(); // 225
        let z = t.constant(Tensor::matrix(1, 2, vec![6.0, 8.0]).unwrap()).unwrap(); // 100
        let l = magnitude_distance_loss(&mut t, a, z, 100.0).unwrap();
        assert_eq!(t.item(l).unwrap(), 0.0);
        let zero = consts(&mut t, 1, 3, 0.0);
        let l = magnitude_distance_loss(&mut t, zero, zero, 100.0).unwrap();
        assert_eq!(t.item(l).unwrap(), 100.0);
        assert!(magnitude_distance_loss(&mut t, zero, zero, 0.0).is_err());
    }

    #[test]
    fn distance_loss_monotonicity() {
        let mut rng = DetRng::seed_from_u64(5);
        let mut t = Tape::new();
        for _ in 0..200 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-8.0..8.0)).collect();
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-8.0..8.0)).collect();
            let grow = rng.random_range(1.0..2.0);
            let eval = |t: &mut Tape, a: &[f64], z: &[f64]| {
                let av = t.constant(Tensor::matrix(1, 3, a.to_vec()).unwrap()).unwrap();
                let zv = t.constant(Tensor::matrix(1, 3, z.to_vec()).unwrap()).unwrap();
                let l = magnitude_distance_loss(t, av, zv, 100.0).unwrap();
                t.item(l).unwrap()
            };
            let base = eval(&mut t, &a, &z);
            let a_big: Vec<f64> = a.iter().map(|v| v * grow).collect();
            let z_big: Vec<f64> = z.iter().map(|v| v * grow).collect();
            assert!(eval(&mut t, &a_big, &z) <= base);
            assert!(eval(&mut t, &a, &z_big) >= base);
        }
    }

    #[test]
    fn fuse_concatenates() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let z = t.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
        let f = fuse(&mut t, x, z).unwrap();
        assert_eq!(t.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        let big_x = consts(&mut t, 200, 128, 1.0);
        let big_z = consts(&mut t, 200, 128, 0.0);
        let f = fuse(&mut t, big_x, big_z).unwrap();
        assert_eq!(t.dims(f), (200, 256));
        assert!(t.value(f).row(0)[128..].iter().all(|&v| v == 0.0));
    }
}

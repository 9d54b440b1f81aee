//! Global and local multi-head self-attention.
//!
//! The block embeds raw snippet features to width `D`, then mixes two
//! branches of width `D/2`: a global multi-head scaled dot-product attention
//! and a local branch whose attention matrix is the row softmax of the fixed
//! temporal mask `T(i, j) = -|i - j| / e^tau`. The concatenated branches are
//! projected back to `D` and passed through `LN(MLP(LN(x)) + x)`.

use crate::error::{Error, Result};
use crate::nn::{Affine, LayerNorm, ParamBuilder};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::nn::Init;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlMhsaConfig {
    pub feature_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Sensitivity of the local branch; larger values widen the local window.
    pub tau: f64,
}

impl GlMhsaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::contract("gl_mhsa", detail));
        if self.feature_dim == 0 || self.dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("all widths must be positive".into());
        }
        if self.dim % (2 * self.heads) != 0 {
            return bad(format!(
                "dim {} must be divisible by 2·heads = {}",
                self.dim,
                2 * self.heads
            ));
        }
        if !self.tau.is_finite() {
            return bad(format!("tau must be finite, got {}", self.tau));
        }
        Ok(())
    }
}

/// `T(i, j) = -|i - j| / e^tau` for an `n×n` mask.
pub fn temporal_mask(n: usize, tau: f64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::contract("temporal_mask", "n must be >= 1"));
    }
    let scale = (-tau).exp();
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            -(i.abs_diff(j) as f64) * scale
        })
        .collect();
    Tensor::matrix(n, n, data)
}

/// Which attention branches contribute to the block output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    Both,
    /// Local half replaced by zeros.
    GlobalOnly,
}

/// Intermediate attention matrices of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub global: Vec<Var>,
    pub local: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlMhsaParams {
    pub cfg: GlMhsaConfig,
    pub embed: Affine,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_vg: ParamId,
    pub w_l: ParamId,
    pub out: Affine,
    pub ln_inner: LayerNorm,
    pub mlp_in: Affine,
    pub mlp_out: Affine,
    pub ln_outer: LayerNorm,
}

impl GlMhsaParams {
    pub fn build(pb: &mut ParamBuilder<'_>, cfg: GlMhsaConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let sd = 1.0 / (d as f64).sqrt();
        Ok(Self {
            cfg,
            embed: Affine::build(pb, "gl.embed", cfg.feature_dim, d)?,
            w_q: pb.param("gl.wq", d, d, Init::Normal(sd))?,
            w_k: pb.param("gl.wk", d, d, Init::Normal(sd))?,
            w_vg: pb.param("gl.wvg", d, d / 2, Init::Normal(sd))?,
            w_l: pb.param("gl.wl", d, d / 2, Init::Normal(sd))?,
            out: Affine::build(pb, "gl.out", d, d)?,
            ln_inner: LayerNorm::build(pb, "gl.ln1", d)?,
            mlp_in: Affine::build(pb, "gl.mlp1", d, cfg.ff_dim)?,
            mlp_out: Affine::build(pb, "gl.mlp2", cfg.ff_dim, d)?,
            ln_outer: LayerNorm::build(pb, "gl.ln2", d)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_raw: Var) -> Result<Var> {
        self.forward_traced(tape, store, x_raw, Branches::Both).map(|(y, _)| y)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_raw: Var,
        branches: Branches,
    ) -> Result<(Var, AttentionTrace)> {
        let cfg = &self.cfg;
        let (n, f) = tape.dims(x_raw);
        if f != cfg.feature_dim {
            return Err(Error::contract(
                "gl_mhsa",
                format!("input has {f} features, block expects {}", cfg.feature_dim),
            ));
        }
        let x = self.embed.apply(tape, store, x_raw)?;

        let wq = tape.param(store, self.w_q)?;
        let wk = tape.param(store, self.w_k)?;
        let wvg = tape.param(store, self.w_vg)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let vg = tape.matmul(x, wvg)?;

        let (dh, dv) = (cfg.dim / cfg.heads, cfg.dim / (2 * cfg.heads));
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let mut global_weights = Vec::with_capacity(cfg.heads);
        let mut global: Option<Var> = None;
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scalar_mul(logits, scale)?;
            let attn = tape.row_softmax(logits)?;
            global_weights.push(attn);
            let vh = tape.slice_cols(vg, h * dv, (h + 1) * dv)?;
            let head = tape.matmul(attn, vh)?;
            global = Some(match global {
                None => head,
                Some(acc) => tape.concat_cols(acc, head)?,
            });
        }
        let global = global.expect("heads >= 1");

        let mask = tape.constant(temporal_mask(n, cfg.tau)?)?;
        let local_weights = tape.row_softmax(mask)?;
        let local = match branches {
            Branches::Both => {
                let wl = tape.param(store, self.w_l)?;
                let vl = tape.matmul(x, wl)?;
                tape.matmul(local_weights, vl)?
            }
            Branches::GlobalOnly => tape.constant(Tensor::zeros(n, cfg.dim / 2))?,
        };

        let mixed = tape.concat_cols(global, local)?;
        let mixed = self.out.apply(tape, store, mixed)?;

        let h = self.ln_inner.apply(tape, store, mixed)?;
        let h = self.mlp_in.apply(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.mlp_out.apply(tape, store, h)?;
        let res = tape.add(h, mixed)?;
        let y = self.ln_outer.apply(tape, store, res)?;
        Ok((
            y,
            AttentionTrace {
                global: global_weights,
                local: local_weights,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::DetRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn block(f: usize, d: usize, heads: usize, tau: f64, seed: u64) -> (ParamStore, GlMhsaParams) {
        let mut store = ParamStore::new();
        let mut rng = DetRng::seed_from_u64(seed);
        let cfg = GlMhsaConfig { feature_dim: f, dim: d, heads, ff_dim: 2 * d, tau };
        let p = GlMhsaParams::build(&mut ParamBuilder::Init { store: &mut store, rng: &mut rng }, cfg).unwrap();
        (store, p)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = DetRng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn mask_values() {
        let m = temporal_mask(6, 0.0).unwrap();
        for i in 0..6 {
            assert_eq!(m.at(i, i), 0.0);
        }
        assert_eq!(m.at(2, 3), -1.0);
        let m = temporal_mask(5, std::f64::consts::LN_2).unwrap();
        assert!((m.at(0, 4) + 2.0).abs() < 1e-12);
        assert_eq!(m.at(4, 0), m.at(0, 4));
    }

    #[test]
    fn config_divisibility() {
        let cfg = GlMhsaConfig { feature_dim: 4, dim: 10, heads: 4, ff_dim: 8, tau: 1.0 };
        assert!(cfg.validate().is_err());
        assert!(GlMhsaConfig { dim: 16, ..cfg }.validate().is_ok());
        assert!(GlMhsaConfig { dim: 16, tau: f64::NAN, ..cfg }.validate().is_err());
    }

    #[test]
    fn single_snippet_reduces_to_mlp_residual() {
        let (store, p) = block(5, 8, 2, 1.0, 3);
        let x = random(1, 5, 4);
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let (y, trace) = p.forward_traced(&mut t, &store, xv, Branches::Both).unwrap();
        for w in trace.global.iter().chain([&trace.local]) {
            assert_eq!(t.value(*w).data(), &[1.0]);
        }
        // With single-row softmaxes equal to 1, each branch is just its value projection.
        let xv = t.constant(x).unwrap();
        let e = p.embed.apply(&mut t, &store, xv).unwrap();
        let wvg = t.param(&store, p.w_vg).unwrap();
        let wl = t.param(&store, p.w_l).unwrap();
        let g = t.matmul(e, wvg).unwrap();
        let l = t.matmul(e, wl).unwrap();
        let c = t.concat_cols(g, l).unwrap();
        let m = p.out.apply(&mut t, &store, c).unwrap();
        let h = p.ln_inner.apply(&mut t, &store, m).unwrap();
        let h = p.mlp_in.apply(&mut t, &store, h).unwrap();
        let h = t.relu(h).unwrap();
        let h = p.mlp_out.apply(&mut t, &store, h).unwrap();
        let r = t.add(h, m).unwrap();
        let expected = p.ln_outer.apply(&mut t, &store, r).unwrap();
        for (a, b) in t.value(y).data().iter().zip(t.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn very_negative_tau_makes_local_attention_diagonal() {
        let (store, p) = block(4, 8, 2, -20.0, 1);
        let mut t = Tape::new();
        let x = t.constant(random(7, 4, 2)).unwrap();
        let (_, trace) = p.forward_traced(&mut t, &store, x, Branches::Both).unwrap();
        let w = t.value(trace.local);
        for i in 0..7 {
            assert!(w.at(i, i) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn output_rows_are_centered_at_init() {
        let (store, p) = block(8, 8, 2, 1.0, 5);
        let mut t = Tape::new();
        let x = t.constant(random(6, 8, 6)).unwrap();
        let y = p.forward(&mut t, &store, x).unwrap();
        let out = t.value(y);
        for i in 0..6 {
            let mean = out.row(i).iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-8);
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let (store, p) = block(6, 16, 4, 0.5, 9);
        let mut t = Tape::new();
        let x = t.constant(random(10, 6, 10)).unwrap();
        let (_, trace) = p.forward_traced(&mut t, &store, x, Branches::Both).unwrap();
        for w in trace.global.iter().chain([&trace.local]) {
            let w = t.value(*w);
            for i in 0..10 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(w.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn local_weights_depend_only_on_offset_for_interior_rows() {
        // Rows with the full support of a very narrow window see identical weights.
        let n = 40;
        let mut t = Tape::new();
        let m = t.constant(temporal_mask(n, -2.0).unwrap()).unwrap();
        let w = t.row_softmax(m).unwrap();
        let w = t.value(w).clone();
        for k in 0..4 {
            let reference = w.at(20, 20 + k);
            for i in 15..25 {
                assert!((w.at(i, i + k) - reference).abs() < 1e-12, "i={i} k={k}");
                assert!((w.at(i, i - k) - reference).abs() < 1e-12);
            }
        }
    }

    fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn permutation_equivariance_only_without_local_branch() {
        let (store, p) = block(5, 8, 2, 1.0, 11);
        let x = random(6, 5, 12);
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |x: Tensor, branches| {
            let mut t = Tape::new();
            let v = t.constant(x).unwrap();
            let (y, _) = p.forward_traced(&mut t, &store, v, branches).unwrap();
            t.value(y).clone()
        };
        let global = run(x.clone(), Branches::GlobalOnly);
        let global_perm = run(permute_rows(&x, &perm), Branches::GlobalOnly);
        let expected = permute_rows(&global, &perm);
        for (a, b) in expected.data().iter().zip(global_perm.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let both = run(x.clone(), Branches::Both);
        let both_perm = run(permute_rows(&x, &perm), Branches::Both);
        let diff = permute_rows(&both, &perm)
            .data()
            .iter()
            .zip(both_perm.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let (mut store, p) = block(5, 8, 2, 1.0, 13);
        let x = random(6, 5, 14);
        let readout = random(6, 8, 15);
        let report = finite_diff_check(
            |t, s| {
                let xv = t.constant(x.clone())?;
                let y = p.forward(t, s, xv)?;
                let r = t.constant(readout.clone())?;
                let prod = t.mul(y, r)?;
                t.reduce_sum(prod, crate::tape::Axis::All)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

//! Variationally inferred parameterization: a learned per-coordinate
//! interpolation between centered (λ = 1) and non-centered (λ = 0) forms.
//!
//! The transform maps auxiliary variables to model latents coordinate-wise:
//!
//! `z_i = f_i(π(z_i)) + g_i(π(z_i))^{1-λ_i} · (z̃_i - λ_i f_i(π(z_i)))`
//!
//! with log-Jacobian `Σ (1-λ_i) log g_i`. Powers of `g` are computed as
//! `exp((1-λ)·log g)` so gradients flow through both `g` and `λ`. Sites with
//! non-Gaussian priors report `f = 0`, `log g = 0`, which makes the transform
//! an exact pass-through for them regardless of λ.

use serde::{Deserialize, Serialize};

use crate::adcore::{ops, NodeId, Tape};
use crate::error::{Error, Result};
use crate::flows::{AffineBaseLayout, FlowFamily, FlowSpec};
use crate::modelzoo::{ModelGraph, SitePrior};

/// Unconstrained non-centering parameters; `λ_i = sigmoid(raw_i)` stays in
/// (0,1), approaching but never attaining the endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VipParams {
    pub raw: Vec<f64>,
}

impl VipParams {
    pub fn lambdas(&self, model: &ModelGraph) -> Vec<f64> {
        self.raw
            .iter()
            .zip(&model.sites)
            .map(|(&r, site)| match site.prior {
                SitePrior::Gaussian { .. } => sigmoid(r),
                // non-Gaussian sites are fixed fully non-centered
                SitePrior::NonGaussian { .. } => 0.0,
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// λ nodes from raw parameter nodes: sigmoid for Gaussian sites, constant 0
/// for non-Gaussian pass-through sites.
pub fn lambda_nodes(tape: &mut Tape, model: &ModelGraph, raw: &[NodeId]) -> Result<Vec<NodeId>> {
    if raw.len() != model.dim() {
        return Err(Error::Usage("lambda raw length != model dimension".into()));
    }
    model
        .sites
        .iter()
        .zip(raw)
        .map(|(site, &r)| match site.prior {
            SitePrior::Gaussian { .. } => tape.sigmoid(r),
            SitePrior::NonGaussian { .. } => Ok(tape.constant(0.0)),
        })
        .collect()
}

/// A draw from the transformed variational distribution, with everything
/// needed to evaluate its density.
#[derive(Debug)]
pub struct VipSampleNodes {
    pub z: Vec<NodeId>,
    pub z_tilde: Vec<NodeId>,
    /// `Σ (1-λ_i)·log g_i` along the realized path.
    pub log_jacobian: NodeId,
    /// `log q(z) = log q_base(z̃) - log_jacobian`.
    pub log_q: NodeId,
}

/// Coordinate-wise transform over tape nodes. `lambda` entries must already be
/// in (0,1) (or exact endpoints for constants).
pub fn vip_transform_nodes(
    tape: &mut Tape,
    model: &ModelGraph,
    lambda: &[NodeId],
    z_tilde: &[NodeId],
) -> Result<(Vec<NodeId>, NodeId)> {
    let d = model.dim();
    if lambda.len() != d || z_tilde.len() != d {
        return Err(Error::Usage("vip transform: dimension mismatch".into()));
    }
    let one = tape.constant(1.0);
    let mut z = Vec::with_capacity(d);
    let mut log_jac = tape.constant(0.0);
    for i in 0..d {
        let f = model.site_mean_node(tape, i, &z)?;
        let log_g = model.site_log_scale_node(tape, i, &z).map_err(|e| coord_err(e, i))?;
        let om_lambda = tape.sub(one, lambda[i])?;
        let exponent = tape.mul(om_lambda, log_g)?;
        let scale = tape.exp(exponent).map_err(|e| coord_err(e, i))?;
        let lam_f = tape.mul(lambda[i], f)?;
        let inner = tape.sub(z_tilde[i], lam_f)?;
        let scaled = tape.mul(scale, inner)?;
        let zi = tape.add(f, scaled).map_err(|e| coord_err(e, i))?;
        z.push(zi);
        log_jac = tape.add(log_jac, exponent)?;
    }
    Ok((z, log_jac))
}

/// Value-level transform: returns `(z, log_jacobian)`.
pub fn vip_transform(model: &ModelGraph, lambda: &[f64], z_tilde: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let lam: Vec<NodeId> = lambda.iter().map(|&l| tape.constant(l)).collect();
    let zt: Vec<NodeId> = z_tilde.iter().map(|&v| tape.constant(v)).collect();
    let (z, lj) = vip_transform_nodes(&mut tape, model, &lam, &zt)?;
    Ok((z.iter().map(|&id| tape.value(id)).collect(), tape.value(lj)))
}

/// Inverse transform: `z̃_i = λ_i f_i + (z_i - f_i)·g_i^{-(1-λ_i)}`. Direct
/// (non-sequential) since all parents are already known from `z`.
pub fn vip_inverse(model: &ModelGraph, lambda: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    if lambda.len() != d || z.len() != d {
        return Err(Error::Usage("vip inverse: dimension mismatch".into()));
    }
    for (i, v) in z.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Usage(format!("vip inverse: z[{i}] not finite")));
        }
    }
    let mut z_tilde = Vec::with_capacity(d);
    for i in 0..d {
        let f = model.site_mean(i, z)?;
        let log_g = model.site_log_scale(i, z)?;
        let scale = ((1.0 - lambda[i]) * log_g).exp();
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Domain(format!("vip inverse: scale underflow at coordinate {i}")));
        }
        z_tilde.push(lambda[i] * f + (z[i] - f) / scale);
    }
    Ok(z_tilde)
}

/// Sample the transformed distribution and evaluate its log-density:
/// `z̃ = mu + L·eps`, then the coordinate-wise transform, with
/// `log q(z) = log q_base(z̃) - log J` and
/// `log q_base(z̃) = Σ(-½ eps_i² - ½ln2π - log L_ii)`.
pub fn sample_q_vip_nodes(
    tape: &mut Tape,
    model: &ModelGraph,
    base: &AffineBaseLayout,
    base_params: &[NodeId],
    lambda: &[NodeId],
    eps: &[f64],
) -> Result<VipSampleNodes> {
    let (z_tilde, base_logdet) = crate::flows::full_rank_forward(tape, base, base_params, eps)?;
    let const_part: f64 = eps.iter().map(|e| -0.5 * e * e - 0.5 * ops::LN_2PI).sum();
    let c = tape.constant(const_part);
    let log_q_base = tape.sub(c, base_logdet)?;
    let (z, log_jacobian) = vip_transform_nodes(tape, model, lambda, &z_tilde)?;
    let log_q = tape.sub(log_q_base, log_jacobian)?;
    Ok(VipSampleNodes { z, z_tilde, log_jacobian, log_q })
}

/// The partially non-centered joint density over tape nodes:
/// `Σ_i log N(z̃_i | λ_i f_i, g_i^{λ_i}) + Σ_j log p(x_j | π(x_j))`
/// with parents reconstructed through the transform along the way.
/// Non-Gaussian sites contribute their own log-density at `z̃_i` (the
/// transform passes them through unchanged).
pub fn log_p_vip_nodes(
    tape: &mut Tape,
    model: &ModelGraph,
    lambda: &[NodeId],
    z_tilde: &[NodeId],
) -> Result<NodeId> {
    let d = model.dim();
    if lambda.len() != d || z_tilde.len() != d {
        return Err(Error::Usage("log_p_vip: dimension mismatch".into()));
    }
    let one = tape.constant(1.0);
    let mut z: Vec<NodeId> = Vec::with_capacity(d);
    let mut acc = tape.constant(0.0);
    for i in 0..d {
        match &model.sites[i].prior {
            SitePrior::Gaussian { .. } => {
                let f = model.site_mean_node(tape, i, &z)?;
                let log_g = model.site_log_scale_node(tape, i, &z)?;
                // density term: N(z̃_i | λ f, exp(λ·log g))
                let lam_f = tape.mul(lambda[i], f)?;
                let lam_lg = tape.mul(lambda[i], log_g)?;
                let term = ops::gaussian_logpdf(tape, z_tilde[i], lam_f, lam_lg)?;
                acc = tape.add(acc, term)?;
                // reconstruct z_i for downstream parents
                let om_lambda = tape.sub(one, lambda[i])?;
                let exponent = tape.mul(om_lambda, log_g)?;
                let scale = tape.exp(exponent).map_err(|e| coord_err(e, i))?;
                let inner = tape.sub(z_tilde[i], lam_f)?;
                let scaled = tape.mul(scale, inner)?;
                let zi = tape.add(f, scaled)?;
                z.push(zi);
            }
            SitePrior::NonGaussian { logpdf } => {
                let parents: Vec<NodeId> =
                    model.sites[i].parents.iter().map(|&p| z[p]).collect();
                let term = logpdf(tape, z_tilde[i], &parents)?;
                acc = tape.add(acc, term)?;
                z.push(z_tilde[i]);
            }
        }
    }
    for lik in &model.likelihoods {
        let parents: Vec<NodeId> = lik.parents.iter().map(|&p| z[p]).collect();
        let term = (lik.logp)(tape, &parents)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Value-level partially non-centered joint.
pub fn log_p_vip(model: &ModelGraph, lambda: &[f64], z_tilde: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let lam: Vec<NodeId> = lambda.iter().map(|&l| tape.constant(l)).collect();
    let zt: Vec<NodeId> = z_tilde.iter().map(|&v| tape.constant(v)).collect();
    let root = log_p_vip_nodes(&mut tape, model, &lam, &zt)?;
    Ok(tape.value(root))
}

/// The generalized-flow parameters that reproduce the composite transform
/// (full-rank affine followed by the non-centering transform) at coordinate
/// `i`, given the realized prefix:
///
/// `m_i = f_i(π(z_i))`,
/// `log s_i = log L_ii + (1-λ_i)·log g_i(π(z_i))`,
/// `t_i = (λ_i f_i - mu_i - L_{i,<i}·eps_<i) / L_ii`.
pub fn gfaf_params_from_vip(
    model: &ModelGraph,
    mu: &[f64],
    l_rows: &[Vec<f64>],
    lambda: &[f64],
    z_prefix: &[f64],
    eps_prefix: &[f64],
    i: usize,
) -> Result<(f64, f64, f64)> {
    if i >= model.dim() || z_prefix.len() != i || eps_prefix.len() != i {
        return Err(Error::Usage(format!("gfaf_params_from_vip: bad prefix lengths for i={i}")));
    }
    let f = model.site_mean(i, z_prefix)?;
    let log_g = model.site_log_scale(i, z_prefix)?;
    let l_ii = l_rows[i][i];
    let m = f;
    let log_s = l_ii.ln() + (1.0 - lambda[i]) * log_g;
    let cross: f64 = (0..i).map(|j| l_rows[i][j] * eps_prefix[j]).sum();
    let t = (lambda[i] * f - mu[i] - cross) / l_ii;
    Ok((m, log_s, t))
}

/// Affine MIF conditioner weights implementing the same construction: the
/// shift reads the prior-mean slot, the log-scale reads the prior-log-scale
/// slot with coefficient `(1-λ_i)` plus bias `log L_ii`, and the translation
/// combines the prior-mean slot with the noise slots. Valid for arbitrary
/// (not just affine) prior functions, since the prior values arrive as
/// conditioner inputs.
pub fn mif_params_from_vip(
    model: &ModelGraph,
    mu: &[f64],
    l_rows: &[Vec<f64>],
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let d = model.dim();
    if mu.len() != d || l_rows.len() != d || lambda.len() != d {
        return Err(Error::Usage("mif_params_from_vip: dimension mismatch".into()));
    }
    let spec = FlowSpec::new(FlowFamily::Mif, d, 0);
    let layout = spec.layout();
    let mut params = vec![0.0; layout.total];
    for i in 0..d {
        let coord = &layout.coords[i];
        let l_ii = l_rows[i][i];
        // m_i: weight 1 on the f slot
        params[coord.m.offset + d] = 1.0;
        // log s_i: bias log L_ii, weight (1-λ_i) on the log g slot
        params[coord.s.offset + coord.s.arity] = l_ii.ln();
        params[coord.s.offset + d + 1] = 1.0 - lambda[i];
        // t_i: weight λ_i/L_ii on the f slot, -L_ij/L_ii on eps slot j, bias -mu_i/L_ii
        let t = coord.t.as_ref().expect("mif layout has t");
        params[t.offset + d] = lambda[i] / l_ii;
        for j in 0..i {
            params[t.offset + d + 2 + j] = -l_rows[i][j] / l_ii;
        }
        params[t.offset + t.arity] = -mu[i] / l_ii;
    }
    Ok(params)
}

fn coord_err(e: Error, i: usize) -> Error {
    match e {
        Error::Domain(msg) => Error::Domain(format!("coordinate {i}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::fd::jacobian;
    use crate::linalg::{log_abs_det, solve_lower};
    use crate::modelzoo::benchmarks::funnel;
    use crate::modelzoo::{LatentSite, SiteFn};
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::Distribution;

    fn funnel_slice2() -> ModelGraph {
        // f1=0, g1=3; f2=0, g2=exp(z1/2)
        ModelGraph::new(
            "funnel2",
            vec![
                LatentSite::gaussian("x1", vec![], SiteFn::constant(0.0), SiteFn::constant(3.0f64.ln())),
                LatentSite::gaussian(
                    "x2",
                    vec![0],
                    SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
                    SiteFn::Affine { bias: 0.0, coeffs: vec![0.5] },
                ),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn lambda_one_is_identity() {
        let m = funnel_slice2();
        let (z, lj) = vip_transform(&m, &[1.0, 1.0], &[0.7, -1.3]).unwrap();
        assert_eq!(z, vec![0.7, -1.3]);
        assert_eq!(lj, 0.0);
    }

    #[test]
    fn funnel_slice_hand_case() {
        // λ=0, z̃=(1,2): z1 = 3, z2 = 2·exp(1.5); log J = ln 3 + 1.5
        let m = funnel_slice2();
        let (z, lj) = vip_transform(&m, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((z[0] - 3.0).abs() < 1e-12);
        assert!((z[1] - 2.0 * 1.5f64.exp()).abs() < 1e-10);
        assert!((z[1] - 8.9634).abs() < 1e-3);
        assert!((lj - (3.0f64.ln() + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn scalar_site_hand_case() {
        // f=2, g=4, λ=0.5, z̃=3: z = 2 + 2·(3-1) = 6
        let m = ModelGraph::new(
            "scalar",
            vec![LatentSite::gaussian("z", vec![], SiteFn::constant(2.0), SiteFn::constant(4.0f64.ln()))],
            vec![],
        )
        .unwrap();
        let (z, _) = vip_transform(&m, &[0.5], &[3.0]).unwrap();
        assert!((z[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let m = funnel_slice2();
        let zt = vip_inverse(&m, &[0.0, 0.0], &[3.0, 2.0 * 1.5f64.exp()]).unwrap();
        assert!((zt[0] - 1.0).abs() < 1e-10);
        assert!((zt[1] - 2.0).abs() < 1e-10);

        // λ = 1 limit
        let zt = vip_inverse(&m, &[1.0, 1.0], &[0.4, -0.9]).unwrap();
        assert_eq!(zt, vec![0.4, -0.9]);

        // 500 random instances on the full funnel
        let f = funnel();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let lambda: Vec<f64> = (0..10).map(|_| rng.random_range(0.05..0.95)).collect();
            let z_tilde: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (z, _) = vip_transform(&f, &lambda, &z_tilde).unwrap();
            let back = vip_inverse(&f, &lambda, &z).unwrap();
            for (a, b) in back.iter().zip(&z_tilde) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn near_endpoint_lambda_is_near_identity() {
        let m = funnel_slice2();
        let lam = sigmoid(20.0);
        let z_tilde = [1.7, -2.2];
        let (z, _) = vip_transform(&m, &[lam, lam], &z_tilde).unwrap();
        for (a, b) in z.iter().zip(&z_tilde) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_q_vip_standard_normal_limit() {
        // mu=0, L=I, λ→1, standard-normal prior: z = eps and log_q is the
        // standard-normal log-density of eps
        let m = ModelGraph::new(
            "std",
            vec![
                LatentSite::gaussian("a", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
                LatentSite::gaussian("b", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
            ],
            vec![],
        )
        .unwrap();
        let base = AffineBaseLayout { dim: 2, full_rank: true };
        let mut tape = Tape::new();
        let bp = tape.param_vec(&vec![0.0; base.param_count()]);
        let lam: Vec<NodeId> = (0..2).map(|_| tape.constant(1.0)).collect();
        let eps = [0.6, -1.1];
        let s = sample_q_vip_nodes(&mut tape, &m, &base, &bp, &lam, &eps).unwrap();
        let want: f64 = eps.iter().map(|e| -0.5 * e * e - 0.5 * ops::LN_2PI).sum();
        assert!((tape.value(s.log_q) - want).abs() < 1e-12);
        for (zi, e) in s.z.iter().zip(&eps) {
            assert!((tape.value(*zi) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_noncentered_funnel_has_zero_kl() {
        // λ=0, mu=0, L=I on the funnel: q(z) IS the funnel, so the per-sample
        // log q - log p vanishes and so does the sample KL estimate
        let m = funnel();
        let base = AffineBaseLayout { dim: 10, full_rank: true };
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let mut acc = 0.0;
        let n = 2000;
        for _ in 0..n {
            let eps: Vec<f64> =
                (0..10).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
            let mut tape = Tape::new();
            let bp = tape.param_vec(&vec![0.0; base.param_count()]);
            let lam: Vec<NodeId> = (0..10).map(|_| tape.constant(0.0)).collect();
            let s = sample_q_vip_nodes(&mut tape, &m, &base, &bp, &lam, &eps).unwrap();
            let z: Vec<f64> = s.z.iter().map(|&id| tape.value(id)).collect();
            let lp = m.log_joint(&z).unwrap();
            acc += tape.value(s.log_q) - lp;
        }
        let kl = acc / n as f64;
        assert!(kl.abs() < 0.02, "sample KL {kl}");
    }

    #[test]
    fn log_q_matches_change_of_variables_oracle() {
        // log q(z) must equal log N(z̃; mu, LL^T) - log|det ∂z/∂z̃| with the
        // Jacobian obtained by finite differences
        let m = funnel();
        let d = 4;
        let slice = ModelGraph::new("funnel4", m.sites[..d].to_vec(), vec![]).unwrap();
        let base = AffineBaseLayout { dim: d, full_rank: true };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for trial in 0..20 {
            let bp_vals: Vec<f64> =
                (0..base.param_count()).map(|_| 0.4 * rng.random_range(-1.0..1.0)).collect();
            let lambda: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
            let eps: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();

            let mut tape = Tape::new();
            let bp = tape.param_vec(&bp_vals);
            let lam: Vec<NodeId> = lambda.iter().map(|&l| tape.constant(l)).collect();
            let s = sample_q_vip_nodes(&mut tape, &slice, &base, &bp, &lam, &eps).unwrap();
            let log_q = tape.value(s.log_q);
            let z_tilde: Vec<f64> = s.z_tilde.iter().map(|&id| tape.value(id)).collect();

            // multivariate normal density via triangular solve
            let l_rows = base.cholesky_rows(&bp_vals);
            let mu: Vec<f64> = (0..d).map(|i| bp_vals[base.mu(i)]).collect();
            let centered: Vec<f64> = z_tilde.iter().zip(&mu).map(|(a, b)| a - b).collect();
            let e = solve_lower(&l_rows, &centered).unwrap();
            let log_base: f64 = e.iter().map(|v| -0.5 * v * v - 0.5 * ops::LN_2PI).sum::<f64>()
                - l_rows.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>();

            let jac =
                jacobian(|zt| vip_transform(&slice, &lambda, zt).unwrap().0, &z_tilde, 1e-6)
                    .unwrap();
            let logdet = log_abs_det(&jac).unwrap();
            assert!(
                (log_q - (log_base - logdet)).abs() < 1e-5,
                "trial {trial}: {log_q} vs {}",
                log_base - logdet
            );
        }
    }

    #[test]
    fn log_jacobian_matches_numeric_jacobian() {
        let m = funnel();
        let d = 4;
        let slice = ModelGraph::new("funnel4", m.sites[..d].to_vec(), vec![]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let lambda: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
            let z_tilde: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (_, lj) = vip_transform(&slice, &lambda, &z_tilde).unwrap();
            let jac =
                jacobian(|zt| vip_transform(&slice, &lambda, zt).unwrap().0, &z_tilde, 1e-6)
                    .unwrap();
            let numeric = log_abs_det(&jac).unwrap();
            assert!((lj - numeric).abs() < 1e-5);
        }
    }

    #[test]
    fn log_p_vip_limits() {
        let m = funnel();
        let z_tilde: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.4).collect();
        // λ = 1 reduces to the ordinary joint
        let lp = log_p_vip(&m, &vec![1.0; 10], &z_tilde).unwrap();
        let lj = m.log_joint(&z_tilde).unwrap();
        assert!((lp - lj).abs() < 1e-10);
        // λ = 0 on the prior-only funnel: sum of standard-normal densities
        let lp0 = log_p_vip(&m, &vec![0.0; 10], &z_tilde).unwrap();
        let want: f64 = z_tilde.iter().map(|v| -0.5 * v * v - 0.5 * ops::LN_2PI).sum();
        assert!((lp0 - want).abs() < 1e-10);
    }

    #[test]
    fn pointwise_kl_identity() {
        // log q(z) - log p(z,x) == log q_base(z̃) - log p_vip(z̃,x)
        let m = funnel();
        let base = AffineBaseLayout { dim: 10, full_rank: true };
        let mut rng = ChaCha12Rng::seed_from_u64(91);
        for _ in 0..50 {
            let bp_vals: Vec<f64> =
                (0..base.param_count()).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect();
            let lambda: Vec<f64> = (0..10).map(|_| rng.random_range(0.05..0.95)).collect();
            let eps: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();

            let mut tape = Tape::new();
            let bp = tape.param_vec(&bp_vals);
            let lam: Vec<NodeId> = lambda.iter().map(|&l| tape.constant(l)).collect();
            let s = sample_q_vip_nodes(&mut tape, &m, &base, &bp, &lam, &eps).unwrap();
            let z: Vec<f64> = s.z.iter().map(|&id| tape.value(id)).collect();
            let z_tilde: Vec<f64> = s.z_tilde.iter().map(|&id| tape.value(id)).collect();
            let lhs = tape.value(s.log_q) - m.log_joint(&z).unwrap();
            let log_q_base = tape.value(s.log_q) + tape.value(s.log_jacobian);
            let rhs = log_q_base - log_p_vip(&m, &lambda, &z_tilde).unwrap();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gfaf_construction_hand_cases() {
        let m = funnel();
        let d = 10;
        let mu = vec![0.0; d];
        let mut l_rows: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut row = vec![0.0; i + 1];
                row[i] = 1.0;
                row
            })
            .collect();
        // i = 0 on the funnel: m=0, log s = ln 3, t = 0
        let (m0, s0, t0) =
            gfaf_params_from_vip(&m, &mu, &l_rows, &vec![0.0; d], &[], &[], 0).unwrap();
        assert_eq!(m0, 0.0);
        assert!((s0 - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(t0, 0.0);

        // i = 1 with L10=0.5, eps0=2, λ1=0.3, f1=1, mu1=0, L11=2 -> t = -0.35
        let scalarish = ModelGraph::new(
            "two",
            vec![
                LatentSite::gaussian("a", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
                LatentSite::gaussian("b", vec![], SiteFn::constant(1.0), SiteFn::constant(0.0)),
            ],
            vec![],
        )
        .unwrap();
        l_rows[1] = vec![0.5, 2.0];
        let (_, _, t1) = gfaf_params_from_vip(
            &scalarish,
            &[0.0, 0.0],
            &l_rows[..2],
            &[0.0, 0.3],
            &[0.0],
            &[2.0],
            1,
        )
        .unwrap();
        assert!((t1 - (-0.35)).abs() < 1e-12);

        // degenerate identity: λ=0, f≡0, g≡1, mu=0, L=I
        let std2 = ModelGraph::new(
            "std2",
            vec![
                LatentSite::gaussian("a", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
                LatentSite::gaussian("b", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
            ],
            vec![],
        )
        .unwrap();
        let eye = vec![vec![1.0], vec![0.0, 1.0]];
        let (mm, ss, tt) =
            gfaf_params_from_vip(&std2, &[0.0, 0.0], &eye, &[0.0, 0.0], &[0.3], &[0.3], 1).unwrap();
        assert_eq!((mm, ss, tt), (0.0, 0.0, 0.0));
    }
}

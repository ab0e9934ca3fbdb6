//! Reparameterized Monte Carlo ELBO estimation and gradient-based training.
//!
//! One training run is single-threaded and deterministic given its seed; a
//! learning-rate sweep runs independent seeded runs (optionally in parallel)
//! and keeps the best final fresh-sample ELBO. Every estimate that feeds a
//! reported number uses its own RNG stream: init, per-iteration noise, and
//! final evaluation never share draws.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adcore::{ops, NodeId, Tape};
use crate::error::{Error, Result};
use crate::flows::{self, AffineBaseLayout, FlowFamily, FlowSpec, MifFlags};
use crate::modelzoo::ModelGraph;
use crate::vip;

/// A variational family: Gaussian (mean-field or full-rank, optionally with
/// the learned non-centering transform) or one of the flow families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    MeanField { vip: bool },
    FullRank { vip: bool },
    Flow(FlowSpec),
}

impl Family {
    /// Parse a family tag plus flow options. Flags are only legal on MIF.
    pub fn from_config(tag: &str, dim: usize, hidden: usize, flags: MifFlags) -> Result<Family> {
        let flow = |family| Family::Flow(FlowSpec { family, dim, hidden, flags });
        let plain = MifFlags::default();
        let fam = match tag {
            "mf" => Family::MeanField { vip: false },
            "mf-vip" => Family::MeanField { vip: true },
            "fr" => Family::FullRank { vip: false },
            "fr-vip" => Family::FullRank { vip: true },
            "faf" => flow(FlowFamily::Faf),
            "iaf" => flow(FlowFamily::Iaf),
            "gfaf" => flow(FlowFamily::Gfaf),
            "mif" => flow(FlowFamily::Mif),
            other => return Err(Error::Config(format!("unknown family '{other}'"))),
        };
        match &fam {
            Family::Flow(spec) if spec.family != FlowFamily::Mif && spec.flags != plain => {
                Err(Error::Config(format!("ablation flags are only legal on mif, not {tag}")))
            }
            Family::Flow(_) => Ok(fam),
            _ if flags != plain => {
                Err(Error::Config(format!("ablation flags are only legal on mif, not {tag}")))
            }
            _ if hidden != 0 => {
                Err(Error::Config(format!("hidden width only applies to flow families, not {tag}")))
            }
            _ => Ok(fam),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Family::MeanField { vip: false } => "mf".into(),
            Family::MeanField { vip: true } => "mf-vip".into(),
            Family::FullRank { vip: false } => "fr".into(),
            Family::FullRank { vip: true } => "fr-vip".into(),
            Family::Flow(spec) => match spec.family {
                FlowFamily::Faf => "faf".into(),
                FlowFamily::Iaf => "iaf".into(),
                FlowFamily::Gfaf => "gfaf".into(),
                FlowFamily::Mif => "mif".into(),
            },
        }
    }

    fn base_layout(&self, dim: usize) -> AffineBaseLayout {
        AffineBaseLayout { dim, full_rank: matches!(self, Family::FullRank { .. }) }
    }

    pub fn is_vip(&self) -> bool {
        matches!(self, Family::MeanField { vip: true } | Family::FullRank { vip: true })
    }

    pub fn param_count(&self, dim: usize) -> usize {
        match self {
            Family::MeanField { vip } | Family::FullRank { vip } => {
                self.base_layout(dim).param_count() + if *vip { dim } else { 0 }
            }
            Family::Flow(spec) => spec.param_count(),
        }
    }

    /// Draw `z` and evaluate `log q(z)` for one noise vector. Returns the
    /// latent nodes, the log-density node, and the number of log-scale clamp
    /// activations.
    pub fn sample_nodes(
        &self,
        tape: &mut Tape,
        model: &ModelGraph,
        params: &[NodeId],
        eps: &[f64],
    ) -> Result<(Vec<NodeId>, NodeId, u32)> {
        let d = model.dim();
        match self {
            Family::MeanField { vip } | Family::FullRank { vip } => {
                let layout = self.base_layout(d);
                let base = &params[..layout.param_count()];
                if *vip {
                    let raw = &params[layout.param_count()..];
                    let lambda = vip::lambda_nodes(tape, model, raw)?;
                    let s = vip::sample_q_vip_nodes(tape, model, &layout, base, &lambda, eps)?;
                    Ok((s.z, s.log_q, 0))
                } else {
                    let (z, logdet) = flows::full_rank_forward(tape, &layout, base, eps)?;
                    let log_q = base_log_q(tape, logdet, eps)?;
                    Ok((z, log_q, 0))
                }
            }
            Family::Flow(spec) => {
                let model_opt = (spec.family == FlowFamily::Mif).then_some(model);
                let out = flows::flow_forward(tape, spec, params, model_opt, eps)?;
                let log_q = base_log_q(tape, out.logdet, eps)?;
                Ok((out.z, log_q, out.clamp_events))
            }
        }
    }
}

/// `log q(z) = Σ(-½eps² - ½ln2π) - logdet` for reparameterized samples.
fn base_log_q(tape: &mut Tape, logdet: NodeId, eps: &[f64]) -> Result<NodeId> {
    let const_part: f64 = eps.iter().map(|e| -0.5 * e * e - 0.5 * ops::LN_2PI).sum();
    let c = tape.constant(const_part);
    tape.sub(c, logdet)
}

/// Training hyperparameters. Defaults are the desk-scale budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub mc_samples: usize,
    pub learning_rates: Vec<f64>,
    pub seed: u64,
    pub eval_samples: usize,
    pub init_std: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm gradient clip threshold.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            mc_samples: 64,
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            seed: 7,
            eval_samples: 100_000,
            init_std: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if self.learning_rates.is_empty() {
            return Err(Error::Config("learning_rates must be non-empty".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Reduced budget for smoke runs and the larger synthetic models.
    pub fn quick(mut self) -> Self {
        self.iterations = self.iterations.min(3_000);
        self.mc_samples = self.mc_samples.min(16);
        self.eval_samples = self.eval_samples.min(20_000);
        if self.learning_rates.len() > 2 {
            self.learning_rates = vec![1e-2, 1e-3];
        }
        self
    }
}

/// The outcome of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub family: String,
    pub mif_flags: Option<MifFlags>,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Final fresh-sample negative ELBO (lower is better).
    pub neg_elbo: f64,
    /// Monte Carlo standard error of the final estimate.
    pub elbo_se: f64,
    /// Thinned (iteration, ELBO estimate) pairs from training.
    pub trace: Vec<(u64, f64)>,
    /// Learned non-centering parameters, for the VIP families.
    pub lambdas: Option<Vec<f64>>,
    pub params: Vec<f64>,
    pub seed: u64,
    pub iterations: u64,
    pub mc_samples: usize,
    pub eval_samples: usize,
    pub wall_secs: f64,
    pub clamp_events: u64,
    pub clip_events: u64,
    pub skipped_iterations: u64,
    pub failed: bool,
    pub failure: Option<String>,
}

/// First-order adaptive-moment ascent (decay 0.9/0.999, epsilon 1e-8).
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    fn ascend(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] += lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Stable seed derivation for independent RNG streams.
pub fn mix_seed(seed: u64, tag: &str, k: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= k.wrapping_mul(0x2545f4914f6cdd1d);
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

fn draw_eps(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Build the averaged ELBO estimate over a fixed noise batch on the given
/// tape. Samples that hit a numeric-domain error are skipped; the average
/// runs over the surviving samples. Errors out only if every sample failed.
pub fn elbo_batch_nodes(
    tape: &mut Tape,
    model: &ModelGraph,
    family: &Family,
    params: &[NodeId],
    eps_batch: &[Vec<f64>],
) -> Result<(NodeId, usize, u32)> {
    let mut terms = Vec::with_capacity(eps_batch.len());
    let mut clamps = 0;
    let mut last_err = None;
    for eps in eps_batch {
        let sampled = family.sample_nodes(tape, model, params, eps).and_then(|(z, log_q, c)| {
            let log_p = model.log_joint_nodes(tape, &z)?;
            Ok((log_p, log_q, c))
        });
        match sampled {
            Ok((log_p, log_q, c)) => {
                clamps += c;
                terms.push(tape.sub(log_p, log_q)?);
            }
            Err(e @ Error::Domain(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    if terms.is_empty() {
        return Err(Error::Training(format!(
            "every Monte Carlo sample was invalid (last: {})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let total = ops::sum(tape, &terms)?;
    let inv_n = tape.constant(1.0 / terms.len() as f64);
    let mean = tape.mul(total, inv_n)?;
    Ok((mean, terms.len(), clamps))
}

/// Value-only ELBO at fixed noise (the finite-difference target; deterministic
/// in `params` for a fixed batch).
pub fn elbo_with_eps(
    model: &ModelGraph,
    family: &Family,
    params: &[f64],
    eps_batch: &[Vec<f64>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = tape.param_vec(params);
    let (root, _, _) = elbo_batch_nodes(&mut tape, model, family, &ids, eps_batch)?;
    Ok(tape.value(root))
}

/// ELBO and its gradient at fixed noise.
pub fn elbo_grad(
    tape: &mut Tape,
    model: &ModelGraph,
    family: &Family,
    params: &[f64],
    eps_batch: &[Vec<f64>],
) -> Result<(f64, Vec<f64>, u32)> {
    tape.clear();
    let ids = tape.param_vec(params);
    let (root, _, clamps) = elbo_batch_nodes(tape, model, family, &ids, eps_batch)?;
    let grads = tape.backward(root)?;
    Ok((tape.value(root), grads, clamps))
}

/// Monte Carlo ELBO estimate with `n` fresh draws from `rng`.
pub fn elbo_estimate(
    model: &ModelGraph,
    family: &Family,
    params: &[f64],
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if n < 1 {
        return Err(Error::Usage("elbo_estimate needs n >= 1".into()));
    }
    let batch: Vec<Vec<f64>> = (0..n).map(|_| draw_eps(rng, model.dim())).collect();
    elbo_with_eps(model, family, params, &batch)
}

/// Final evaluation on a dedicated RNG stream never used in training.
/// Returns the ELBO estimate and its Monte Carlo standard error. Evaluation
/// is batched over a reused tape; results are deterministic per
/// `(params, seed)`.
pub fn final_eval(
    model: &ModelGraph,
    family: &Family,
    params: &[f64],
    eval_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    for (i, p) in params.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Training(format!("parameter {i} is not finite")));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, "final-eval", 0));
    let d = model.dim();
    let mut tape = Tape::with_capacity(1 << 16);
    let (mut sum, mut sum_sq, mut n_ok) = (0.0f64, 0.0f64, 0usize);
    let batch = 256;
    let mut remaining = eval_samples;
    while remaining > 0 {
        let take = batch.min(remaining);
        remaining -= take;
        tape.clear();
        let ids = tape.param_vec(params);
        for _ in 0..take {
            let eps = draw_eps(&mut rng, d);
            let term =
                family.sample_nodes(&mut tape, model, &ids, &eps).and_then(|(z, log_q, _)| {
                    let log_p = model.log_joint_nodes(&mut tape, &z)?;
                    Ok(tape.value(log_p) - tape.value(log_q))
                });
            match term {
                Ok(v) => {
                    sum += v;
                    sum_sq += v * v;
                    n_ok += 1;
                }
                Err(Error::Domain(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if n_ok == 0 {
        return Err(Error::Training("final evaluation: every sample was invalid".into()));
    }
    let mean = sum / n_ok as f64;
    let var = (sum_sq / n_ok as f64 - mean * mean).max(0.0);
    let se = (var / n_ok as f64).sqrt();
    Ok((mean, se))
}

/// Train one family at one learning rate. Initialization, training noise, and
/// final evaluation use independent streams derived from `seed`. A run that
/// fails 100 consecutive iterations is marked failed rather than fatal.
pub fn train(
    model: &ModelGraph,
    family: &Family,
    config: &TrainConfig,
    lr: f64,
    seed: u64,
) -> Result<RunResult> {
    config.validate()?;
    if let Family::Flow(spec) = family {
        for w in spec.validate(Some(model))? {
            eprintln!("warning: {w}");
        }
    }
    let start = Instant::now();
    let d = model.dim();
    let n_params = family.param_count(d);

    let mut init_rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, "init", 0));
    let mut params: Vec<f64> = (0..n_params)
        .map(|_| {
            let draw: f64 = StandardNormal.sample(&mut init_rng);
            config.init_std * draw
        })
        .collect();

    let mut noise_rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, "noise", 0));
    let mut adam = Adam::new(n_params, config);
    let mut tape = Tape::with_capacity(1 << 16);
    let mut grads_buf: Vec<f64>;

    let thin = (config.iterations / 200).max(1);
    let mut trace = Vec::new();
    let mut clamp_events = 0u64;
    let mut clip_events = 0u64;
    let mut skipped = 0u64;
    let mut consecutive_failures = 0u64;
    let mut failure = None;

    for it in 0..config.iterations {
        let eps_batch: Vec<Vec<f64>> =
            (0..config.mc_samples).map(|_| draw_eps(&mut noise_rng, d)).collect();
        match elbo_grad(&mut tape, model, family, &params, &eps_batch) {
            Ok((elbo, grads, clamps)) => {
                consecutive_failures = 0;
                clamp_events += clamps as u64;
                grads_buf = grads;
                let norm = grads_buf.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    skipped += 1;
                    continue;
                }
                if norm > config.grad_clip {
                    let scale = config.grad_clip / norm;
                    for g in grads_buf.iter_mut() {
                        *g *= scale;
                    }
                    clip_events += 1;
                }
                adam.ascend(&mut params, &grads_buf, lr);
                if it % thin == 0 || it + 1 == config.iterations {
                    trace.push((it, elbo));
                }
            }
            Err(Error::Training(msg)) | Err(Error::Domain(msg)) => {
                skipped += 1;
                consecutive_failures += 1;
                if consecutive_failures >= 100 {
                    failure =
                        Some(format!("diverged: 100 consecutive failed iterations at {it} ({msg})"));
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }

    let mut failed = failure.is_some() || params.iter().any(|p| !p.is_finite());
    let (neg_elbo, elbo_se) = if failed {
        (f64::INFINITY, f64::INFINITY)
    } else {
        match final_eval(model, family, &params, config.eval_samples, seed) {
            Ok((elbo, se)) => (-elbo, se),
            Err(e) => {
                failure = Some(format!("final evaluation failed: {e}"));
                failed = true;
                (f64::INFINITY, f64::INFINITY)
            }
        }
    };

    let lambdas = family.is_vip().then(|| {
        let base = family.base_layout(d).param_count();
        vip::VipParams { raw: params[base..].to_vec() }.lambdas(model)
    });
    let (hidden, mif_flags) = match family {
        Family::Flow(spec) => {
            (spec.hidden, (spec.family == FlowFamily::Mif).then_some(spec.flags))
        }
        _ => (0, None),
    };

    Ok(RunResult {
        model: model.name.clone(),
        family: family.tag(),
        mif_flags,
        hidden,
        learning_rate: lr,
        neg_elbo,
        elbo_se,
        trace,
        lambdas,
        params,
        seed,
        iterations: config.iterations,
        mc_samples: config.mc_samples,
        eval_samples: config.eval_samples,
        wall_secs: start.elapsed().as_secs_f64(),
        clamp_events,
        clip_events,
        skipped_iterations: skipped,
        failed,
        failure,
    })
}

/// Sweep result: the winning run plus every per-rate run for the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: RunResult,
    pub runs: Vec<RunResult>,
}

/// Train once per learning rate (independent seeds derived from the master
/// seed) and keep the run with the best final fresh-sample ELBO. Ties break
/// toward the smaller rate. `jobs` bounds sweep parallelism; results are
/// identical regardless of it.
pub fn lr_sweep(
    model: &ModelGraph,
    family: &Family,
    config: &TrainConfig,
    jobs: usize,
) -> Result<SweepResult> {
    config.validate()?;
    let rates = config.learning_rates.clone();
    let jobs = jobs.max(1).min(rates.len());
    let mut runs: Vec<Option<RunResult>> = (0..rates.len()).map(|_| None).collect();

    let chunks: Vec<Vec<usize>> =
        (0..jobs).map(|w| (w..rates.len()).step_by(jobs).collect()).collect();
    let results: Vec<Vec<(usize, Result<RunResult>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idxs| {
                let rates = &rates;
                scope.spawn(move || {
                    idxs.into_iter()
                        .map(|k| {
                            let run_seed = mix_seed(config.seed, "rate", k as u64);
                            (k, train(model, family, config, rates[k], run_seed))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    for chunk in results {
        for (k, res) in chunk {
            runs[k] = Some(res?);
        }
    }
    let runs: Vec<RunResult> = runs.into_iter().map(|r| r.expect("all rates ran")).collect();

    let mut best: Option<usize> = None;
    for (k, run) in runs.iter().enumerate() {
        if run.failed {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                run.neg_elbo < runs[b].neg_elbo
                    || (run.neg_elbo == runs[b].neg_elbo
                        && run.learning_rate < runs[b].learning_rate)
            }
        };
        if better {
            best = Some(k);
        }
    }
    match best {
        Some(b) => Ok(SweepResult { best: runs[b].clone(), runs }),
        None => {
            let diags: Vec<String> = runs
                .iter()
                .map(|r| {
                    format!(
                        "lr={}: {}",
                        r.learning_rate,
                        r.failure.clone().unwrap_or_else(|| "failed".into())
                    )
                })
                .collect();
            Err(Error::Training(format!("every learning rate failed: {}", diags.join("; "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::fd::finite_diff;
    use crate::modelzoo::{LatentSite, SiteFn};
    use rand::RngExt;

    fn standard_normal_model(d: usize) -> ModelGraph {
        let sites = (0..d)
            .map(|i| {
                LatentSite::gaussian(
                    &format!("z{i}"),
                    vec![],
                    SiteFn::constant(0.0),
                    SiteFn::constant(0.0),
                )
            })
            .collect();
        ModelGraph::new("stdnormal", sites, vec![]).unwrap()
    }

    #[test]
    fn elbo_of_exact_family_is_zero() {
        let m = standard_normal_model(1);
        let family = Family::FullRank { vip: false };
        let params = vec![0.0; family.param_count(1)];
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let est = elbo_estimate(&m, &family, &params, 10_000, &mut rng).unwrap();
        assert!(est.abs() < 3.0 / (10_000f64).sqrt(), "estimate {est}");
    }

    #[test]
    fn elbo_of_shifted_family_is_half() {
        // q = N(1,1), p = N(0,1): ELBO = -0.5
        let m = standard_normal_model(1);
        let family = Family::FullRank { vip: false };
        let layout = AffineBaseLayout { dim: 1, full_rank: true };
        let mut params = vec![0.0; family.param_count(1)];
        params[layout.mu(0)] = 1.0;
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let est = elbo_estimate(&m, &family, &params, 20_000, &mut rng).unwrap();
        assert!((est - (-0.5)).abs() < 0.05, "estimate {est}");
    }

    #[test]
    fn gradients_match_finite_differences_all_families() {
        // small chain with one likelihood term exercises every code path
        let model = ModelGraph::new(
            "mini",
            vec![
                LatentSite::gaussian("a", vec![], SiteFn::constant(0.0), SiteFn::constant(0.3)),
                LatentSite::gaussian(
                    "b",
                    vec![0],
                    SiteFn::Affine { bias: 0.1, coeffs: vec![0.5] },
                    SiteFn::Affine { bias: 0.0, coeffs: vec![0.25] },
                ),
                LatentSite::gaussian(
                    "c",
                    vec![1],
                    SiteFn::Affine { bias: 0.0, coeffs: vec![1.0] },
                    SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
                ),
            ],
            vec![crate::modelzoo::LikelihoodTerm {
                parents: vec![2],
                logp: std::sync::Arc::new(|tape: &mut Tape, p: &[NodeId]| {
                    let obs = tape.constant(0.7);
                    let ls = tape.constant(0.0);
                    ops::gaussian_logpdf(tape, obs, p[0], ls)
                }),
            }],
        )
        .unwrap();
        let d = model.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let eps_batch: Vec<Vec<f64>> = (0..8).map(|_| draw_eps(&mut rng, d)).collect();

        for (k, family) in [
            Family::MeanField { vip: false },
            Family::MeanField { vip: true },
            Family::FullRank { vip: false },
            Family::FullRank { vip: true },
            Family::Flow(FlowSpec::new(FlowFamily::Faf, d, 0)),
            Family::Flow(FlowSpec::new(FlowFamily::Iaf, d, 0)),
            Family::Flow(FlowSpec::new(FlowFamily::Gfaf, d, 0)),
            Family::Flow(FlowSpec::new(FlowFamily::Mif, d, 0)),
            Family::Flow(FlowSpec::new(FlowFamily::Mif, d, 2)),
        ]
        .into_iter()
        .enumerate()
        {
            let n = family.param_count(d);
            let mut prng = ChaCha12Rng::seed_from_u64(100 + k as u64);
            let params: Vec<f64> = (0..n).map(|_| 0.2 * prng.random_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let (_, grads, _) =
                elbo_grad(&mut tape, &model, &family, &params, &eps_batch).unwrap();
            let fd = finite_diff(
                |p| elbo_with_eps(&model, &family, p, &eps_batch).unwrap(),
                &params,
                1e-5,
            )
            .unwrap();
            let mut worst = 0.0f64;
            for (g, f) in grads.iter().zip(&fd) {
                worst = worst.max((g - f).abs() / f.abs().max(1e-2));
            }
            assert!(worst < 1e-4, "family {} worst rel err {worst}", family.tag());
        }
    }

    #[test]
    fn training_mean_field_on_standard_normal_converges() {
        let m = standard_normal_model(2);
        let family = Family::MeanField { vip: false };
        let config = TrainConfig {
            iterations: 2000,
            mc_samples: 16,
            learning_rates: vec![1e-2],
            eval_samples: 20_000,
            ..TrainConfig::default()
        };
        let run = train(&m, &family, &config, 1e-2, 42).unwrap();
        assert!(!run.failed);
        assert!(run.neg_elbo < 0.01, "neg elbo {}", run.neg_elbo);
        assert!(run.elbo_se < 0.01);
    }

    #[test]
    fn training_is_reproducible() {
        let m = standard_normal_model(2);
        let family = Family::MeanField { vip: false };
        let config = TrainConfig {
            iterations: 50,
            mc_samples: 4,
            eval_samples: 500,
            ..TrainConfig::default()
        };
        let a = train(&m, &family, &config, 1e-2, 9).unwrap();
        let b = train(&m, &family, &config, 1e-2, 9).unwrap();
        assert_eq!(a.neg_elbo.to_bits(), b.neg_elbo.to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn final_eval_is_deterministic_and_unbiased() {
        let m = standard_normal_model(1);
        let family = Family::FullRank { vip: false };
        let params = vec![0.0; family.param_count(1)];
        let (e1, se1) = final_eval(&m, &family, &params, 20_000, 3).unwrap();
        let (e2, _) = final_eval(&m, &family, &params, 20_000, 3).unwrap();
        assert_eq!(e1.to_bits(), e2.to_bits());
        assert!(e1.abs() < 4.0 * se1.max(1e-12), "elbo {e1} se {se1}");
    }

    #[test]
    fn sweep_picks_best_and_single_rate_matches_train() {
        let m = standard_normal_model(1);
        let family = Family::MeanField { vip: false };
        let config = TrainConfig {
            iterations: 300,
            mc_samples: 8,
            learning_rates: vec![1e-1, 1e-3],
            eval_samples: 2_000,
            seed: 13,
            ..TrainConfig::default()
        };
        let sweep = lr_sweep(&m, &family, &config, 2).unwrap();
        assert_eq!(sweep.runs.len(), 2);
        let best_neg = sweep
            .runs
            .iter()
            .filter(|r| !r.failed)
            .map(|r| r.neg_elbo)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(sweep.best.neg_elbo, best_neg);

        // degenerate single-rate sweep equals a direct train call
        let single = TrainConfig { learning_rates: vec![1e-2], ..config };
        let sweep1 = lr_sweep(&m, &family, &single, 1).unwrap();
        let direct = train(&m, &family, &single, 1e-2, mix_seed(13, "rate", 0)).unwrap();
        assert_eq!(sweep1.best.neg_elbo.to_bits(), direct.neg_elbo.to_bits());
    }

    #[test]
    fn divergent_run_is_marked_failed_not_fatal() {
        // a gigantic learning rate overflows the scale parameters quickly
        let m = standard_normal_model(2);
        let family = Family::FullRank { vip: false };
        let config = TrainConfig {
            iterations: 400,
            mc_samples: 2,
            learning_rates: vec![1e9, 1e-2],
            eval_samples: 1_000,
            grad_clip: 1e18,
            ..TrainConfig::default()
        };
        let sweep = lr_sweep(&m, &family, &config, 1).unwrap();
        assert!(sweep.runs.iter().any(|r| r.failed), "expected the 1e9 run to fail");
        assert!(!sweep.best.failed);
        assert!((sweep.best.learning_rate - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn all_samples_invalid_is_an_error() {
        let m = standard_normal_model(1);
        let family = Family::FullRank { vip: false };
        // raw diagonal 1e4 overflows exp() in the forward pass
        let params = vec![0.0, 1e4];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let err = elbo_estimate(&m, &family, &params, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }
}

//! Hierarchical Bayesian model graphs.
//!
//! A [`ModelGraph`] is an ordered list of latent sites, each conditionally
//! Gaussian with mean and log-scale functions of earlier sites, plus a list of
//! likelihood terms binding observed data to latent parents. Scales are stored
//! and evaluated in log space throughout, so positivity is structural and the
//! funnel-style scale chains never round-trip through `exp` unnecessarily.

pub mod benchmarks;
pub mod dataset;

use std::sync::Arc;

use crate::adcore::{ops, NodeId, Tape};
use crate::error::{Error, Result};

pub use benchmarks::{build_benchmark, synth_data, BenchmarkName, DataSource};
pub use dataset::{load_dataset, ColumnType, Dataset};

/// A site's mean or log-scale as a function of its parent values.
///
/// Almost every benchmark prior is affine in its parents, and the closed-form
/// flow constructions need to read those coefficients, so the affine case is
/// structured data rather than a closure. `General` covers anything else and
/// is evaluated through the tape.
#[derive(Clone)]
pub enum SiteFn {
    /// `bias + Σ coeffs[k] · parent_k` with coefficients aligned to the
    /// site's parent list.
    Affine { bias: f64, coeffs: Vec<f64> },
    General(Arc<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + Send + Sync>),
}

impl SiteFn {
    pub fn constant(c: f64) -> Self {
        SiteFn::Affine { bias: c, coeffs: Vec::new() }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, SiteFn::Affine { .. })
    }

    pub fn eval_nodes(&self, tape: &mut Tape, parents: &[NodeId]) -> Result<NodeId> {
        match self {
            SiteFn::Affine { bias, coeffs } => {
                if coeffs.len() != parents.len() {
                    return Err(Error::Model(format!(
                        "affine site fn arity {} but {} parents supplied",
                        coeffs.len(),
                        parents.len()
                    )));
                }
                ops::affine(tape, *bias, coeffs, parents)
            }
            SiteFn::General(f) => f(tape, parents),
        }
    }

    pub fn eval(&self, parent_values: &[f64]) -> Result<f64> {
        match self {
            SiteFn::Affine { bias, coeffs } => {
                if coeffs.len() != parent_values.len() {
                    return Err(Error::Model("affine site fn arity mismatch".into()));
                }
                Ok(bias + coeffs.iter().zip(parent_values).map(|(c, v)| c * v).sum::<f64>())
            }
            SiteFn::General(f) => {
                let mut tape = Tape::new();
                let nodes: Vec<NodeId> = parent_values.iter().map(|&v| tape.constant(v)).collect();
                let out = f(&mut tape, &nodes)?;
                Ok(tape.value(out))
            }
        }
    }
}

impl std::fmt::Debug for SiteFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SiteFn::Affine { bias, coeffs } => {
                f.debug_struct("Affine").field("bias", bias).field("coeffs", coeffs).finish()
            }
            SiteFn::General(_) => f.write_str("General(..)"),
        }
    }
}

/// Prior of one latent site.
#[derive(Clone)]
pub enum SitePrior {
    /// `z_i ~ N(mean(parents), exp(log_scale(parents)))`.
    Gaussian { mean: SiteFn, log_scale: SiteFn },
    /// A site with a non-Gaussian prior on the real line. `logpdf` receives
    /// the site value and its parent nodes. Such sites are passed through the
    /// partial non-centering transform unchanged.
    NonGaussian {
        logpdf: Arc<dyn Fn(&mut Tape, NodeId, &[NodeId]) -> Result<NodeId> + Send + Sync>,
    },
}

impl std::fmt::Debug for SitePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SitePrior::Gaussian { mean, log_scale } => f
                .debug_struct("Gaussian")
                .field("mean", mean)
                .field("log_scale", log_scale)
                .finish(),
            SitePrior::NonGaussian { .. } => f.write_str("NonGaussian(..)"),
        }
    }
}

/// One latent variable: its parents (indices of earlier sites) and its prior.
#[derive(Clone, Debug)]
pub struct LatentSite {
    pub name: String,
    pub parents: Vec<usize>,
    pub prior: SitePrior,
}

impl LatentSite {
    pub fn gaussian(name: &str, parents: Vec<usize>, mean: SiteFn, log_scale: SiteFn) -> Self {
        LatentSite { name: name.into(), parents, prior: SitePrior::Gaussian { mean, log_scale } }
    }

    /// Whether both prior functions are affine (Gaussian sites only).
    pub fn is_affine(&self) -> bool {
        match &self.prior {
            SitePrior::Gaussian { mean, log_scale } => mean.is_affine() && log_scale.is_affine(),
            SitePrior::NonGaussian { .. } => false,
        }
    }
}

/// One observed-data factor: `log p(x_j | parents)` with the data captured in
/// the closure. Parent nodes are passed in declared order.
#[derive(Clone)]
pub struct LikelihoodTerm {
    pub parents: Vec<usize>,
    pub logp: Arc<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + Send + Sync>,
}

impl std::fmt::Debug for LikelihoodTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LikelihoodTerm").field("parents", &self.parents).finish()
    }
}

/// A hierarchical model: topologically ordered latent sites plus likelihoods.
/// Immutable after construction and freely shared across threads.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub name: String,
    pub sites: Vec<LatentSite>,
    pub likelihoods: Vec<LikelihoodTerm>,
    /// Exact log normalizer when known (only the funnel: 0).
    pub log_normalizer_known: Option<f64>,
}

impl ModelGraph {
    pub fn new(name: &str, sites: Vec<LatentSite>, likelihoods: Vec<LikelihoodTerm>) -> Result<Self> {
        let graph = ModelGraph {
            name: name.into(),
            sites,
            likelihoods,
            log_normalizer_known: None,
        };
        graph.topological_order()?;
        for lik in &graph.likelihoods {
            for &p in &lik.parents {
                if p >= graph.dim() {
                    return Err(Error::Model(format!(
                        "likelihood parent {p} out of range (D={})",
                        graph.dim()
                    )));
                }
            }
        }
        Ok(graph)
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.sites.len()
    }

    /// Checks that the declared site order is a valid topological order:
    /// every parent index must precede its site. Returns the identity
    /// permutation on success; on failure names the first violating edge.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        for (i, site) in self.sites.iter().enumerate() {
            for &p in &site.parents {
                if p >= i {
                    return Err(Error::Model(format!(
                        "site {} ({}) declares parent {} which does not precede it (edge {} -> {})",
                        i, site.name, p, p, i
                    )));
                }
            }
        }
        Ok((0..self.sites.len()).collect())
    }

    /// True if every site has affine mean and log-scale functions.
    pub fn all_sites_affine(&self) -> bool {
        self.sites.iter().all(|s| s.is_affine())
    }

    fn gather<'a>(&self, z: &'a [NodeId], parents: &[usize]) -> Vec<NodeId> {
        parents.iter().map(|&p| z[p]).collect()
    }

    /// Prior mean of site `i` as a tape node given latent nodes `z`.
    /// Non-Gaussian sites report 0.
    pub fn site_mean_node(&self, tape: &mut Tape, i: usize, z: &[NodeId]) -> Result<NodeId> {
        let site = &self.sites[i];
        match &site.prior {
            SitePrior::Gaussian { mean, .. } => {
                let parents = self.gather(z, &site.parents);
                mean.eval_nodes(tape, &parents)
            }
            SitePrior::NonGaussian { .. } => Ok(tape.constant(0.0)),
        }
    }

    /// Prior log-scale of site `i` as a tape node. Non-Gaussian sites report 0.
    pub fn site_log_scale_node(&self, tape: &mut Tape, i: usize, z: &[NodeId]) -> Result<NodeId> {
        let site = &self.sites[i];
        match &site.prior {
            SitePrior::Gaussian { log_scale, .. } => {
                let parents = self.gather(z, &site.parents);
                log_scale.eval_nodes(tape, &parents)
            }
            SitePrior::NonGaussian { .. } => Ok(tape.constant(0.0)),
        }
    }

    /// f64 versions of the prior functions, for the closed-form constructions.
    pub fn site_mean(&self, i: usize, z: &[f64]) -> Result<f64> {
        let site = &self.sites[i];
        match &site.prior {
            SitePrior::Gaussian { mean, .. } => {
                let vals: Vec<f64> = site.parents.iter().map(|&p| z[p]).collect();
                mean.eval(&vals)
            }
            SitePrior::NonGaussian { .. } => Ok(0.0),
        }
    }

    pub fn site_log_scale(&self, i: usize, z: &[f64]) -> Result<f64> {
        let site = &self.sites[i];
        match &site.prior {
            SitePrior::Gaussian { log_scale, .. } => {
                let vals: Vec<f64> = site.parents.iter().map(|&p| z[p]).collect();
                log_scale.eval(&vals)
            }
            SitePrior::NonGaussian { .. } => Ok(0.0),
        }
    }

    /// `log p(z, x)` over tape nodes: the sum of all site prior log-densities
    /// and all likelihood terms.
    pub fn log_joint_nodes(&self, tape: &mut Tape, z: &[NodeId]) -> Result<NodeId> {
        if z.len() != self.dim() {
            return Err(Error::Usage(format!(
                "log_joint: z has length {}, model dimension is {}",
                z.len(),
                self.dim()
            )));
        }
        let mut acc = tape.constant(0.0);
        for (i, site) in self.sites.iter().enumerate() {
            let term = match &site.prior {
                SitePrior::Gaussian { mean, log_scale } => {
                    let parents = self.gather(z, &site.parents);
                    let m = mean.eval_nodes(tape, &parents)?;
                    let ls = log_scale.eval_nodes(tape, &parents)?;
                    ops::gaussian_logpdf(tape, z[i], m, ls)?
                }
                SitePrior::NonGaussian { logpdf } => {
                    let parents = self.gather(z, &site.parents);
                    logpdf(tape, z[i], &parents)?
                }
            };
            acc = tape.add(acc, term)?;
        }
        for lik in &self.likelihoods {
            let parents = self.gather(z, &lik.parents);
            let term = (lik.logp)(tape, &parents)?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    }

    /// `log p(z, x)` at a plain point. Domain failures (scale underflow and
    /// the like) surface as recoverable errors, never as NaN.
    pub fn log_joint(&self, z: &[f64]) -> Result<f64> {
        for (i, v) in z.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Usage(format!("log_joint: z[{i}] = {v} is not finite")));
            }
        }
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = z.iter().map(|&v| tape.constant(v)).collect();
        let root = self.log_joint_nodes(&mut tape, &nodes)?;
        Ok(tape.value(root))
    }

    /// Structural comparison used to verify builders have no hidden state:
    /// same name, dimension, parent wiring, and affine coefficients.
    pub fn same_structure(&self, other: &ModelGraph) -> bool {
        if self.name != other.name
            || self.dim() != other.dim()
            || self.likelihoods.len() != other.likelihoods.len()
            || self.log_normalizer_known != other.log_normalizer_known
        {
            return false;
        }
        for (a, b) in self.sites.iter().zip(&other.sites) {
            if a.name != b.name || a.parents != b.parents {
                return false;
            }
            match (&a.prior, &b.prior) {
                (
                    SitePrior::Gaussian { mean: ma, log_scale: sa },
                    SitePrior::Gaussian { mean: mb, log_scale: sb },
                ) => {
                    if !site_fn_eq(ma, mb) || !site_fn_eq(sa, sb) {
                        return false;
                    }
                }
                (SitePrior::NonGaussian { .. }, SitePrior::NonGaussian { .. }) => {}
                _ => return false,
            }
        }
        self.likelihoods.iter().zip(&other.likelihoods).all(|(a, b)| a.parents == b.parents)
    }
}

fn site_fn_eq(a: &SiteFn, b: &SiteFn) -> bool {
    match (a, b) {
        (SiteFn::Affine { bias: ba, coeffs: ca }, SiteFn::Affine { bias: bb, coeffs: cb }) => {
            ba == bb && ca == cb
        }
        (SiteFn::General(_), SiteFn::General(_)) => true,
        _ => false,
    }
}

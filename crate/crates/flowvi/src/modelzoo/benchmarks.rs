//! The benchmark model zoo: builders for the nine hierarchical models, their
//! bundled datasets (eight-schools, seeds), and synthetic-data templates for
//! the models whose original datasets are not redistributable.
//!
//! Conventions: every Gaussian's second parameter is a standard deviation, and
//! sites store log-scales. All latents live on the real line; the seeds
//! precision gets a log reparameterization (Gamma density plus Jacobian).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{load_dataset, parse_dataset, ColumnType, Dataset};
use super::{LatentSite, LikelihoodTerm, ModelGraph, SiteFn, SitePrior};
use crate::adcore::ops;
use crate::error::{Error, Result};
use crate::linalg::{ln_choose, ln_gamma};

const EIGHT_SCHOOLS_CSV: &str = include_str!("../../data/eight_schools.csv");
const SEEDS_CSV: &str = include_str!("../../data/seeds.csv");

/// Sizes and draw rules of the synthetic-data templates.
pub mod template {
    /// German credit: feature count (configurable in the builder) and rows.
    pub const CREDIT_FEATURES: usize = 8;
    pub const CREDIT_ROWS: usize = 80;
    pub const RADON_COUNTIES: usize = 5;
    pub const RADON_HOMES: usize = 40;
    pub const MOVIELENS_USERS: usize = 3;
    pub const MOVIELENS_ATTRS: usize = 18;
    pub const MOVIELENS_ROWS: usize = 40;
    pub const IRT_STUDENTS: usize = 8;
    pub const IRT_QUESTIONS: usize = 5;
    pub const IRT_RESPONSES: usize = 40;
    pub const SONAR_COEFFS: usize = 61;
    pub const SONAR_ROWS: usize = 40;
    pub const IONOSPHERE_COEFFS: usize = 35;
    pub const IONOSPHERE_ROWS: usize = 40;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkName {
    EightSchools,
    Credit,
    Funnel,
    Radon,
    Movielens,
    Irt,
    Seeds,
    Sonar,
    Ionosphere,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 9] = [
        BenchmarkName::EightSchools,
        BenchmarkName::Credit,
        BenchmarkName::Funnel,
        BenchmarkName::Radon,
        BenchmarkName::Movielens,
        BenchmarkName::Irt,
        BenchmarkName::Seeds,
        BenchmarkName::Sonar,
        BenchmarkName::Ionosphere,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchmarkName::EightSchools => "8schools",
            BenchmarkName::Credit => "credit",
            BenchmarkName::Funnel => "funnel",
            BenchmarkName::Radon => "radon",
            BenchmarkName::Movielens => "movielens",
            BenchmarkName::Irt => "irt",
            BenchmarkName::Seeds => "seeds",
            BenchmarkName::Sonar => "sonar",
            BenchmarkName::Ionosphere => "ionosphere",
        }
    }
}

impl std::str::FromStr for BenchmarkName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BenchmarkName::ALL
            .iter()
            .find(|n| n.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown model '{s}'")))
    }
}

/// Where a model's data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Bundled file (eight-schools, seeds) or the model's synthetic template
    /// with seed 0; the funnel needs no data. `FLOWVI_DATA_DIR` overrides the
    /// bundled copies when it contains a matching file.
    Default,
    Path(PathBuf),
    Synth { seed: u64 },
}

fn bundled_or_env(file: &str, embedded: &str, schema: &[(&str, ColumnType)]) -> Result<Dataset> {
    if let Ok(dir) = std::env::var("FLOWVI_DATA_DIR") {
        let p = Path::new(&dir).join(file);
        if p.exists() {
            return load_dataset(&p, schema);
        }
    }
    let name = file.trim_end_matches(".csv");
    parse_dataset(name, embedded, schema)
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mix_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the caller seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Generate a dataset by ancestral sampling from the model's generative
/// process. Top-level log-scale hyperdraws use unit scale instead of the
/// prior's (a draw from the N(0,10) hyperprior routinely yields degenerate
/// data); everything downstream follows the model exactly. Deterministic per
/// seed.
pub fn synth_data(name: BenchmarkName, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, name.as_str()));
    match name {
        BenchmarkName::Funnel => Ok(Dataset::empty("funnel")),
        BenchmarkName::EightSchools => {
            bundled_or_env("eight_schools.csv", EIGHT_SCHOOLS_CSV, &EIGHT_SCHOOLS_SCHEMA)
        }
        BenchmarkName::Seeds => bundled_or_env("seeds.csv", SEEDS_CSV, &SEEDS_SCHEMA),
        BenchmarkName::Credit => {
            let (k, n) = (template::CREDIT_FEATURES, template::CREDIT_ROWS);
            let logtau0: f64 = normal(&mut rng);
            let logtau: Vec<f64> = (0..k).map(|_| logtau0 + normal(&mut rng)).collect();
            let beta: Vec<f64> =
                logtau.iter().map(|lt| normal(&mut rng) * lt.exp()).collect();
            let mut cols: Vec<(String, Vec<f64>)> =
                (0..k).map(|j| (format!("x{j}"), Vec::with_capacity(n))).collect();
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let mut eta = 0.0;
                for j in 0..k {
                    let x = normal(&mut rng);
                    cols[j].1.push(x);
                    eta += beta[j] * x;
                }
                y.push(bernoulli(&mut rng, sigmoid(eta)));
            }
            cols.push(("y".into(), y));
            Dataset::new("credit-synth", cols)
        }
        BenchmarkName::Radon => {
            let (c, n) = (template::RADON_COUNTIES, template::RADON_HOMES);
            let uranium: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
            let (mu0, a, b) = (normal(&mut rng), normal(&mut rng), normal(&mut rng));
            let log_sigma_m: Vec<f64> = (0..c).map(|_| 0.5 * normal(&mut rng)).collect();
            let log_sigma_y = 0.5 * normal(&mut rng);
            let m: Vec<f64> = (0..c)
                .map(|kc| mu0 + a * uranium[kc] + normal(&mut rng) * log_sigma_m[kc].exp())
                .collect();
            let mut county = Vec::with_capacity(n);
            let mut floor = Vec::with_capacity(n);
            let mut u_col = Vec::with_capacity(n);
            let mut log_radon = Vec::with_capacity(n);
            for j in 0..n {
                let kc = j % c; // every county occupied
                county.push(kc as f64);
                let x = bernoulli(&mut rng, 0.5);
                floor.push(x);
                u_col.push(uranium[kc]);
                log_radon.push(m[kc] + b * x + normal(&mut rng) * log_sigma_y.exp());
            }
            Dataset::new(
                "radon-synth",
                vec![
                    ("county".into(), county),
                    ("floor".into(), floor),
                    ("u".into(), u_col),
                    ("log_radon".into(), log_radon),
                ],
            )
        }
        BenchmarkName::Movielens => {
            let (m_users, attrs, n) =
                (template::MOVIELENS_USERS, template::MOVIELENS_ATTRS, template::MOVIELENS_ROWS);
            let mu: Vec<f64> = (0..attrs).map(|_| normal(&mut rng)).collect();
            let lam: Vec<f64> = (0..attrs).map(|_| 0.5 * normal(&mut rng)).collect();
            let z: Vec<Vec<f64>> = (0..m_users)
                .map(|_| {
                    (0..attrs).map(|j| mu[j] + normal(&mut rng) * lam[j].exp()).collect()
                })
                .collect();
            let mut user = Vec::with_capacity(n);
            let mut xcols: Vec<(String, Vec<f64>)> =
                (0..attrs).map(|j| (format!("x{j}"), Vec::with_capacity(n))).collect();
            let mut y = Vec::with_capacity(n);
            for r in 0..n {
                let u = r % m_users;
                user.push(u as f64);
                let mut eta = 0.0;
                for j in 0..attrs {
                    let x = bernoulli(&mut rng, 0.3);
                    xcols[j].1.push(x);
                    eta += x * z[u][j];
                }
                y.push(bernoulli(&mut rng, sigmoid(eta)));
            }
            let mut cols = vec![("user".into(), user)];
            cols.append(&mut xcols);
            cols.push(("y".into(), y));
            Dataset::new("movielens-synth", cols)
        }
        BenchmarkName::Irt => {
            let (ns, nq, nr) =
                (template::IRT_STUDENTS, template::IRT_QUESTIONS, template::IRT_RESPONSES);
            let alpha: Vec<f64> = (0..ns).map(|_| normal(&mut rng)).collect();
            let mu_b = normal(&mut rng);
            let log_sigma_b = 0.5 * normal(&mut rng);
            let log_sigma_g = 0.5 * normal(&mut rng);
            let beta: Vec<f64> =
                (0..nq).map(|_| mu_b + normal(&mut rng) * log_sigma_b.exp()).collect();
            let log_gamma: Vec<f64> =
                (0..nq).map(|_| normal(&mut rng) * log_sigma_g.exp()).collect();
            let mut student = Vec::with_capacity(nr);
            let mut question = Vec::with_capacity(nr);
            let mut y = Vec::with_capacity(nr);
            for _ in 0..nr {
                let s = rng.random_range(0..ns);
                let q = rng.random_range(0..nq);
                student.push(s as f64);
                question.push(q as f64);
                let logit = log_gamma[q].exp() * alpha[s] + beta[q];
                y.push(bernoulli(&mut rng, sigmoid(logit)));
            }
            Dataset::new(
                "irt-synth",
                vec![("student".into(), student), ("question".into(), question), ("y".into(), y)],
            )
        }
        BenchmarkName::Sonar => synth_logistic(&mut rng, "sonar-synth", template::SONAR_COEFFS, template::SONAR_ROWS),
        BenchmarkName::Ionosphere => synth_logistic(
            &mut rng,
            "ionosphere-synth",
            template::IONOSPHERE_COEFFS,
            template::IONOSPHERE_ROWS,
        ),
    }
}

fn synth_logistic(rng: &mut ChaCha12Rng, name: &str, d: usize, n: usize) -> Result<Dataset> {
    // features scaled by 1/sqrt(d), like the normalized real datasets; raw
    // N(0,1) features with N(0,1) coefficients give logit std ~ sqrt(d) and
    // degenerate, near-separable labels
    let scale = 1.0 / (d as f64).sqrt();
    let coef: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let mut xcols: Vec<(String, Vec<f64>)> =
        (0..d).map(|j| (format!("x{j}"), Vec::with_capacity(n))).collect();
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut eta = 0.0;
        for j in 0..d {
            let x = scale * normal(rng);
            xcols[j].1.push(x);
            eta += coef[j] * x;
        }
        y.push(bernoulli(rng, sigmoid(eta)));
    }
    xcols.push(("y".into(), y));
    Dataset::new(name, xcols)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bernoulli(rng: &mut ChaCha12Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

const EIGHT_SCHOOLS_SCHEMA: [(&str, ColumnType); 2] =
    [("y", ColumnType::Real), ("sigma", ColumnType::Real)];
const SEEDS_SCHEMA: [(&str, ColumnType); 4] = [
    ("r", ColumnType::Int),
    ("n", ColumnType::Int),
    ("x1", ColumnType::Real),
    ("x2", ColumnType::Real),
];

/// Build a benchmark model and its dataset.
pub fn build_benchmark(name: BenchmarkName, source: &DataSource) -> Result<(ModelGraph, Dataset)> {
    let data = match (name, source) {
        (BenchmarkName::Funnel, _) => Dataset::empty("funnel"),
        (BenchmarkName::EightSchools, DataSource::Default) => {
            bundled_or_env("eight_schools.csv", EIGHT_SCHOOLS_CSV, &EIGHT_SCHOOLS_SCHEMA)?
        }
        (BenchmarkName::EightSchools, DataSource::Path(p)) => {
            load_dataset(p, &EIGHT_SCHOOLS_SCHEMA)?
        }
        (BenchmarkName::Seeds, DataSource::Default) => {
            bundled_or_env("seeds.csv", SEEDS_CSV, &SEEDS_SCHEMA)?
        }
        (BenchmarkName::Seeds, DataSource::Path(p)) => load_dataset(p, &SEEDS_SCHEMA)?,
        (_, DataSource::Synth { seed }) => synth_data(name, *seed)?,
        (_, DataSource::Default) => synth_data(name, 0)?,
        (_, DataSource::Path(p)) => {
            return Err(Error::Data(format!(
                "model '{}' has no fixed file schema; supply synthetic data instead of {}",
                name.as_str(),
                p.display()
            )))
        }
    };
    let graph = match name {
        BenchmarkName::Funnel => funnel(),
        BenchmarkName::EightSchools => eight_schools(&data)?,
        BenchmarkName::Credit => credit(&data)?,
        BenchmarkName::Radon => radon(&data)?,
        BenchmarkName::Movielens => movielens(&data)?,
        BenchmarkName::Irt => irt(&data)?,
        BenchmarkName::Seeds => seeds(&data)?,
        BenchmarkName::Sonar => logistic_model("sonar", template::SONAR_COEFFS, &data)?,
        BenchmarkName::Ionosphere => {
            logistic_model("ionosphere", template::IONOSPHERE_COEFFS, &data)?
        }
    };
    Ok((graph, data))
}

/// Neal's funnel in D = 10: `x1 ~ N(0,3)`, `xk ~ N(0, exp(x1/2))`. The joint
/// is self-normalized, so its log normalizer is exactly 0.
pub fn funnel() -> ModelGraph {
    let mut sites = vec![LatentSite::gaussian(
        "x1",
        vec![],
        SiteFn::constant(0.0),
        SiteFn::constant(3.0f64.ln()),
    )];
    for k in 2..=10 {
        sites.push(LatentSite::gaussian(
            &format!("x{k}"),
            vec![0],
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.5] },
        ));
    }
    let mut graph = ModelGraph::new("funnel", sites, vec![]).expect("funnel graph is valid");
    graph.log_normalizer_known = Some(0.0);
    graph
}

/// Eight-schools: `mu, log_tau ~ N(0,5)`, `theta_i ~ N(mu, exp(log_tau))`,
/// `y_i ~ N(theta_i, sigma_i)` with known `sigma_i`.
fn eight_schools(data: &Dataset) -> Result<ModelGraph> {
    let y = data.column("y")?.to_vec();
    let sigma = data.column("sigma")?.to_vec();
    let n = y.len();
    let mut sites = vec![
        LatentSite::gaussian("mu", vec![], SiteFn::constant(0.0), SiteFn::constant(5.0f64.ln())),
        LatentSite::gaussian("log_tau", vec![], SiteFn::constant(0.0), SiteFn::constant(5.0f64.ln())),
    ];
    for i in 0..n {
        sites.push(LatentSite::gaussian(
            &format!("theta{i}"),
            vec![0, 1],
            SiteFn::Affine { bias: 0.0, coeffs: vec![1.0, 0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0, 1.0] },
        ));
    }
    let mut likelihoods = Vec::with_capacity(n);
    for i in 0..n {
        let (yi, si) = (y[i], sigma[i]);
        likelihoods.push(LikelihoodTerm {
            parents: vec![2 + i],
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, parents: &[crate::adcore::NodeId]| {
                let obs = tape.constant(yi);
                let ls = tape.constant(si.ln());
                ops::gaussian_logpdf(tape, obs, parents[0], ls)
            }),
        });
    }
    ModelGraph::new("8schools", sites, likelihoods)
}

/// German-credit-style sparse logistic regression with hierarchical scales.
fn credit(data: &Dataset) -> Result<ModelGraph> {
    let k = data.column_names().iter().filter(|c| c.starts_with('x')).count();
    if k == 0 {
        return Err(Error::Data("credit data has no feature columns x0..".into()));
    }
    let y = data.column("y")?.to_vec();
    let x: Vec<Vec<f64>> = (0..k).map(|j| data.column(&format!("x{j}")).map(|c| c.to_vec())).collect::<Result<_>>()?;

    // sites: log_tau0 (0), log_tau_k (1..=k), beta_k (k+1..=2k)
    let mut sites = vec![LatentSite::gaussian(
        "log_tau0",
        vec![],
        SiteFn::constant(0.0),
        SiteFn::constant(10.0f64.ln()),
    )];
    for j in 0..k {
        sites.push(LatentSite::gaussian(
            &format!("log_tau{}", j + 1),
            vec![0],
            SiteFn::Affine { bias: 0.0, coeffs: vec![1.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
        ));
    }
    for j in 0..k {
        sites.push(LatentSite::gaussian(
            &format!("beta{j}"),
            vec![1 + j],
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![1.0] },
        ));
    }
    let beta_sites: Vec<usize> = (0..k).map(|j| k + 1 + j).collect();
    let mut likelihoods = Vec::with_capacity(y.len());
    for n in 0..y.len() {
        let coeffs: Vec<f64> = (0..k).map(|j| x[j][n]).collect();
        let yn = y[n];
        likelihoods.push(LikelihoodTerm {
            parents: beta_sites.clone(),
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, parents: &[crate::adcore::NodeId]| {
                let eta = ops::affine(tape, 0.0, &coeffs, parents)?;
                ops::bernoulli_logit_logpmf(tape, eta, yn)
            }),
        });
    }
    ModelGraph::new("credit", sites, likelihoods)
}

/// Hierarchical radon regression with county-level means.
fn radon(data: &Dataset) -> Result<ModelGraph> {
    let county = data.column_as_usize("county")?;
    let floor = data.column("floor")?.to_vec();
    let uranium = data.column("u")?.to_vec();
    let log_radon = data.column("log_radon")?.to_vec();
    let n_counties = county.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    // one uranium reading per county, taken from any of its homes
    let mut county_u = vec![f64::NAN; n_counties];
    for (j, &c) in county.iter().enumerate() {
        county_u[c] = uranium[j];
    }
    if county_u.iter().any(|u| u.is_nan()) {
        return Err(Error::Data("radon: some county has no homes".into()));
    }

    // sites: mu0 (0), a (1), b (2), log_sigma_m_k (3..3+C), log_sigma_y (3+C),
    //        m_k (4+C..4+2C)
    let mut sites = vec![
        LatentSite::gaussian("mu0", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
        LatentSite::gaussian("a", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
        LatentSite::gaussian("b", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)),
    ];
    for kc in 0..n_counties {
        sites.push(LatentSite::gaussian(
            &format!("log_sigma_m{kc}"),
            vec![],
            SiteFn::constant(0.0),
            SiteFn::constant(10.0f64.ln()),
        ));
    }
    sites.push(LatentSite::gaussian(
        "log_sigma_y",
        vec![],
        SiteFn::constant(0.0),
        SiteFn::constant(10.0f64.ln()),
    ));
    let m_base = 4 + n_counties;
    for kc in 0..n_counties {
        sites.push(LatentSite::gaussian(
            &format!("m{kc}"),
            vec![0, 1, 3 + kc],
            SiteFn::Affine { bias: 0.0, coeffs: vec![1.0, county_u[kc], 0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0, 0.0, 1.0] },
        ));
    }
    let log_sigma_y_site = 3 + n_counties;
    let mut likelihoods = Vec::with_capacity(log_radon.len());
    for j in 0..log_radon.len() {
        let (xj, rj) = (floor[j], log_radon[j]);
        likelihoods.push(LikelihoodTerm {
            parents: vec![2, log_sigma_y_site, m_base + county[j]],
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, p: &[crate::adcore::NodeId]| {
                // mean = m_county + b·floor, std = exp(log_sigma_y)
                let mean = ops::affine(tape, 0.0, &[xj, 1.0], &[p[0], p[2]])?;
                let obs = tape.constant(rj);
                ops::gaussian_logpdf(tape, obs, mean, p[1])
            }),
        });
    }
    ModelGraph::new("radon", sites, likelihoods)
}

/// Movielens-style hierarchical logistic regression over user preferences.
fn movielens(data: &Dataset) -> Result<ModelGraph> {
    let attrs = template::MOVIELENS_ATTRS;
    let user = data.column_as_usize("user")?;
    let y = data.column("y")?.to_vec();
    let x: Vec<Vec<f64>> = (0..attrs)
        .map(|j| data.column(&format!("x{j}")).map(|c| c.to_vec()))
        .collect::<Result<_>>()?;
    let n_users = user.iter().copied().max().map(|m| m + 1).unwrap_or(0);

    // sites: mu_j (0..A), lambda_j (A..2A), z_{m,j} (2A + m·A + j)
    let mut sites = Vec::new();
    for j in 0..attrs {
        sites.push(LatentSite::gaussian(
            &format!("mu{j}"),
            vec![],
            SiteFn::constant(0.0),
            SiteFn::constant(0.0),
        ));
    }
    for j in 0..attrs {
        sites.push(LatentSite::gaussian(
            &format!("lambda{j}"),
            vec![],
            SiteFn::constant(0.0),
            SiteFn::constant(0.0),
        ));
    }
    for m in 0..n_users {
        for j in 0..attrs {
            sites.push(LatentSite::gaussian(
                &format!("z{m}_{j}"),
                vec![j, attrs + j],
                SiteFn::Affine { bias: 0.0, coeffs: vec![1.0, 0.0] },
                SiteFn::Affine { bias: 0.0, coeffs: vec![0.0, 1.0] },
            ));
        }
    }
    let z_base = 2 * attrs;
    let mut likelihoods = Vec::with_capacity(y.len());
    for n in 0..y.len() {
        let coeffs: Vec<f64> = (0..attrs).map(|j| x[j][n]).collect();
        let parents: Vec<usize> = (0..attrs).map(|j| z_base + user[n] * attrs + j).collect();
        let yn = y[n];
        likelihoods.push(LikelihoodTerm {
            parents,
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, p: &[crate::adcore::NodeId]| {
                let eta = ops::affine(tape, 0.0, &coeffs, p)?;
                ops::bernoulli_logit_logpmf(tape, eta, yn)
            }),
        });
    }
    ModelGraph::new("movielens", sites, likelihoods)
}

/// Two-parameter-logistic item response model.
fn irt(data: &Dataset) -> Result<ModelGraph> {
    let student = data.column_as_usize("student")?;
    let question = data.column_as_usize("question")?;
    let y = data.column("y")?.to_vec();
    let ns = student.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let nq = question.iter().copied().max().map(|m| m + 1).unwrap_or(0);

    // sites: alpha_s (0..NS), mu_beta (NS), log_sigma_beta (NS+1),
    //        log_sigma_gamma (NS+2), beta_q (NS+3..), log_gamma_q (NS+3+NQ..)
    let mut sites = Vec::new();
    for s in 0..ns {
        sites.push(LatentSite::gaussian(
            &format!("alpha{s}"),
            vec![],
            SiteFn::constant(0.0),
            SiteFn::constant(0.0),
        ));
    }
    sites.push(LatentSite::gaussian("mu_beta", vec![], SiteFn::constant(0.0), SiteFn::constant(0.0)));
    sites.push(LatentSite::gaussian(
        "log_sigma_beta",
        vec![],
        SiteFn::constant(0.0),
        SiteFn::constant(0.0),
    ));
    sites.push(LatentSite::gaussian(
        "log_sigma_gamma",
        vec![],
        SiteFn::constant(0.0),
        SiteFn::constant(0.0),
    ));
    let beta_base = ns + 3;
    for q in 0..nq {
        sites.push(LatentSite::gaussian(
            &format!("beta{q}"),
            vec![ns, ns + 1],
            SiteFn::Affine { bias: 0.0, coeffs: vec![1.0, 0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0, 1.0] },
        ));
    }
    let gamma_base = beta_base + nq;
    for q in 0..nq {
        sites.push(LatentSite::gaussian(
            &format!("log_gamma{q}"),
            vec![ns + 2],
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![1.0] },
        ));
    }
    let mut likelihoods = Vec::with_capacity(y.len());
    for r in 0..y.len() {
        let yr = y[r];
        likelihoods.push(LikelihoodTerm {
            parents: vec![student[r], beta_base + question[r], gamma_base + question[r]],
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, p: &[crate::adcore::NodeId]| {
                // logit = exp(log_gamma_q)·alpha_s + beta_q
                let disc = tape.exp(p[2])?;
                let da = tape.mul(disc, p[0])?;
                let logit = tape.add(da, p[1])?;
                ops::bernoulli_logit_logpmf(tape, logit, yr)
            }),
        });
    }
    ModelGraph::new("irt", sites, likelihoods)
}

/// Seeds random-effects binomial regression. The Gamma(0.01, 0.01) precision
/// is reparameterized to `t = log tau`, contributing its Gamma log-density
/// plus the `log tau` Jacobian; random effects get `log std = -t/2`.
fn seeds(data: &Dataset) -> Result<ModelGraph> {
    let r = data.column("r")?.to_vec();
    let n = data.column("n")?.to_vec();
    let x1 = data.column("x1")?.to_vec();
    let x2 = data.column("x2")?.to_vec();
    let g = r.len();

    const SHAPE: f64 = 0.01;
    const RATE: f64 = 0.01;
    let log_norm = SHAPE * RATE.ln() - ln_gamma(SHAPE);
    let mut sites = vec![LatentSite {
        name: "log_tau".into(),
        parents: vec![],
        prior: SitePrior::NonGaussian {
            // log p(t) = a·log b - lnΓ(a) + a·t - b·e^t  (Gamma density ∘ exp, with Jacobian)
            logpdf: Arc::new(move |tape: &mut crate::adcore::Tape, t, _parents| {
                let c = tape.constant(log_norm);
                let a = tape.constant(SHAPE);
                let at = tape.mul(a, t)?;
                let et = tape.exp(t)?;
                let b = tape.constant(-RATE);
                let bet = tape.mul(b, et)?;
                let s1 = tape.add(c, at)?;
                tape.add(s1, bet)
            }),
        },
    }];
    for name in ["a0", "a1", "a2", "a12"] {
        sites.push(LatentSite::gaussian(
            name,
            vec![],
            SiteFn::constant(0.0),
            SiteFn::constant(10.0f64.ln()),
        ));
    }
    for i in 0..g {
        // b_i ~ N(0, tau^{-1/2}) so log std = -t/2
        sites.push(LatentSite::gaussian(
            &format!("b{i}"),
            vec![0],
            SiteFn::Affine { bias: 0.0, coeffs: vec![0.0] },
            SiteFn::Affine { bias: 0.0, coeffs: vec![-0.5] },
        ));
    }
    let mut likelihoods = Vec::with_capacity(g);
    for i in 0..g {
        let (ri, ni) = (r[i], n[i]);
        let coeffs = vec![1.0, x1[i], x2[i], x1[i] * x2[i], 1.0];
        let lnc = ln_choose(ni as u64, ri as u64);
        likelihoods.push(LikelihoodTerm {
            parents: vec![1, 2, 3, 4, 5 + i],
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, p: &[crate::adcore::NodeId]| {
                let eta = ops::affine(tape, 0.0, &coeffs, p)?;
                // log C(n,r) + r·logσ(η) + (n-r)·logσ(-η)
                let lp = ops::log_sigmoid(tape, eta)?;
                let neg = tape.neg(eta)?;
                let ln1p = ops::log_sigmoid(tape, neg)?;
                let cr = tape.constant(ri);
                let cnr = tape.constant(ni - ri);
                let t1 = tape.mul(cr, lp)?;
                let t2 = tape.mul(cnr, ln1p)?;
                let cc = tape.constant(lnc);
                let s = tape.add(t1, t2)?;
                tape.add(s, cc)
            }),
        });
    }
    ModelGraph::new("seeds", sites, likelihoods)
}

/// Flat Bayesian logistic regression (sonar, ionosphere): iid N(0, sigma_x)
/// coefficients, Bernoulli-sigmoid likelihood.
fn logistic_model(name: &str, d: usize, data: &Dataset) -> Result<ModelGraph> {
    const SIGMA_X: f64 = 1.0;
    let y = data.column("y")?.to_vec();
    let x: Vec<Vec<f64>> =
        (0..d).map(|j| data.column(&format!("x{j}")).map(|c| c.to_vec())).collect::<Result<_>>()?;
    let mut sites = Vec::with_capacity(d);
    for j in 0..d {
        sites.push(LatentSite::gaussian(
            &format!("w{j}"),
            vec![],
            SiteFn::constant(0.0),
            SiteFn::constant(SIGMA_X.ln()),
        ));
    }
    let parents: Vec<usize> = (0..d).collect();
    let mut likelihoods = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let coeffs: Vec<f64> = (0..d).map(|j| x[j][i]).collect();
        let yi = y[i];
        likelihoods.push(LikelihoodTerm {
            parents: parents.clone(),
            logp: Arc::new(move |tape: &mut crate::adcore::Tape, p: &[crate::adcore::NodeId]| {
                let eta = ops::affine(tape, 0.0, &coeffs, p)?;
                ops::bernoulli_logit_logpmf(tape, eta, yi)
            }),
        });
    }
    ModelGraph::new(name, sites, likelihoods)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn funnel_shape_and_log_joint_at_zero() {
        let (m, d) = build_benchmark(BenchmarkName::Funnel, &DataSource::Default).unwrap();
        assert_eq!(m.dim(), 10);
        assert!(m.likelihoods.is_empty());
        assert_eq!(m.log_normalizer_known, Some(0.0));
        assert_eq!(d.rows(), 0);
        // -log(3·√2π) - 9·(½ log 2π)
        let expected = -(3.0f64.ln()) - 10.0 * 0.5 * ops::LN_2PI;
        let got = m.log_joint(&vec![0.0; 10]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - (-10.288)).abs() < 1e-3);
    }

    #[test]
    fn eight_schools_shape() {
        let (m, d) = build_benchmark(BenchmarkName::EightSchools, &DataSource::Default).unwrap();
        assert_eq!(m.dim(), 10);
        assert_eq!(m.likelihoods.len(), 8);
        assert_eq!(d.rows(), 8);
        assert_eq!(d.column_names(), vec!["y", "sigma"]);
    }

    #[test]
    fn eight_schools_log_joint_matches_term_by_term_oracle() {
        let (m, d) = build_benchmark(BenchmarkName::EightSchools, &DataSource::Default).unwrap();
        let y = d.column("y").unwrap();
        let sigma = d.column("sigma").unwrap();
        // z = (mu=0, log_tau=0, theta=y)
        let mut z = vec![0.0, 0.0];
        z.extend_from_slice(y);
        let got = m.log_joint(&z).unwrap();

        let normal = |x: f64, mu: f64, sd: f64| {
            -0.5 * ops::LN_2PI - sd.ln() - 0.5 * ((x - mu) / sd).powi(2)
        };
        let mut want = normal(0.0, 0.0, 5.0) + normal(0.0, 0.0, 5.0);
        for i in 0..8 {
            want += normal(y[i], 0.0, 1.0); // theta_i ~ N(mu=0, exp(0)=1)
            want += normal(y[i], y[i], sigma[i]);
        }
        assert!(got.is_finite());
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn shuffled_eight_schools_is_rejected() {
        let (m, _) = build_benchmark(BenchmarkName::EightSchools, &DataSource::Default).unwrap();
        let mut sites = m.sites.clone();
        sites.swap(1, 2); // theta0 now precedes log_tau
        let err = ModelGraph::new("8schools-shuffled", sites, vec![]).unwrap_err();
        assert!(err.to_string().contains("edge"));
    }

    #[test]
    fn seeds_shape() {
        let (m, d) = build_benchmark(BenchmarkName::Seeds, &DataSource::Default).unwrap();
        assert_eq!(d.rows(), 21);
        assert_eq!(m.dim(), 26);
        assert_eq!(m.likelihoods.len(), 21);
        assert!(!m.all_sites_affine()); // the Gamma site
        assert!(m.log_joint(&vec![0.1; 26]).unwrap().is_finite());
    }

    #[test]
    fn synth_is_deterministic_and_shaped() {
        let a = synth_data(BenchmarkName::Movielens, 1).unwrap();
        let b = synth_data(BenchmarkName::Movielens, 1).unwrap();
        assert_eq!(a, b);
        let c = synth_data(BenchmarkName::Movielens, 2).unwrap();
        assert_ne!(a, c);

        let irt = synth_data(BenchmarkName::Irt, 1).unwrap();
        assert_eq!(irt.rows(), template::IRT_RESPONSES);

        let credit = synth_data(BenchmarkName::Credit, 2).unwrap();
        assert!(credit.column("y").unwrap().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn builders_have_no_hidden_state() {
        for name in BenchmarkName::ALL {
            let (a, da) = build_benchmark(name, &DataSource::Default).unwrap();
            let (b, db) = build_benchmark(name, &DataSource::Default).unwrap();
            assert!(a.same_structure(&b), "{name:?} builds differ");
            assert_eq!(da, db);
            // behavioral check at a probe point
            let z = vec![0.3; a.dim()];
            assert!((a.log_joint(&z).unwrap() - b.log_joint(&z).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn all_models_build_and_evaluate() {
        for name in BenchmarkName::ALL {
            let (m, _) = build_benchmark(name, &DataSource::Default).unwrap();
            assert!(m.dim() > 0);
            m.topological_order().unwrap();
            let z = vec![0.2; m.dim()];
            let lj = m.log_joint(&z).unwrap();
            assert!(lj.is_finite(), "{name:?} log joint not finite");
        }
    }

    #[test]
    fn unknown_model_name_errors() {
        assert!("nonesuch".parse::<BenchmarkName>().is_err());
    }
}

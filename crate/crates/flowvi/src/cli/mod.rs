//! Config-driven command layer: benchmark runs, the ablation table, the
//! conditioner-capacity sweep, equivalence certification, and sample emission.
//!
//! Every command is deterministic given (config, seed): result payloads are
//! byte-identical across reruns, with write timestamps kept outside the
//! payload. Exit codes are a stable contract: 0 success, 2 configuration or
//! schema error, 3 training failure, 4 certification failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elbo::{self, lr_sweep, Family, RunResult, SweepResult, TrainConfig};
use crate::equivalence::{self, EquivReport, Mutation};
use crate::error::{Error, Result};
use crate::flows::MifFlags;
use crate::modelzoo::{build_benchmark, BenchmarkName, DataSource, ModelGraph};

pub const CONFIG_SCHEMA: u32 = 1;

/// A run configuration file. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub model: String,
    pub family: String,
    #[serde(default)]
    pub hidden: usize,
    /// MIF ablation flags; only legal when family = "mif".
    #[serde(default)]
    pub mif: Option<MifFlags>,
    /// Training overrides; defaults are the per-model desk protocol.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth_seed: Option<u64>,
}

impl DataSection {
    pub fn source(&self) -> Result<DataSource> {
        match (&self.path, self.synth_seed) {
            (Some(_), Some(_)) => {
                Err(Error::Config("data: give either path or synth_seed, not both".into()))
            }
            (Some(p), None) => Ok(DataSource::Path(p.clone())),
            (None, Some(s)) => Ok(DataSource::Synth { seed: s }),
            (None, None) => Ok(DataSource::Default),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported config schema {} (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        let _: BenchmarkName = self.model.parse()?;
        if self.mif.is_some() && self.family != "mif" {
            return Err(Error::Config("mif flags are only legal when family = \"mif\"".into()));
        }
        if let Some(train) = &self.train {
            train.validate()?;
        }
        // reject unknown families early, before any compute
        Family::from_config(&self.family, 1, self.hidden, self.mif.unwrap_or_default())?;
        Ok(())
    }
}

/// The per-model desk training protocol: the hierarchical table models get
/// the full budget, the bigger synthetic models a reduced one (their
/// acceptance is property-based, not table-matching).
pub fn default_train(model: BenchmarkName) -> TrainConfig {
    let base = TrainConfig::default();
    match model {
        BenchmarkName::Funnel => base,
        BenchmarkName::EightSchools => TrainConfig { iterations: 40_000, ..base },
        BenchmarkName::Movielens => TrainConfig {
            iterations: 5_000,
            mc_samples: 16,
            learning_rates: vec![1e-2, 1e-3],
            ..base
        },
        BenchmarkName::Sonar | BenchmarkName::Ionosphere => TrainConfig {
            iterations: 12_000,
            mc_samples: 16,
            learning_rates: vec![1e-2, 1e-3, 3e-4],
            ..base
        },
        _ => TrainConfig {
            iterations: 6_000,
            mc_samples: 16,
            learning_rates: vec![1e-2, 1e-3, 3e-4],
            ..base
        },
    }
}

/// The reduced protocol used for conditioner-capacity sweeps (many runs, wide
/// nets).
pub fn capacity_train() -> TrainConfig {
    TrainConfig {
        iterations: 2_000,
        mc_samples: 8,
        learning_rates: vec![1e-3, 1e-4],
        eval_samples: 50_000,
        ..TrainConfig::default()
    }
}

/// 64-bit FNV-1a over the canonical JSON of a config; the stable fingerprint
/// carried by result records (timestamps are excluded by construction).
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

/// A result file: deterministic payload plus out-of-payload metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord<T> {
    pub schema: u32,
    pub artifact_version: String,
    pub fingerprint: String,
    pub payload: T,
    /// Write time (unix seconds); not part of the fingerprint.
    pub written_unix: u64,
}

impl<T: Serialize + for<'de> Deserialize<'de>> ResultRecord<T> {
    pub fn wrap(fingerprint: String, payload: T) -> ResultRecord<T> {
        ResultRecord {
            schema: CONFIG_SCHEMA,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint,
            payload,
            written_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ResultRecord<T>> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Payload of a `run` record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunPayload {
    pub config: RunConfig,
    pub train: TrainConfig,
    pub sweep: SweepResult,
    pub warnings: Vec<String>,
}

/// Append one summary row to the results ledger, serialized by a lock file.
pub fn append_ledger(dir: &Path, row: &RunResult, fingerprint: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ledger = dir.join("results_ledger.csv");
    let lock = dir.join("results_ledger.lock");
    let _guard = LedgerLock::acquire(&lock)?;
    let fresh = !ledger.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(&ledger)?;
    if fresh {
        writeln!(file, "model,family,flags,hidden,learning_rate,neg_elbo,se,seed,fingerprint")?;
    }
    let flags = row
        .mif_flags
        .map(|f| {
            format!(
                "t={}|prior={}|order={}|eps={}",
                f.use_translation as u8, f.use_prior_inputs as u8, f.respect_order as u8, f.eps_conditioning as u8
            )
        })
        .unwrap_or_default();
    writeln!(
        file,
        "{},{},{},{},{},{},{},{},{}",
        row.model,
        row.family,
        flags,
        row.hidden,
        row.learning_rate,
        row.neg_elbo,
        row.elbo_se,
        row.seed,
        fingerprint
    )?;
    Ok(())
}

/// Lock file with stale-lock takeover; released on drop.
struct LedgerLock {
    path: PathBuf,
}

impl LedgerLock {
    fn acquire(path: &Path) -> Result<LedgerLock> {
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(_) => return Ok(LedgerLock { path: path.to_path_buf() }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if std::time::Instant::now() > deadline {
                        // stale lock: take it over
                        let _ = fs::remove_file(path);
                    }
                    std::thread::sleep(std::time::Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for LedgerLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn build(config: &RunConfig) -> Result<(ModelGraph, Family, TrainConfig)> {
    let name: BenchmarkName = config.model.parse()?;
    let (model, _) = build_benchmark(name, &config.data.source()?)?;
    let family =
        Family::from_config(&config.family, model.dim(), config.hidden, config.mif.unwrap_or_default())?;
    let train = config.train.clone().unwrap_or_else(|| default_train(name));
    Ok((model, family, train))
}

/// Execute a run config: learning-rate sweep, result record, ledger row.
pub fn cmd_run(
    config: RunConfig,
    quick: bool,
    jobs: usize,
    out_override: Option<PathBuf>,
) -> Result<PathBuf> {
    let (model, family, mut train) = build(&config)?;
    if quick {
        train = train.quick();
    }
    let warnings = match &family {
        Family::Flow(spec) => spec.validate(Some(&model))?,
        _ => Vec::new(),
    };
    let sweep = lr_sweep(&model, &family, &train, jobs)?;
    let out = out_override
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("results/{}_{}.json", config.model, config.family)));

    let fp = fingerprint(&(&config, &train))?;
    println!(
        "{} {}: -ELBO {:.4} +- {:.4} (lr {}, seed {})",
        config.model,
        config.family,
        sweep.best.neg_elbo,
        sweep.best.elbo_se,
        sweep.best.learning_rate,
        sweep.best.seed
    );
    append_ledger(out.parent().unwrap_or(Path::new(".")), &sweep.best, &fp)?;
    let record =
        ResultRecord::wrap(fp, RunPayload { config, train, sweep, warnings });
    record.write(&out)?;
    Ok(out)
}

/// One ablation-table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub neg_elbo: f64,
    pub se: f64,
    pub learning_rate: f64,
    /// For the noise-conditioned variant: whether the better sub-variant fed
    /// prior inputs.
    pub eps_prior_used: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPayload {
    pub model: String,
    pub train: TrainConfig,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
}

/// The ablation variant set: the full flow, its single-component removals,
/// the noise-conditioned variant (both sub-variants, better one reported),
/// and the reference families.
pub fn ablation_variants(dim: usize) -> Vec<(String, Family)> {
    let mif = |flags: MifFlags| Family::Flow(crate::flows::FlowSpec::mif(dim, 0, flags));
    let full = MifFlags::default();
    vec![
        ("mif".into(), mif(full)),
        ("mif-eps-cond".into(), mif(MifFlags { eps_conditioning: true, ..full })),
        (
            "mif-eps-cond-no-prior".into(),
            mif(MifFlags { eps_conditioning: true, use_prior_inputs: false, ..full }),
        ),
        ("mif-no-translation".into(), mif(MifFlags { use_translation: false, ..full })),
        ("mif-no-prior".into(), mif(MifFlags { use_prior_inputs: false, ..full })),
        ("mif-no-order".into(), mif(MifFlags { respect_order: false, ..full })),
        ("iaf".into(), Family::Flow(crate::flows::FlowSpec::new(crate::flows::FlowFamily::Iaf, dim, 0))),
        ("fr-vip".into(), Family::FullRank { vip: true }),
    ]
}

/// Run the ablation table for one model. Per-variant failures land in their
/// row; the other variants are unaffected.
pub fn cmd_ablation(
    model_name: BenchmarkName,
    train_override: Option<TrainConfig>,
    quick: bool,
    jobs: usize,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let (model, _) = build_benchmark(model_name, &DataSource::Default)?;
    let mut train = train_override.unwrap_or_else(|| default_train(model_name));
    if let Some(seed) = seed_override {
        train.seed = seed;
    }
    if quick {
        train = train.quick();
    }

    let mut rows: Vec<AblationRow> = Vec::new();
    let mut all_runs = Vec::new();
    let mut eps_candidates: Vec<(bool, RunResult)> = Vec::new();
    for (variant, family) in ablation_variants(model.dim()) {
        match lr_sweep(&model, &family, &train, jobs) {
            Ok(sweep) => {
                all_runs.extend(sweep.runs.clone());
                if let Some(stripped) = variant.strip_prefix("mif-eps-cond") {
                    eps_candidates.push((stripped.is_empty(), sweep.best));
                    continue;
                }
                rows.push(AblationRow {
                    variant,
                    neg_elbo: sweep.best.neg_elbo,
                    se: sweep.best.elbo_se,
                    learning_rate: sweep.best.learning_rate,
                    eps_prior_used: None,
                    error: None,
                });
            }
            Err(e) => rows.push(AblationRow {
                variant,
                neg_elbo: f64::INFINITY,
                se: f64::INFINITY,
                learning_rate: f64::NAN,
                eps_prior_used: None,
                error: Some(e.to_string()),
            }),
        }
    }
    // the noise-conditioned row reports the better of its two sub-variants
    if let Some((with_prior, best)) = eps_candidates
        .into_iter()
        .min_by(|a, b| a.1.neg_elbo.partial_cmp(&b.1.neg_elbo).expect("comparable"))
        .map(|(p, r)| (p, r))
    {
        rows.insert(
            1,
            AblationRow {
                variant: "mif-eps-cond".into(),
                neg_elbo: best.neg_elbo,
                se: best.elbo_se,
                learning_rate: best.learning_rate,
                eps_prior_used: Some(with_prior),
                error: None,
            },
        );
    }

    for row in &rows {
        println!(
            "{} {:<22} -ELBO {:>10.4} +- {:.4}{}",
            model.name,
            row.variant,
            row.neg_elbo,
            row.se,
            row.error.as_deref().map(|e| format!("  [{e}]")).unwrap_or_default()
        );
    }
    let out = out.unwrap_or_else(|| PathBuf::from(format!("results/{}_ablation.json", model.name)));
    let payload = AblationPayload { model: model.name.clone(), train, rows, runs: all_runs };
    let fp = fingerprint(&(&payload.model, &payload.train))?;
    ResultRecord::wrap(fp, payload).write(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityRow {
    pub hidden: usize,
    pub variant: String,
    pub neg_elbo: f64,
    pub se: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityPayload {
    pub model: String,
    pub train: TrainConfig,
    pub rows: Vec<CapacityRow>,
}

/// Train the full flow and its noise-conditioned variant at each hidden
/// width; rows land in a table for the capacity-gap property.
pub fn cmd_capacity_sweep(
    model_name: BenchmarkName,
    widths: &[usize],
    train_override: Option<TrainConfig>,
    jobs: usize,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    if widths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("widths must be sorted ascending".into()));
    }
    let (model, _) = build_benchmark(model_name, &DataSource::Default)?;
    let mut train = train_override.unwrap_or_else(capacity_train);
    if let Some(seed) = seed_override {
        train.seed = seed;
    }
    let full = MifFlags::default();
    let mut rows = Vec::new();
    for &h in widths {
        for (variant, flags) in [
            ("mif", full),
            ("mif-eps-cond", MifFlags { eps_conditioning: true, ..full }),
        ] {
            let family = Family::Flow(crate::flows::FlowSpec::mif(model.dim(), h, flags));
            let sweep = lr_sweep(&model, &family, &train, jobs)?;
            println!(
                "{} h={h:<4} {variant:<14} -ELBO {:.4} +- {:.4}",
                model.name, sweep.best.neg_elbo, sweep.best.elbo_se
            );
            rows.push(CapacityRow {
                hidden: h,
                variant: variant.into(),
                neg_elbo: sweep.best.neg_elbo,
                se: sweep.best.elbo_se,
                learning_rate: sweep.best.learning_rate,
            });
        }
    }
    let out = out.unwrap_or_else(|| PathBuf::from(format!("results/{}_capacity.json", model.name)));
    let payload = CapacityPayload { model: model.name.clone(), train, rows };
    let fp = fingerprint(&(&payload.model, &payload.train))?;
    ResultRecord::wrap(fp, payload).write(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyPayload {
    pub reports: Vec<EquivReport>,
    pub all_passed: bool,
}

/// Certification tolerances; the defaults are the calibrated double-precision
/// bounds.
#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub trials: usize,
    pub value_tol: f64,
    pub affinity_tol: f64,
    pub kl_tol: f64,
    pub seed: u64,
    pub mutation: Mutation,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            trials: 1000,
            value_tol: 1e-8,
            affinity_tol: 1e-10,
            kl_tol: 1e-9,
            seed: 1234,
            mutation: Mutation::None,
        }
    }
}

/// Run all four equivalence checks on the funnel, eight-schools, and random
/// affine chains. Returns the payload; `all_passed` decides the exit code.
pub fn run_certification(opts: &CertifyOptions) -> Result<CertifyPayload> {
    let (funnel, _) = build_benchmark(BenchmarkName::Funnel, &DataSource::Default)?;
    let (schools, _) = build_benchmark(BenchmarkName::EightSchools, &DataSource::Default)?;
    let chains: Vec<_> = (0..3).map(|k| equivalence::random_affine_chain(6 + k, 97 + k as u64)).collect();

    let mut reports = Vec::new();
    reports.push(equivalence::check_full_rank_as_flow(opts.trials, 5, opts.value_tol.min(1e-10), opts.seed)?);
    for model in [&funnel, &schools] {
        reports.push(equivalence::check_composite_representation_mutated(
            model,
            opts.trials,
            opts.value_tol,
            opts.seed,
            opts.mutation,
        )?);
    }
    for chain in &chains {
        reports.push(equivalence::check_composite_representation(chain, opts.trials, opts.value_tol, opts.seed)?);
    }
    reports.push(equivalence::check_construction_affinity(&funnel, 500, opts.affinity_tol, opts.seed)?);
    reports.push(equivalence::check_construction_affinity(&schools, 500, opts.affinity_tol, opts.seed)?);
    for chain in &chains {
        reports.push(equivalence::check_construction_affinity(chain, 500, opts.affinity_tol, opts.seed)?);
    }
    for model in [&funnel, &schools] {
        reports.push(equivalence::check_kl_identity(model, opts.trials, opts.kl_tol, opts.seed)?);
    }
    let all_passed = reports.iter().all(|r| r.passed);
    Ok(CertifyPayload { reports, all_passed })
}

pub fn cmd_certify(opts: &CertifyOptions, out: Option<PathBuf>) -> Result<bool> {
    let payload = run_certification(opts)?;
    for r in &payload.reports {
        println!(
            "{:<45} {}  max err {:.3e} / {:.3e} (tol {:.0e})",
            r.check,
            if r.passed { "passed" } else { "FAILED" },
            r.max_abs_z_error,
            r.max_abs_logdet_error,
            r.tolerance
        );
    }
    let out = out.unwrap_or_else(|| PathBuf::from("results/certification.json"));
    let all_passed = payload.all_passed;
    let fp = fingerprint(&(opts.trials, opts.seed))?;
    ResultRecord::wrap(fp, payload).write(&out)?;
    Ok(all_passed)
}

/// Draw `n` samples from a trained family and write them as CSV columns
/// z1..zD. For the funnel (known normalizer 0) the sample KL estimate over a
/// dedicated 1e5-draw stream is printed and returned.
pub fn cmd_emit_samples(
    params_file: &Path,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<Option<f64>> {
    let record: ResultRecord<RunPayload> = ResultRecord::load(params_file)?;
    let payload = record.payload;
    let name: BenchmarkName = payload.config.model.parse()?;
    let (model, _) = build_benchmark(name, &payload.config.data.source()?)?;
    let family = Family::from_config(
        &payload.config.family,
        model.dim(),
        payload.config.hidden,
        payload.config.mif.unwrap_or_default(),
    )?;
    let params = &payload.sweep.best.params;

    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(elbo::mix_seed(seed, "emit", 0));
    let d = model.dim();
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut file = fs::File::create(out)?;
    let header: Vec<String> = (1..=d).map(|i| format!("z{i}")).collect();
    writeln!(file, "{}", header.join(","))?;
    let mut tape = crate::adcore::Tape::with_capacity(1 << 14);
    for _ in 0..n {
        let eps: Vec<f64> =
            (0..d).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        tape.clear();
        let ids = tape.param_vec(params);
        let (z, _, _) = family.sample_nodes(&mut tape, &model, &ids, &eps)?;
        let row: Vec<String> = z.iter().map(|&id| format!("{}", tape.value(id))).collect();
        writeln!(file, "{}", row.join(","))?;
    }

    // sample KL against the self-normalized target, on its own stream
    let kl = if model.log_normalizer_known == Some(0.0) {
        let (elbo_value, _se) = elbo::final_eval(&model, &family, params, 100_000, elbo::mix_seed(seed, "emit-kl", 1))?;
        let kl = -elbo_value;
        println!("kl_estimate={kl:.4}");
        Some(kl)
    } else {
        None
    };
    Ok(kl)
}

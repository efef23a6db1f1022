//! Hyperparameter search campaigns, best-config re-evaluation, robustness
//! summaries and on-disk result files.
//!
//! A campaign directory holds:
//!
//! * `manifest.toml`: the resolved campaign
//! * `metadata.json`: sampler description and calibrated penalty weights
//! * `results.csv`: one row per (run, evaluation environment)
//! * `runs.csv`: one row per run (status, Tiger optimality, audit)
//! * `runs/<run_id>/{trainlog.csv, net.json, audit.json}`
//! * `robustness.csv` (and `robustness_optimal.csv` for Tiger)
//! * `best/`: the same layout for the multi-seed re-evaluation

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexity::{audit_convexity, ConvexityMethod, MethodKind, DEFAULT_N_C, DEFAULT_N_PSD};
use crate::env::fvrs::{FvrsConfig, ObservationFunction};
use crate::env::tiger::{oracle_policy, PolicyTable, TigerConfig};
use crate::env::{EnvConfig, EnvError, EnvKind, SimRng};
use crate::evaluation::{
    cross_evaluate, fvrs_standard_shifts, is_optimal_tiger, summarize_distribution, tiger_shifts, EvalError,
    EvalSummary, TIGER_SHIFT_P_OBS,
};
use crate::training::{calibrate_weight, pilot_epochs, train, Hyper, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid campaign: {0}")]
    InvalidCampaign(String),
    #[error("manifest: {0}")]
    Manifest(#[from] toml::de::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no results to choose from")]
    NoResults,
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---- search space ---------------------------------------------------------

/// Sampling distributions for the searchable hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Natural-log bounds of the log-uniform learning rate.
    pub ln_lr: (f64, f64),
    pub buffer_size: (usize, usize),
    pub epochs_per_rollout: (usize, usize),
    pub lrs_factor: (f64, f64),
    pub lrs_patience: (usize, usize),
    pub eps_steps: (usize, usize),
    pub final_eps: (f64, f64),
}

impl SearchSpace {
    pub fn tiger() -> Self {
        SearchSpace {
            ln_lr: (-4.0, -1.0),
            buffer_size: (1, 100_000),
            epochs_per_rollout: (1, 25),
            lrs_factor: (0.8, 1.0),
            lrs_patience: (1, 10_000),
            eps_steps: (1, 10_000),
            final_eps: (0.001, 0.5),
        }
    }

    pub fn fvrs() -> Self {
        SearchSpace {
            ln_lr: (-7.0, -3.0),
            buffer_size: (1, 1_000_000),
            epochs_per_rollout: (1, 25),
            lrs_factor: (0.8, 1.0),
            lrs_patience: (1, 50_000),
            eps_steps: (1, 100_000),
            final_eps: (0.001, 0.5),
        }
    }

    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Tiger => Self::tiger(),
            EnvKind::Fvrs => Self::fvrs(),
        }
    }

    pub fn sample(&self, rng: &mut SimRng) -> Hyper {
        Hyper {
            lr: rng.gen_range(self.ln_lr.0..=self.ln_lr.1).exp(),
            buffer_size: rng.gen_range(self.buffer_size.0..=self.buffer_size.1),
            epochs_per_rollout: rng.gen_range(self.epochs_per_rollout.0..=self.epochs_per_rollout.1),
            lrs_factor: rng.gen_range(self.lrs_factor.0..=self.lrs_factor.1),
            lrs_patience: rng.gen_range(self.lrs_patience.0..=self.lrs_patience.1),
            eps_steps: rng.gen_range(self.eps_steps.0..=self.eps_steps.1),
            final_eps: rng.gen_range(self.final_eps.0..=self.final_eps.1),
        }
    }

    pub fn contains(&self, h: &Hyper) -> bool {
        let ln = h.lr.ln();
        let within = |x: usize, (lo, hi): (usize, usize)| (lo..=hi).contains(&x);
        ln >= self.ln_lr.0 - 1e-12
            && ln <= self.ln_lr.1 + 1e-12
            && within(h.buffer_size, self.buffer_size)
            && within(h.epochs_per_rollout, self.epochs_per_rollout)
            && (self.lrs_factor.0..=self.lrs_factor.1).contains(&h.lrs_factor)
            && within(h.lrs_patience, self.lrs_patience)
            && within(h.eps_steps, self.eps_steps)
            && (self.final_eps.0..=self.final_eps.1).contains(&h.final_eps)
    }
}

// ---- campaign -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Seeded independent random search over the search space.
    #[default]
    Random,
    /// Every run uses the tuned default hyperparameters.
    Defaults,
}

fn default_n_mc() -> usize {
    10_000
}

fn default_best_seeds() -> usize {
    10
}

fn default_audit_grid() -> usize {
    51
}

fn default_jobs() -> usize {
    1
}

/// A fully specified experiment, usually read from a TOML manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Campaign {
    pub name: String,
    pub env: EnvKind,
    /// Tiger training accuracy (default 1.0).
    #[serde(default)]
    pub p_obs: Option<f64>,
    /// FVRS training observation function label (default `def`).
    #[serde(default)]
    pub obs_fn: Option<String>,
    pub methods: Vec<MethodKind>,
    pub runs_per_method: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Evaluation settings: Tiger accuracies or FVRS labels. The training
    /// setting is always evaluated first.
    #[serde(default)]
    pub shifts: Option<Vec<String>>,
    /// Fixed penalty weight; calibrated per method when absent.
    #[serde(default)]
    pub penalty_weight: Option<f64>,
    #[serde(default)]
    pub pilot_epochs: Option<usize>,
    #[serde(default)]
    pub n_c: Option<usize>,
    #[serde(default)]
    pub n_psd: Option<usize>,
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub max_frames: Option<usize>,
    #[serde(default = "default_best_seeds")]
    pub best_seeds: usize,
    #[serde(default = "default_audit_grid")]
    pub audit_grid: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl Campaign {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Campaign = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("campaign serializes")
    }

    /// Minimal campaign with defaults for `env`.
    pub fn new(name: &str, env: EnvKind, methods: Vec<MethodKind>, runs_per_method: usize, seed: u64) -> Self {
        Campaign {
            name: name.to_string(),
            env,
            p_obs: None,
            obs_fn: None,
            methods,
            runs_per_method,
            seed,
            sampler: Sampler::Random,
            n_mc: default_n_mc(),
            shifts: None,
            penalty_weight: None,
            pilot_epochs: None,
            n_c: None,
            n_psd: None,
            max_epochs: None,
            max_frames: None,
            best_seeds: default_best_seeds(),
            audit_grid: default_audit_grid(),
            jobs: default_jobs(),
        }
    }

    pub fn train_env(&self) -> Result<EnvConfig, HarnessError> {
        let env = match self.env {
            EnvKind::Tiger => EnvConfig::Tiger(TigerConfig::with_p_obs(self.p_obs.unwrap_or(1.0))),
            EnvKind::Fvrs => {
                let obs_fn = match &self.obs_fn {
                    Some(label) => ObservationFunction::parse(label)?,
                    None => ObservationFunction::default_fn(),
                };
                EnvConfig::Fvrs(FvrsConfig::with_obs(obs_fn))
            }
        };
        env.validate()?;
        Ok(env)
    }

    /// Training environment followed by every distinct shifted setting.
    pub fn eval_envs(&self) -> Result<Vec<EnvConfig>, HarnessError> {
        let train_env = self.train_env()?;
        let shifted: Vec<EnvConfig> = match (&train_env, &self.shifts) {
            (EnvConfig::Tiger(base), None) => tiger_shifts(base, &TIGER_SHIFT_P_OBS),
            (EnvConfig::Fvrs(base), None) => fvrs_standard_shifts(base),
            (EnvConfig::Tiger(base), Some(list)) => {
                let ps = list
                    .iter()
                    .map(|s| {
                        s.trim_start_matches('p')
                            .parse::<f64>()
                            .map_err(|_| HarnessError::InvalidCampaign(format!("bad Tiger shift {s:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                tiger_shifts(base, &ps)
            }
            (EnvConfig::Fvrs(base), Some(list)) => list
                .iter()
                .map(|s| Ok(EnvConfig::Fvrs(FvrsConfig { obs_fn: ObservationFunction::parse(s)?, ..*base })))
                .collect::<Result<Vec<_>, HarnessError>>()?,
        };
        let mut envs = vec![train_env];
        for e in shifted {
            e.validate()?;
            if !envs.iter().any(|x| x.obs_label() == e.obs_label()) {
                envs.push(e);
            }
        }
        Ok(envs)
    }

    pub fn space(&self) -> SearchSpace {
        SearchSpace::for_env(self.env)
    }

    /// Training config for `method` with the given hyperparameters.
    pub fn train_config(&self, method: ConvexityMethod, hyper: Option<Hyper>) -> Result<TrainConfig, HarnessError> {
        let mut cfg = TrainConfig::for_env(self.train_env()?).with_method(method);
        if let Some(h) = hyper {
            cfg.hyper = h;
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(f) = self.max_frames {
            cfg.max_frames = f;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidCampaign(m));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.runs_per_method == 0 {
            return bad("runs_per_method must be >= 1".into());
        }
        if self.n_mc == 0 || self.best_seeds == 0 || self.jobs == 0 {
            return bad("n_mc, best_seeds and jobs must be >= 1".into());
        }
        if let Some(w) = self.penalty_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("penalty_weight {w} must be finite and >= 0"));
            }
        }
        match self.env {
            EnvKind::Tiger if self.obs_fn.is_some() => return bad("obs_fn applies to fvrs only".into()),
            EnvKind::Fvrs if self.p_obs.is_some() => return bad("p_obs applies to tiger only".into()),
            _ => {}
        }
        self.eval_envs()?;
        for &m in &self.methods {
            let method = ConvexityMethod {
                kind: m,
                weight: self.penalty_weight.unwrap_or(1.0),
                n_c: self.n_c.unwrap_or(DEFAULT_N_C),
                n_psd: self.n_psd.unwrap_or(DEFAULT_N_PSD),
            };
            self.train_config(method, None)?.validate()?;
        }
        Ok(())
    }
}

// ---- seeds ----------------------------------------------------------------

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_SEARCH: u64 = 1;
const TAG_BEST: u64 = 2;
const TAG_SAMPLER: u64 = 3;
const TAG_EVAL: u64 = 4;
const TAG_PILOT: u64 = 5;

/// Deterministic child seed for `(tag, a, b)`.
pub fn derive_seed(campaign_seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(campaign_seed ^ splitmix(tag)) ^ a) ^ b)
}

// ---- result rows ----------------------------------------------------------

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: MethodKind,
    pub train_env: String,
    pub eval_env: String,
    pub seed: u64,
    pub n_mc: usize,
    pub mean: f64,
    pub std: f64,
    pub se: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub wlow: f64,
    pub whigh: f64,
    pub max: f64,
    /// JSON of the training config that produced the row.
    pub config: String,
}

impl ResultRow {
    fn new(run: &RunMeta, eval_env: &EnvConfig, n_mc: usize, s: &EvalSummary) -> Self {
        ResultRow {
            run_id: run.run_id.clone(),
            method: run.method,
            train_env: run.train_env.clone(),
            eval_env: eval_env.obs_label(),
            seed: run.seed,
            n_mc,
            mean: s.mean,
            std: s.std,
            se: s.se,
            median: s.median,
            q1: s.q1,
            q3: s.q3,
            wlow: s.whisker_low,
            whigh: s.whisker_high,
            max: s.max,
            config: run.config.clone(),
        }
    }
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub method: MethodKind,
    pub train_env: String,
    pub seed: u64,
    /// `ok` or the error message of a failed run.
    pub status: String,
    pub epochs: usize,
    pub final_td_loss: f64,
    pub audit_max_violation: f64,
    /// Tiger only: greedy actions match the oracle on reachable beliefs.
    pub optimal: Option<bool>,
    pub agreement_reachable: Option<f64>,
    pub agreement_grid: Option<f64>,
    pub config: String,
}

impl RunMeta {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Rows and run metadata of a search or best-config campaign.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchResults {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunMeta>,
}

fn write_csv<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for item in items {
        w.serialize(item)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::Reader::from_reader(file).deserialize().collect::<Result<Vec<T>, _>>()?)
}

impl SearchResults {
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_csv(&dir.join("results.csv"), &self.rows)?;
        write_csv(&dir.join("runs.csv"), &self.runs)
    }

    pub fn read(dir: &Path) -> Result<Self, HarnessError> {
        Ok(SearchResults { rows: read_csv(&dir.join("results.csv"))?, runs: read_csv(&dir.join("runs.csv"))? })
    }

    pub fn rows_for(&self, run_id: &str) -> impl Iterator<Item = &ResultRow> {
        let id = run_id.to_string();
        self.rows.iter().filter(move |r| r.run_id == id)
    }
}

// ---- running --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub method: MethodKind,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Campaign-wide values shared by all runs.
struct Context {
    eval_envs: Vec<EnvConfig>,
    eval_seed: u64,
    n_mc: usize,
    audit_grid: usize,
    oracle: Option<PolicyTable>,
}

impl Context {
    fn new(campaign: &Campaign) -> Result<Self, HarnessError> {
        let train_env = campaign.train_env()?;
        let oracle = match train_env {
            EnvConfig::Tiger(t) => Some(oracle_policy(&t, 1001, None)?),
            EnvConfig::Fvrs(_) => None,
        };
        Ok(Context {
            eval_envs: campaign.eval_envs()?,
            eval_seed: evaluation_seed(campaign),
            n_mc: campaign.n_mc,
            audit_grid: campaign.audit_grid,
            oracle,
        })
    }
}

/// Monte Carlo seed shared by every evaluation in a campaign.
pub fn evaluation_seed(campaign: &Campaign) -> u64 {
    derive_seed(campaign.seed, TAG_EVAL, 0, 0)
}

/// Penalty weight per method: the campaign's fixed value, or the
/// calibration pilot's result.
pub fn resolve_weights(campaign: &Campaign) -> Result<BTreeMap<MethodKind, f64>, HarnessError> {
    let mut out = BTreeMap::new();
    for &m in &campaign.methods {
        let w = if !m.is_soft() {
            0.0
        } else if let Some(w) = campaign.penalty_weight {
            w
        } else {
            let cfg = campaign.train_config(method_for(campaign, m, 1.0), None)?;
            let epochs = campaign.pilot_epochs.unwrap_or_else(|| pilot_epochs(&cfg.env));
            calibrate_weight(&cfg, m, epochs, derive_seed(campaign.seed, TAG_PILOT, 0, 0))?
        };
        out.insert(m, w);
    }
    Ok(out)
}

fn method_for(campaign: &Campaign, kind: MethodKind, weight: f64) -> ConvexityMethod {
    ConvexityMethod {
        kind,
        weight,
        n_c: campaign.n_c.unwrap_or(DEFAULT_N_C),
        n_psd: campaign.n_psd.unwrap_or(DEFAULT_N_PSD),
    }
}

/// Search runs in campaign order: methods as listed, then run index. Run
/// `i` of every method trains under the same seed, so methods can be
/// compared pairwise.
pub fn plan_search(campaign: &Campaign, weights: &BTreeMap<MethodKind, f64>) -> Result<Vec<RunSpec>, HarnessError> {
    let space = campaign.space();
    let mut specs = Vec::new();
    for (mi, &m) in campaign.methods.iter().enumerate() {
        let mut sampler = SimRng::seed_from_u64(derive_seed(campaign.seed, TAG_SAMPLER, mi as u64, 0));
        let method = method_for(campaign, m, weights.get(&m).copied().unwrap_or(0.0));
        for i in 0..campaign.runs_per_method {
            let hyper = match campaign.sampler {
                Sampler::Random => Some(space.sample(&mut sampler)),
                Sampler::Defaults => None,
            };
            specs.push(RunSpec {
                run_id: format!("{}-{:04}", m.name(), i),
                method: m,
                seed: derive_seed(campaign.seed, TAG_SEARCH, i as u64, 0),
                config: campaign.train_config(method, hyper)?,
            });
        }
    }
    Ok(specs)
}

fn execute(spec: &RunSpec, ctx: &Context, run_dir: Option<&Path>) -> (RunMeta, Vec<ResultRow>) {
    let config_json = serde_json::to_string(&spec.config).expect("config serializes");
    let mut meta = RunMeta {
        run_id: spec.run_id.clone(),
        method: spec.method,
        train_env: spec.config.env.obs_label(),
        seed: spec.seed,
        status: "ok".into(),
        epochs: 0,
        final_td_loss: f64::NAN,
        audit_max_violation: f64::NAN,
        optimal: None,
        agreement_reachable: None,
        agreement_grid: None,
        config: config_json,
    };
    let result = (|| -> Result<Vec<ResultRow>, HarnessError> {
        let (net, log) = train(&spec.config, spec.seed)?;
        meta.epochs = log.rows.len();
        meta.final_td_loss = log.rows.last().map_or(f64::NAN, |r| r.td_loss);
        let audit = audit_convexity(&net, &spec.config.env, ctx.audit_grid);
        meta.audit_max_violation = audit.max_violation;
        if let Some(table) = &ctx.oracle {
            let o = is_optimal_tiger(&net, table);
            meta.optimal = Some(o.optimal);
            meta.agreement_reachable = Some(o.agreement_reachable);
            meta.agreement_grid = Some(o.agreement_grid);
        }
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            log.save(&dir.join("trainlog.csv"))?;
            let net_path = dir.join("net.json");
            net.save(&net_path).map_err(|e| HarnessError::InvalidCampaign(format!("{}: {e}", net_path.display())))?;
            let audit_path = dir.join("audit.json");
            fs::write(&audit_path, serde_json::to_string_pretty(&audit)?).map_err(io_err(&audit_path))?;
        }
        let summaries = cross_evaluate(&net, &ctx.eval_envs, ctx.n_mc, ctx.eval_seed)?;
        Ok(ctx.eval_envs.iter().zip(&summaries).map(|(e, s)| ResultRow::new(&meta, e, ctx.n_mc, s)).collect())
    })();
    match result {
        Ok(rows) => (meta, rows),
        Err(e) => {
            meta.status = e.to_string();
            (meta, Vec::new())
        }
    }
}

fn run_all(specs: &[RunSpec], ctx: &Context, dir: Option<&Path>, jobs: usize) -> Result<SearchResults, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let outcomes: Vec<(RunMeta, Vec<ResultRow>)> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| execute(spec, ctx, dir.map(|d| d.join("runs").join(&spec.run_id)).as_deref()))
            .collect()
    });
    // par_iter().collect() keeps spec order, so output is schedule independent.
    let mut results = SearchResults::default();
    for (meta, rows) in outcomes {
        results.runs.push(meta);
        results.rows.extend(rows);
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMetadata {
    pub name: String,
    pub sampler: String,
    pub penalty_weights: BTreeMap<String, f64>,
    pub eval_envs: Vec<String>,
    pub eval_seed: u64,
}

fn write_campaign_files(
    campaign: &Campaign,
    ctx: &Context,
    weights: &BTreeMap<MethodKind, f64>,
    dir: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join("manifest.toml");
    fs::write(&manifest, campaign.to_toml()).map_err(io_err(&manifest))?;
    let meta = CampaignMetadata {
        name: campaign.name.clone(),
        sampler: match campaign.sampler {
            Sampler::Random => "seeded independent random search".into(),
            Sampler::Defaults => "tuned defaults, seeds only".into(),
        },
        penalty_weights: weights.iter().map(|(k, v)| (k.name().to_string(), *v)).collect(),
        eval_envs: ctx.eval_envs.iter().map(|e| e.obs_label()).collect(),
        eval_seed: ctx.eval_seed,
    };
    let path = dir.join("metadata.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(io_err(&path))?;
    Ok(())
}

/// Runs a full search. With `out`, writes the campaign directory.
pub fn run_search(campaign: &Campaign, out: Option<&Path>) -> Result<SearchResults, HarnessError> {
    campaign.validate()?;
    let ctx = Context::new(campaign)?;
    let weights = resolve_weights(campaign)?;
    let specs = plan_search(campaign, &weights)?;
    if let Some(dir) = out {
        write_campaign_files(campaign, &ctx, &weights, dir)?;
    }
    let results = run_all(&specs, &ctx, out, campaign.jobs)?;
    if let Some(dir) = out {
        results.write(dir)?;
        write_reports(&results, dir)?;
    }
    Ok(results)
}

/// Run with the highest mean return on its training environment; ties go
/// to the earlier run.
pub fn best_config(results: &SearchResults, method: MethodKind) -> Result<&RunMeta, HarnessError> {
    let mut best: Option<(&RunMeta, f64)> = None;
    for run in results.runs.iter().filter(|r| r.method == method && r.ok()) {
        let Some(row) = results.rows_for(&run.run_id).find(|r| r.eval_env == run.train_env) else { continue };
        if best.is_none_or(|(_, m)| row.mean > m) {
            best = Some((run, row.mean));
        }
    }
    best.map(|(r, _)| r).ok_or(HarnessError::NoResults)
}

/// Retrains each method's best configuration under `n_seeds` fresh seeds
/// (shared across methods) and cross-evaluates every copy.
pub fn evaluate_best(
    campaign: &Campaign,
    search: &SearchResults,
    n_seeds: usize,
    out: Option<&Path>,
) -> Result<SearchResults, HarnessError> {
    campaign.validate()?;
    if n_seeds == 0 {
        return Err(HarnessError::InvalidCampaign("n_seeds must be >= 1".into()));
    }
    let ctx = Context::new(campaign)?;
    let mut specs = Vec::new();
    for &m in &campaign.methods {
        let best = best_config(search, m)?;
        let config: TrainConfig = serde_json::from_str(&best.config)?;
        for s in 0..n_seeds {
            specs.push(RunSpec {
                run_id: format!("{}-best-s{:02}", m.name(), s),
                method: m,
                seed: derive_seed(campaign.seed, TAG_BEST, s as u64, 0),
                config,
            });
        }
    }
    let search_seeds: std::collections::HashSet<u64> = search.runs.iter().map(|r| r.seed).collect();
    if specs.iter().any(|s| search_seeds.contains(&s.seed)) {
        return Err(HarnessError::InvalidCampaign("best-config seeds collide with search seeds".into()));
    }
    let dir = out.map(|d| d.join("best"));
    let results = run_all(&specs, &ctx, dir.as_deref(), campaign.jobs)?;
    if let Some(d) = &dir {
        results.write(d)?;
        write_reports(&results, d)?;
    }
    Ok(results)
}

/// One box of a robustness report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: MethodKind,
    pub train_env: String,
    pub eval_env: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub se: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub wlow: f64,
    pub whigh: f64,
    pub max: f64,
}

/// Statistics of the per-run mean return over all runs, per method and
/// evaluation environment (first-appearance order).
pub fn robustness_report(rows: &[ResultRow]) -> Vec<RobustnessRow> {
    let mut keys: Vec<(MethodKind, String, String)> = Vec::new();
    for r in rows {
        let k = (r.method, r.train_env.clone(), r.eval_env.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(method, train_env, eval_env)| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.train_env == train_env && r.eval_env == eval_env)
                .map(|r| r.mean)
                .collect();
            let s = summarize_distribution(&values).ok()?;
            Some(RobustnessRow {
                method,
                train_env,
                eval_env,
                n: s.n,
                mean: s.mean,
                std: s.std,
                se: s.se,
                median: s.median,
                q1: s.q1,
                q3: s.q3,
                wlow: s.whisker_low,
                whigh: s.whisker_high,
                max: s.max,
            })
        })
        .collect()
}

/// Rows of runs flagged optimal against the Tiger oracle.
pub fn optimal_rows(results: &SearchResults) -> Vec<ResultRow> {
    let optimal: std::collections::HashSet<&str> =
        results.runs.iter().filter(|r| r.optimal == Some(true)).map(|r| r.run_id.as_str()).collect();
    results.rows.iter().filter(|r| optimal.contains(r.run_id.as_str())).cloned().collect()
}

/// Writes `robustness.csv` and, when any run carries a Tiger optimality
/// flag, `robustness_optimal.csv`.
pub fn write_reports(results: &SearchResults, dir: &Path) -> Result<(), HarnessError> {
    write_csv(&dir.join("robustness.csv"), &robustness_report(&results.rows))?;
    if results.runs.iter().any(|r| r.optimal.is_some()) {
        write_csv(&dir.join("robustness_optimal.csv"), &robustness_report(&optimal_rows(results)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(seed: u64) -> Campaign {
        let mut c = Campaign::new("smoke", EnvKind::Tiger, vec![MethodKind::None, MethodKind::Grad], 2, seed);
        c.max_epochs = Some(20);
        c.n_mc = 50;
        c.pilot_epochs = Some(5);
        c.shifts = Some(vec!["0.8".into()]);
        c.audit_grid = 11;
        c
    }

    #[test]
    fn tiger_samples_within_bounds() {
        let space = SearchSpace::tiger();
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..2_000 {
            let h = space.sample(&mut rng);
            assert!(space.contains(&h));
            assert!(h.lr >= (-4f64).exp() && h.lr <= (-1f64).exp());
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let c = smoke(3);
        let back = Campaign::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let text = "name = \"x\"\nenv = \"fvrs\"\nobs_fn = \"heavi\"\nmethods = [\"grad\", \"none\"]\nruns_per_method = 1\nseed = 4\n";
        let f = Campaign::from_toml(text).unwrap();
        let labels: Vec<String> = f.eval_envs().unwrap().iter().map(|e| e.obs_label()).collect();
        assert_eq!(labels[0], "heavi");
        assert_eq!(labels.len(), 8);
        assert!(Campaign::from_toml(&text.replace("runs_per_method = 1", "runs_per_method = 0")).is_err());
        assert!(Campaign::from_toml(&text.replace("[\"grad\", \"none\"]", "[\"hess1d\"]")).is_err());
        assert!(Campaign::from_toml(&format!("{text}bogus = 1\n")).is_err());
    }

    #[test]
    fn smoke_search_emits_rows_per_method_and_is_deterministic() {
        let c = smoke(11);
        let a = run_search(&c, None).unwrap();
        assert_eq!(a.runs.len(), 4);
        assert!(a.runs.iter().all(|r| r.ok()));
        assert_eq!(a.rows.len(), 8);
        for m in [MethodKind::None, MethodKind::Grad] {
            assert_eq!(a.runs.iter().filter(|r| r.method == m).count(), 2);
        }
        let b = run_search(&c, None).unwrap();
        assert_eq!(a, b);
        let mut jobs = c.clone();
        jobs.jobs = 3;
        assert_eq!(run_search(&jobs, None).unwrap(), a);
    }

    fn row(run_id: &str, method: MethodKind, mean: f64) -> ResultRow {
        ResultRow {
            run_id: run_id.into(),
            method,
            train_env: "p1".into(),
            eval_env: "p1".into(),
            seed: 0,
            n_mc: 1,
            mean,
            std: 0.0,
            se: 0.0,
            median: mean,
            q1: mean,
            q3: mean,
            wlow: mean,
            whigh: mean,
            max: mean,
            config: "{}".into(),
        }
    }

    fn meta(run_id: &str, method: MethodKind, optimal: Option<bool>) -> RunMeta {
        RunMeta {
            run_id: run_id.into(),
            method,
            train_env: "p1".into(),
            seed: 0,
            status: "ok".into(),
            epochs: 1,
            final_td_loss: 0.0,
            audit_max_violation: 0.0,
            optimal,
            agreement_reachable: None,
            agreement_grid: None,
            config: "{}".into(),
        }
    }

    #[test]
    fn best_config_rules() {
        let g = MethodKind::Grad;
        let single = SearchResults { rows: vec![row("a", g, 1.0)], runs: vec![meta("a", g, None)] };
        assert_eq!(best_config(&single, g).unwrap().run_id, "a");
        let two = SearchResults {
            rows: vec![row("a", g, 5.0), row("b", g, 7.0)],
            runs: vec![meta("a", g, None), meta("b", g, None)],
        };
        assert_eq!(best_config(&two, g).unwrap().run_id, "b");
        let tie = SearchResults {
            rows: vec![row("a", g, 7.0), row("b", g, 7.0)],
            runs: vec![meta("a", g, None), meta("b", g, None)],
        };
        assert_eq!(best_config(&tie, g).unwrap().run_id, "a");
        assert!(matches!(best_config(&SearchResults::default(), g), Err(HarnessError::NoResults)));
    }

    #[test]
    fn robustness_delegates_and_filters() {
        let n = MethodKind::None;
        let res = SearchResults {
            rows: vec![row("a", n, 1.0), row("b", n, 2.0), row("c", n, 9.0)],
            runs: vec![meta("a", n, Some(true)), meta("b", n, Some(false)), meta("c", n, Some(true))],
        };
        let all = robustness_report(&res.rows);
        assert_eq!(all.len(), 1);
        let s = summarize_distribution(&[1.0, 2.0, 9.0]).unwrap();
        assert_eq!((all[0].median, all[0].q1, all[0].q3, all[0].n), (s.median, s.q1, s.q3, 3));
        let opt = robustness_report(&optimal_rows(&res));
        assert_eq!(opt[0].n, 2);
        assert_eq!(opt[0].mean, 5.0);
    }

    #[test]
    fn seeds_are_distinct_across_tags() {
        let mut seen = std::collections::HashSet::new();
        for tag in [TAG_SEARCH, TAG_BEST] {
            for a in 0..6 {
                for b in 0..50 {
                    assert!(seen.insert(derive_seed(7, tag, a, b)));
                }
            }
        }
    }
}

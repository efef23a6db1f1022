//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::convexity::{audit_convexity, ConvexityMethod, MethodKind, DEFAULT_N_C, DEFAULT_N_PSD};
use crate::env::fvrs::{oracle_ignore_rocks, FvrsConfig, FvrsRewards, ObservationFunction, ACTION_NAMES as FVRS_ACTIONS};
use crate::env::tiger::{
    oracle_perfect, oracle_policy, oracle_uninformative, TigerConfig, ACTION_NAMES as TIGER_ACTIONS, PERFECT_BELIEFS,
};
use crate::env::{EnvConfig, EnvKind};
use crate::evaluation::{
    cross_evaluate, fvrs_standard_shifts, tiger_shifts, ConveniencePolicy, EvalSummary, FnPolicy, Policy,
    TIGER_SHIFT_P_OBS,
};
use crate::harness::{evaluate_best, run_search, write_reports, Campaign, SearchResults};
use crate::networks::DuelingNet;
use crate::training::{calibrate_weight, pilot_epochs, train, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CONVEXQ_OUT";

#[derive(Debug, Parser)]
#[command(name = "convexq", version, about = "Convexity-enforced deep Q-learning on belief-space POMDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent and write its train log and checkpoint.
    Train(TrainArgs),
    /// Monte Carlo evaluation of a checkpoint or a built-in baseline.
    Eval(EvalArgs),
    /// Evaluate one policy on several observation settings.
    CrossEval(CrossEvalArgs),
    /// Run a hyperparameter search campaign from a manifest.
    Search(CampaignArgs),
    /// Retrain each method's best search config under fresh seeds.
    BestEval(BestEvalArgs),
    /// Convexity audit of a checkpoint's value function.
    Audit(AuditArgs),
    /// Closed-form and value-iteration reference solutions.
    Oracle(OracleArgs),
    /// Rebuild summary CSVs from stored per-run rows.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EnvArg {
    Tiger,
    Fvrs,
}

impl From<EnvArg> for EnvKind {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Tiger => EnvKind::Tiger,
            EnvArg::Fvrs => EnvKind::Fvrs,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EnvOpts {
    #[arg(long, value_enum)]
    pub env: EnvArg,
    /// Tiger observation accuracy.
    #[arg(long)]
    pub p_obs: Option<f64>,
    /// FVRS observation function: def, heavi or const<c>.
    #[arg(long)]
    pub obs_fn: Option<String>,
}

impl EnvOpts {
    pub fn config(&self) -> Result<EnvConfig> {
        let env = match self.env {
            EnvArg::Tiger => {
                if self.obs_fn.is_some() {
                    bail!("--obs-fn applies to fvrs only");
                }
                EnvConfig::Tiger(TigerConfig::with_p_obs(self.p_obs.unwrap_or(1.0)))
            }
            EnvArg::Fvrs => {
                if self.p_obs.is_some() {
                    bail!("--p-obs applies to tiger only");
                }
                let obs = match &self.obs_fn {
                    Some(s) => ObservationFunction::parse(s)?,
                    None => ObservationFunction::default_fn(),
                };
                EnvConfig::Fvrs(FvrsConfig::with_obs(obs))
            }
        };
        env.validate()?;
        Ok(env)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub env: EnvOpts,
    #[arg(long, default_value = "none")]
    pub method: String,
    /// Penalty weight; calibrated with a pilot run when omitted.
    #[arg(long)]
    pub weight: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Training config JSON overriding the defaults (as written by `train`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Baseline {
    /// Always listen (Tiger).
    Listen,
    /// Always move east (FVRS).
    East,
    /// Move east, sampling believed-good rocks on the way (FVRS).
    Convenience,
}

#[derive(Debug, Args)]
pub struct PolicyOpts {
    /// Network checkpoint (net.json).
    #[arg(long, conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub env: EnvOpts,
    #[command(flatten)]
    pub policy: PolicyOpts,
    #[arg(long, default_value_t = 10_000)]
    pub n_mc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the summary as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossEvalArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated settings (Tiger accuracies or FVRS labels);
    /// defaults to the standard set.
    #[arg(long, value_delimiter = ',')]
    pub shifts: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct CampaignArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BestEvalArgs {
    #[command(flatten)]
    pub campaign: CampaignArgs,
    /// Seeds per method (defaults to the manifest's best_seeds).
    #[arg(long)]
    pub n_seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub env: EnvOpts,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(value_enum)]
    pub env: EnvArg,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long)]
    pub p_obs: Option<f64>,
    /// Belief grid for the Tiger value-iteration policy.
    #[arg(long, default_value_t = 1001)]
    pub grid: usize,
    /// FVRS grid size.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Campaign directory holding results.csv and runs.csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("convexq-out"))
}

fn parse_method(s: &str) -> Result<MethodKind> {
    MethodKind::parse(s).with_context(|| format!("unknown method {s:?} (none, hard, point, grad, hess1d, hessnd)"))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    policy: &'a str,
    eval_env: String,
    seed: u64,
    n_mc: usize,
    mean: f64,
    std: f64,
    se: f64,
    median: f64,
    q1: f64,
    q3: f64,
    wlow: f64,
    whigh: f64,
    max: f64,
}

fn summary_row<'a>(policy: &'a str, env: &EnvConfig, seed: u64, s: &EvalSummary) -> SummaryRow<'a> {
    SummaryRow {
        policy,
        eval_env: env.obs_label(),
        seed,
        n_mc: s.n,
        mean: s.mean,
        std: s.std,
        se: s.se,
        median: s.median,
        q1: s.q1,
        q3: s.q3,
        wlow: s.whisker_low,
        whigh: s.whisker_high,
        max: s.max,
    }
}

fn write_summaries(path: Option<&Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    match path {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_policy(opts: &PolicyOpts, env: &EnvConfig) -> Result<(Box<dyn Policy>, String)> {
    match (&opts.checkpoint, opts.baseline) {
        (Some(path), _) => {
            let net = DuelingNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Ok((Box::new(net), path.display().to_string()))
        }
        (None, Some(Baseline::Listen)) => {
            if env.kind() != EnvKind::Tiger {
                bail!("the listen baseline is a Tiger policy");
            }
            Ok((Box::new(FnPolicy(|_: &[f64]| crate::env::tiger::LISTEN)), "listen".into()))
        }
        (None, Some(Baseline::East)) => {
            if env.kind() != EnvKind::Fvrs {
                bail!("the east baseline is an FVRS policy");
            }
            Ok((Box::new(FnPolicy(|_: &[f64]| crate::env::fvrs::MOVE_EAST)), "east".into()))
        }
        (None, Some(Baseline::Convenience)) => match env {
            EnvConfig::Fvrs(c) => Ok((Box::new(ConveniencePolicy::new(c)), "convenience".into())),
            _ => bail!("the convenience baseline is an FVRS policy"),
        },
        (None, None) => bail!("pass --checkpoint or --baseline"),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let env = a.env.config()?;
    let kind = parse_method(&a.method)?;
    let mut cfg = match &a.manifest {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::for_env(env),
    };
    cfg.env = env;
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    let n_c = if a.manifest.is_some() { cfg.method.n_c } else { DEFAULT_N_C };
    let n_psd = if a.manifest.is_some() { cfg.method.n_psd } else { DEFAULT_N_PSD };
    cfg.method = ConvexityMethod { kind, weight: a.weight.unwrap_or(1.0), n_c, n_psd };
    cfg.validate()?;
    if kind.is_soft() && a.weight.is_none() {
        cfg.method.weight = calibrate_weight(&cfg, kind, pilot_epochs(&cfg.env), a.seed ^ 0x5EED)?;
    }
    let out = a.out.clone().unwrap_or_else(|| out_root().join(format!("train-{}-{}-s{}", env.kind(), kind, a.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (net, log) = train(&cfg, a.seed)?;
    log.save(&out.join("trainlog.csv"))?;
    net.save(&out.join("net.json"))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let last = log.rows.last().copied();
    println!(
        "trained {} {} seed {} for {} epochs (weight {}); final td loss {}",
        env.kind(),
        kind,
        a.seed,
        log.rows.len(),
        cfg.method.weight,
        last.map_or(f64::NAN, |r| r.td_loss)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let env = a.env.config()?;
    let (policy, name) = load_policy(&a.policy, &env)?;
    let s = crate::evaluation::mc_return(policy.as_ref(), &env, a.n_mc, a.seed)?;
    write_summaries(a.out.as_deref(), &[summary_row(&name, &env, a.seed, &s)])
}

fn cmd_cross_eval(a: &CrossEvalArgs) -> Result<()> {
    let env = a.eval.env.config()?;
    let (policy, name) = load_policy(&a.eval.policy, &env)?;
    let shifts = match (&env, &a.shifts) {
        (EnvConfig::Tiger(base), None) => tiger_shifts(base, &TIGER_SHIFT_P_OBS),
        (EnvConfig::Fvrs(base), None) => fvrs_standard_shifts(base),
        (EnvConfig::Tiger(base), Some(list)) => {
            let ps = list
                .iter()
                .map(|s| s.trim_start_matches('p').parse::<f64>().with_context(|| format!("bad accuracy {s:?}")))
                .collect::<Result<Vec<_>>>()?;
            tiger_shifts(base, &ps)
        }
        (EnvConfig::Fvrs(base), Some(list)) => list
            .iter()
            .map(|s| Ok(EnvConfig::Fvrs(FvrsConfig { obs_fn: ObservationFunction::parse(s)?, ..*base })))
            .collect::<Result<Vec<_>>>()?,
    };
    let summaries = cross_evaluate(policy.as_ref(), &shifts, a.eval.n_mc, a.eval.seed)?;
    let rows: Vec<SummaryRow> =
        shifts.iter().zip(&summaries).map(|(e, s)| summary_row(&name, e, a.eval.seed, s)).collect();
    write_summaries(a.eval.out.as_deref(), &rows)
}

fn load_campaign(a: &CampaignArgs) -> Result<(Campaign, PathBuf)> {
    let mut c = Campaign::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    if let Some(j) = a.jobs {
        c.jobs = j;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.validate()?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join(&c.name));
    Ok((c, out))
}

fn cmd_search(a: &CampaignArgs) -> Result<()> {
    let (c, out) = load_campaign(a)?;
    let res = run_search(&c, Some(&out))?;
    let failed = res.runs.iter().filter(|r| !r.ok()).count();
    println!("{} runs ({} failed); results in {}", res.runs.len(), failed, out.display());
    Ok(())
}

fn cmd_best_eval(a: &BestEvalArgs) -> Result<()> {
    let (c, out) = load_campaign(&a.campaign)?;
    let search = SearchResults::read(&out).with_context(|| format!("reading search results in {}", out.display()))?;
    let res = evaluate_best(&c, &search, a.n_seeds.unwrap_or(c.best_seeds), Some(&out))?;
    println!("{} best-config runs; results in {}", res.runs.len(), out.join("best").display());
    Ok(())
}

fn cmd_audit(a: &AuditArgs) -> Result<()> {
    let env = a.env.config()?;
    let net = DuelingNet::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if net.input_width() != env.input_width() {
        bail!("checkpoint input width {} does not match {} ({})", net.input_width(), env.kind(), env.input_width());
    }
    let report = audit_convexity(&net, &env, a.grid);
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => {
            fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            println!("max violation {:e} over {} triples", report.max_violation, report.triples_checked);
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    match a.env {
        EnvArg::Tiger => {
            let p_obs = a.p_obs.unwrap_or(1.0);
            let config = TigerConfig { p_obs, gamma: a.gamma, ..Default::default() };
            config.validate()?;
            if p_obs == 1.0 {
                let o = oracle_perfect(a.gamma);
                println!("perfect observations: r* = {:.12}", o.r_star);
                println!("{:>8} {:>14} {:>14} {:>14}", "belief", TIGER_ACTIONS[0], TIGER_ACTIONS[1], TIGER_ACTIONS[2]);
                for (b, q) in PERFECT_BELIEFS.iter().zip(o.q) {
                    println!("{b:>8} {:>14.9} {:>14.9} {:>14.9}", q[0], q[1], q[2]);
                }
            }
            if p_obs == 0.5 {
                let o = oracle_uninformative(a.gamma, None);
                println!("uninformative observations: r* = {:.12}, Q(0.5, open) = {:.12}", o.r_star, o.q_open);
            }
            let table = oracle_policy(&config, a.grid, None)?;
            println!(
                "value iteration ({} points, {} iterations): V(0.5) = {:.9}",
                a.grid,
                table.iterations,
                table.value_at(0.5)
            );
            let fmt = |x: Option<f64>| x.map_or("never".to_string(), |v| format!("{v}"));
            println!("open-left for b <= {}, open-right for b >= {}", fmt(table.open_left_below), fmt(table.open_right_above));
            for (b, act) in table.reachable.iter().zip(&table.reachable_actions) {
                println!("reachable b = {b:.9}: {}", TIGER_ACTIONS[*act]);
            }
        }
        EnvArg::Fvrs => {
            if a.p_obs.is_some() {
                bail!("--p-obs applies to tiger only");
            }
            let o = oracle_ignore_rocks(a.gamma, a.n, &FvrsRewards::default());
            println!("ignore-rocks policy: r* = {:.12}", o.r_star);
            for (name, q) in [
                (FVRS_ACTIONS[2], o.q_east),
                (FVRS_ACTIONS[0], o.q_north_south),
                (FVRS_ACTIONS[1], o.q_north_south),
                (FVRS_ACTIONS[3], o.q_west),
                (FVRS_ACTIONS[4], o.q_sample),
            ] {
                println!("averaged Q*({name}) = {q:.12}");
            }
        }
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let res = SearchResults::read(&a.out).with_context(|| format!("reading {}", a.out.display()))?;
    write_reports(&res, &a.out)?;
    println!("rebuilt reports for {} runs in {}", res.runs.len(), a.out.display());
    let best = a.out.join("best");
    if best.join("results.csv").exists() {
        let b = SearchResults::read(&best)?;
        write_reports(&b, &best)?;
        println!("rebuilt reports for {} best-config runs", b.runs.len());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CrossEval(a) => cmd_cross_eval(a),
        Command::Search(a) => cmd_search(a),
        Command::BestEval(a) => cmd_best_eval(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Report(a) => cmd_report(a),
    }
}

//! Command-line driver for the `qcd` library.
//!
//! One experiment config feeds every subcommand: training, policy
//! evaluation, threshold sweeps, the posterior benchmark, asymptotic
//! approximations, mean-flow diagnostics, batch-means error bars, and
//! decision-region scans. The `recipe` subcommand runs a canned model
//! end to end and compares the trained policy against the best fixed
//! threshold.
//!
//! Exit codes: 0 on success, 2 for configuration and validation
//! problems, 3 for numerical failures.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use qcd::asymptotics::{approx_opt, shifted_approx, summarize, MgfProfile};
use qcd::basis::{collect_sis_samples, fit_centers, RbfBasis};
use qcd::eval::{
    batch_means, cusum_star, decision_region, eval_policy, histogram, open_unit_grid,
    shiryaev_eval, shiryaev_eval_with_rho, threshold_sweep, uniform_grid, StopRule,
    ThresholdTable,
};
use qcd::meanflow::{
    contraction_check, counterexample_instance, counterexample_params, integrate_flow,
    FiniteInstance, FlowEstimator,
};
use qcd::model::ChangeTimeLaw;
use qcd::qlearn::{threshold_of, train, QFunction, ScanGrid, ThresholdForm, TrainResult};
use qcd::rng::{child_seed, substream};
use qcd::sis::SisSpec;
use qcd::{Error, Result};

use config::{hazard_rate, streams, ExperimentConfig, ResolvedExperiment};

const OVERRIDE_HELP: &str = "Any `--path.to.field VALUE` or `path.to.field=VALUE` argument is a \
config override, applied after the file or recipe is read. Numeric segments index arrays, so \
`--sis.components.0.shift 0.05` retunes the first statistic component.";

/// Train, evaluate, and diagnose quickest-change detectors.
#[derive(Debug, Parser)]
#[command(name = "qcd", version, after_help = OVERRIDE_HELP)]
struct Cli {
    /// Experiment config file (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config value.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Fit the basis and train a Q-function; writes train.json.
    Train,
    /// Monte-Carlo evaluation of a stopping rule; writes eval_report.json.
    Eval {
        /// train.json holding the policy to evaluate greedily.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Evaluate a fixed threshold rule on the first component instead.
        #[arg(long, conflicts_with = "policy")]
        threshold: Option<f64>,
        /// Evaluate a two-component box rule instead.
        #[arg(long = "box", value_name = "H1,H2", conflicts_with_all = ["policy", "threshold"])]
        box_rule: Option<String>,
    },
    /// Common-path threshold sweep of one component; writes threshold_table.csv.
    Sweep {
        /// Which statistic component to sweep (zero-based).
        #[arg(long, default_value_t = 0)]
        component: usize,
    },
    /// Posterior-threshold benchmark; writes shiryaev_table.csv and shiryaev.json.
    Shiryaev {
        /// Recursion hazard override, for deliberately misspecified baselines.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Drift roots, optimal shifts, and cost approximations; writes asymptotics.json.
    Asymptotics {
        /// Anchor `KAPPA0,H0,J0` through which the shifted curves pass.
        #[arg(long, value_name = "KAPPA0,H0,J0")]
        anchor: Option<String>,
    },
    /// Mean-flow diagnostics for the training dynamics.
    Meanflow {
        #[command(subcommand)]
        mode: MeanflowCmd,
    },
    /// Repeated independent trainings and their batch-means covariance;
    /// writes batch_means.json and histogram.csv.
    Batchmeans {
        /// Number of runs, overriding eval.batch_runs.
        #[arg(long)]
        runs: Option<u32>,
    },
    /// Stop/continue map of a trained two-component policy; writes region.csv.
    Region {
        /// train.json holding the policy to scan.
        #[arg(long)]
        policy: PathBuf,
        /// Box rule drawn alongside for comparison.
        #[arg(long, default_value_t = 8.0)]
        h1: f64,
        #[arg(long, default_value_t = 6.0)]
        h2: f64,
    },
    /// Run a canned model end to end: train, sweep, evaluate, compare.
    Recipe {
        /// One of: model1a model1b model1c model2a model2b model2c model3a model3b.
        name: String,
    },
}

#[derive(Debug, Subcommand)]
enum MeanflowCmd {
    /// Integrate the estimated mean flow of the configured model; writes flow.json.
    Flow {
        /// Comma-separated start point (default: the origin).
        #[arg(long)]
        theta0: Option<String>,
        /// Euler step size.
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        /// Integration horizon.
        #[arg(long, default_value_t = 40.0)]
        t_end: f64,
        /// Sample-pool size per vector-field evaluation.
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
    },
    /// The scaled two-feature instability family; needs no config.
    /// Writes counterexample.json.
    Counterexample {
        #[arg(long, default_value_t = 100.0)]
        xi: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Random unit directions checked for outward drift.
        #[arg(long, default_value_t = 10)]
        directions: u32,
    },
    /// Exact contraction diagnostic of a finite chain from a JSON file;
    /// needs no config. Writes contraction.json.
    Contraction {
        /// JSON file with fields p, psi, delta, and optionally pi.
        #[arg(long)]
        instance: PathBuf,
    },
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let (args, overrides) = match split_overrides(argv) {
        Ok(pair) => pair,
        Err(e) => fail(&e),
    };
    let cli = Cli::parse_from(args);
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("warning: thread pool already running; --threads ignored");
        }
    }
    if let Err(e) = run(&cli, &overrides) {
        fail(&e);
    }
}

fn fail(e: &Error) -> ! {
    eprintln!("error: {e}");
    std::process::exit(exit_code(e));
}

/// 2 for anything the user can fix in the inputs, 3 for numerical
/// failures inside an otherwise valid run.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::ShiryaevRequiresGeometric
        | Error::ZeroProbabilityEvent(_)
        | Error::DistinctCentersUnavailable { .. } => 2,
        _ => 3,
    }
}

type Override = (String, String);

/// Pull `--a.b.c VALUE`, `--a.b.c=VALUE`, and bare `a.b.c=VALUE` tokens
/// out of the argument list before clap parses the rest, so overrides
/// can sit anywhere a flag can.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>)> {
    fn override_key(s: &str) -> Option<&str> {
        let key = s.split('=').next().unwrap_or(s);
        let well_formed = !key.is_empty()
            && key.contains('.')
            && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.');
        well_formed.then_some(key)
    }

    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(program) = it.next() {
        rest.push(program);
    }
    while let Some(token) = it.next() {
        if let Some(body) = token.strip_prefix("--") {
            if let Some(key) = override_key(body) {
                if let Some((_, value)) = body.split_once('=') {
                    overrides.push((key.to_string(), value.to_string()));
                } else {
                    let value = it.next().ok_or_else(|| {
                        Error::InvalidConfig(format!("override --{body} needs a value"))
                    })?;
                    overrides.push((key.to_string(), value));
                }
                continue;
            }
        } else if token.contains('=') {
            if let Some(key) = override_key(&token) {
                let (_, value) = token.split_once('=').expect("checked above");
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(token);
    }
    Ok((rest, overrides))
}

fn run(cli: &Cli, overrides: &[Override]) -> Result<()> {
    // The two model-free diagnostics run without a config file.
    match &cli.cmd {
        Cmd::Meanflow { mode: MeanflowCmd::Counterexample { xi, samples, directions } } => {
            require_no_overrides(overrides)?;
            let out = prepare_dir(cli.out.clone().unwrap_or_else(|| PathBuf::from(".")))?;
            return cmd_counterexample(&out, cli.seed.unwrap_or(1), *xi, *samples, *directions);
        }
        Cmd::Meanflow { mode: MeanflowCmd::Contraction { instance } } => {
            require_no_overrides(overrides)?;
            let out = prepare_dir(cli.out.clone().unwrap_or_else(|| PathBuf::from(".")))?;
            return cmd_contraction(&out, instance);
        }
        _ => {}
    }

    let mut tree = match &cli.cmd {
        Cmd::Recipe { name } => config::to_tree(&config::recipe(name)?)?,
        _ => {
            let path = cli.config.as_deref().ok_or_else(|| {
                Error::InvalidConfig(
                    "no config file; pass --config FILE or use the recipe subcommand".into(),
                )
            })?;
            config::read_tree(path)?
        }
    };
    if let Some(seed) = cli.seed {
        config::apply_override(&mut tree, "seed", &seed.to_string())?;
    }
    for (key, value) in overrides {
        config::apply_override(&mut tree, key, value)?;
    }
    let mut experiment = config::from_tree(tree)?;
    if let Some(out) = &cli.out {
        experiment.output_dir = out.clone();
    }
    let resolved = experiment.resolve()?;
    let out = prepare_dir(resolved.config.output_dir.clone())?;

    match &cli.cmd {
        Cmd::Train => cmd_train(&resolved, &out),
        Cmd::Eval { policy, threshold, box_rule } => {
            cmd_eval(&resolved, &out, policy.as_deref(), *threshold, box_rule.as_deref())
        }
        Cmd::Sweep { component } => cmd_sweep(&resolved, &out, *component),
        Cmd::Shiryaev { rho } => cmd_shiryaev(&resolved, &out, *rho),
        Cmd::Asymptotics { anchor } => cmd_asymptotics(&resolved, &out, anchor.as_deref()),
        Cmd::Meanflow { mode: MeanflowCmd::Flow { theta0, dt, t_end, samples } } => {
            cmd_flow(&resolved, &out, theta0.as_deref(), *dt, *t_end, *samples)
        }
        Cmd::Batchmeans { runs } => cmd_batchmeans(&resolved, &out, *runs),
        Cmd::Region { policy, h1, h2 } => cmd_region(&resolved, &out, policy, *h1, *h2),
        Cmd::Recipe { name } => cmd_recipe(&resolved, &out, name),
        Cmd::Meanflow { .. } => unreachable!("handled before config loading"),
    }
}

fn require_no_overrides(overrides: &[Override]) -> Result<()> {
    if overrides.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "dotted overrides apply to config-driven commands; got --{}",
            overrides[0].0
        )))
    }
}

fn prepare_dir(dir: PathBuf) -> Result<PathBuf> {
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::InvalidConfig(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

/// Fit the radial basis on statistic states from simulated paths, on
/// the basis stream of the master seed. Whole paths are collected until
/// the sample budget is met, then the excess is trimmed.
fn fit_basis(resolved: &ResolvedExperiment) -> Result<RbfBasis> {
    let cfg = &resolved.config;
    let basis_seed = child_seed(cfg.seed, streams::BASIS);
    let mut rng = substream(basis_seed, 0);
    let mut samples = Vec::new();
    while (samples.len() as u64) < cfg.basis.fit_samples {
        let path = collect_sis_samples(
            &resolved.model,
            &resolved.spec,
            1,
            resolved.train.eta,
            &mut rng,
        )?;
        samples.extend(path);
    }
    samples.truncate(cfg.basis.fit_samples as usize);
    fit_centers(&samples, cfg.basis.k, cfg.basis.b, &mut substream(basis_seed, 1))
}

/// The averaged weights when averaging ran, the final iterate otherwise.
fn chosen_theta(result: &TrainResult) -> Vec<f64> {
    result.theta_pr.clone().unwrap_or_else(|| result.theta_final.clone())
}

#[derive(Debug, Serialize)]
struct TrainPayload {
    train: TrainResult,
    qfunction: QFunction,
    threshold_form: Option<ThresholdForm>,
}

fn load_policy(path: &Path) -> Result<QFunction> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let qf = value
        .get("result")
        .and_then(|r| r.get("qfunction"))
        .cloned()
        .ok_or_else(|| {
            Error::InvalidConfig(format!("{} has no result.qfunction field", path.display()))
        })?;
    let qf: QFunction = serde_json::from_value(qf)
        .map_err(|e| Error::InvalidConfig(format!("{}: bad qfunction: {e}", path.display())))?;
    QFunction::new(qf.basis, qf.theta)
}

fn parse_pair(raw: &str) -> Result<(f64, f64)> {
    let parts: Vec<f64> = parse_numbers(raw)?;
    match parts[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::InvalidConfig(format!("expected two comma-separated numbers, got {raw:?}"))),
    }
}

fn parse_triple(raw: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = parse_numbers(raw)?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => {
            Err(Error::InvalidConfig(format!("expected three comma-separated numbers, got {raw:?}")))
        }
    }
}

fn parse_numbers(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("bad number {s:?}: {e}")))
        })
        .collect()
}

fn warn_capped(capped: u64, n_paths: u64) {
    if capped > 0 {
        eprintln!("warning: {capped} of {n_paths} paths hit the step cap and were truncated");
    }
}

fn write_table_csv(
    out: &Path,
    name: &str,
    config: &ExperimentConfig,
    table: &ThresholdTable,
) -> Result<PathBuf> {
    let rows: Vec<String> = (0..table.grid.len())
        .map(|i| {
            format!(
                "{},{},{},{},{}",
                table.grid[i], table.mde[i], table.mdd[i], table.se_mde[i], table.se_mdd[i]
            )
        })
        .collect();
    artifacts::write_csv(out, name, config, "h,mde,mdd,se_mde,se_mdd", &rows)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(resolved: &ResolvedExperiment, out: &Path) -> Result<()> {
    let basis = fit_basis(resolved)?;
    println!(
        "training: {} regenerations, {} features, kappa = {}",
        resolved.train.n_regens,
        basis.feature_dim(),
        resolved.train.kappa
    );
    let result = train(&resolved.model, &resolved.spec, &basis, &resolved.train)?;
    let qf = QFunction::new(basis, chosen_theta(&result))?;
    let threshold_form =
        (resolved.spec.dim() == 1).then(|| threshold_of(&qf, ScanGrid::for_eta(resolved.train.eta)));
    report_training(&result, threshold_form.as_ref());
    let payload = TrainPayload { train: result, qfunction: qf, threshold_form };
    let path = artifacts::write_report(out, "train.json", &resolved.config, &payload)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report_training(result: &TrainResult, form: Option<&ThresholdForm>) {
    println!(
        "trained on {} samples over {} regenerations ({} resets)",
        result.sample_count, result.regen_count, result.reset_count
    );
    match form {
        Some(ThresholdForm::Threshold(h)) => println!("policy is a threshold rule at h = {h:.4}"),
        Some(ThresholdForm::NotThreshold { violations }) => println!(
            "policy is not a threshold rule ({} continue points above the first stop)",
            violations.len()
        ),
        None => {}
    }
}

fn cmd_eval(
    resolved: &ResolvedExperiment,
    out: &Path,
    policy: Option<&Path>,
    threshold: Option<f64>,
    box_rule: Option<&str>,
) -> Result<()> {
    let loaded;
    let rule = if let Some(h) = threshold {
        StopRule::Threshold(h)
    } else if let Some(raw) = box_rule {
        let (h1, h2) = parse_pair(raw)?;
        StopRule::Box { h1, h2 }
    } else if let Some(path) = policy {
        loaded = load_policy(path)?;
        StopRule::Greedy(&loaded)
    } else {
        return Err(Error::InvalidConfig(
            "pass --policy train.json, --threshold H, or --box H1,H2".into(),
        ));
    };
    let eval = &resolved.config.eval;
    let seed = child_seed(resolved.config.seed, streams::EVAL);
    let report =
        eval_policy(&resolved.model, &resolved.spec, &rule, resolved.model.kappa, eval.n_paths, seed)?;
    warn_capped(report.capped, report.n_paths);
    println!(
        "cost {:.4} +- {:.4} (mdd {:.3}, mde {:.4}, p_fa {:.4})",
        report.j, report.se_j, report.mdd, report.mde, report.p_fa
    );
    let path = artifacts::write_report(out, "eval_report.json", &resolved.config, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep_component(resolved: &ResolvedExperiment, component: usize) -> Result<ThresholdTable> {
    let spec = &resolved.spec;
    if component >= spec.dim() {
        return Err(Error::InvalidConfig(format!(
            "component {component} out of range; the statistic has {} component(s)",
            spec.dim()
        )));
    }
    let part = &spec.components[component];
    let single = SisSpec::single(part.stat, part.drift.clone())?;
    let eval = &resolved.config.eval;
    let grid = uniform_grid(eval.h_max, eval.grid_points)?;
    let seed = child_seed(resolved.config.seed, streams::EVAL);
    let table = threshold_sweep(&resolved.model, &single, &grid, eval.n_paths, seed)?;
    warn_capped(table.capped, table.n_paths);
    Ok(table)
}

fn cmd_sweep(resolved: &ResolvedExperiment, out: &Path, component: usize) -> Result<()> {
    let table = sweep_component(resolved, component)?;
    let name = if resolved.spec.dim() == 1 {
        "threshold_table.csv".to_string()
    } else {
        format!("threshold_table_{component}.csv")
    };
    let (h_star, j_star) = cusum_star(&table, resolved.model.kappa);
    println!(
        "swept {} thresholds on {} paths; best at kappa = {}: h = {h_star}, cost {j_star:.4}",
        table.grid.len(),
        table.n_paths,
        resolved.model.kappa
    );
    let path = write_table_csv(out, &name, &resolved.config, &table)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ShiryaevStar {
    rho: f64,
    h_star: f64,
    j_star: f64,
    kappa: f64,
}

fn cmd_shiryaev(resolved: &ResolvedExperiment, out: &Path, rho: Option<f64>) -> Result<()> {
    let eval = &resolved.config.eval;
    let grid = open_unit_grid(eval.grid_points)?;
    let seed = child_seed(resolved.config.seed, streams::EVAL);
    let table = match rho {
        Some(r) => shiryaev_eval_with_rho(&resolved.model, r, &grid, eval.n_paths, seed)?,
        None => shiryaev_eval(&resolved.model, &grid, eval.n_paths, seed)?,
    };
    warn_capped(table.capped, table.n_paths);
    let used_rho = rho.unwrap_or_else(|| match resolved.model.change {
        ChangeTimeLaw::Geometric { p } => p,
        // shiryaev_eval rejects everything else before this point
        _ => unreachable!("non-geometric change law without an explicit rho"),
    });
    let (h_star, j_star) = cusum_star(&table, resolved.model.kappa);
    println!(
        "posterior rule with rho = {used_rho}: best threshold {h_star:.4}, cost {j_star:.4}"
    );
    write_table_csv(out, "shiryaev_table.csv", &resolved.config, &table)?;
    let star = ShiryaevStar { rho: used_rho, h_star, j_star, kappa: resolved.model.kappa };
    let path = artifacts::write_report(out, "shiryaev.json", &resolved.config, &star)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AsymptoticsRow {
    kappa: f64,
    h_inf: f64,
    j_inf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    h_shifted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    j_shifted: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ComponentAsymptotics {
    component: usize,
    shift: f64,
    m0: f64,
    m1: f64,
    v0: f64,
    v_plus: f64,
    gamma2: f64,
    rstar: f64,
    table: Vec<AsymptoticsRow>,
}

fn cmd_asymptotics(resolved: &ResolvedExperiment, out: &Path, anchor: Option<&str>) -> Result<()> {
    let anchor = anchor.map(parse_triple).transpose()?;
    let rho_a = hazard_rate(&resolved.model.change);
    let mut records = Vec::with_capacity(resolved.spec.dim());
    for (i, component) in resolved.spec.components.iter().enumerate() {
        let profile = MgfProfile::new(
            component.drift.clone(),
            resolved.model.pre.clone(),
            resolved.model.post.clone(),
            rho_a,
        )?;
        let summary = summarize(&profile)?;
        let table = (2..=100)
            .map(|k| {
                let kappa = f64::from(k);
                let (h_inf, j_inf) = approx_opt(&summary, kappa);
                let (h_shifted, j_shifted) =
                    anchor.map(|a| shifted_approx(&summary, kappa, a)).unzip();
                AsymptoticsRow { kappa, h_inf, j_inf, h_shifted, j_shifted }
            })
            .collect();
        println!(
            "component {i}: m0 {:.4}, m1 {:.4}, roots ({:.6}, {:.6}), gamma2 {:.4}, rstar {:.6}",
            summary.m0, summary.m1, summary.v0, summary.v_plus, summary.gamma2, summary.rstar
        );
        records.push(ComponentAsymptotics {
            component: i,
            shift: component.drift.shift,
            m0: summary.m0,
            m1: summary.m1,
            v0: summary.v0,
            v_plus: summary.v_plus,
            gamma2: summary.gamma2,
            rstar: summary.rstar,
            table,
        });
    }
    let path = artifacts::write_report(out, "asymptotics.json", &resolved.config, &records)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_flow(
    resolved: &ResolvedExperiment,
    out: &Path,
    theta0: Option<&str>,
    dt: f64,
    t_end: f64,
    samples: usize,
) -> Result<()> {
    let basis = fit_basis(resolved)?;
    let est = FlowEstimator::for_model(
        &resolved.model,
        &resolved.spec,
        &basis,
        resolved.train.explore_p,
        resolved.train.gamma,
        resolved.train.eta,
        samples,
        child_seed(resolved.config.seed, streams::FLOW),
    )?;
    let d = est.feature_dim();
    let theta0 = match theta0 {
        Some(raw) => {
            let v = parse_numbers(raw)?;
            if v.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "theta0 needs {d} entries for this basis, got {}",
                    v.len()
                )));
            }
            v
        }
        None => vec![0.0; d],
    };
    let trace = integrate_flow(&est, &theta0, dt, t_end, &vec![0.0; d])?;
    let last = trace.dist_to_ref.last().copied().unwrap_or(f64::NAN);
    println!(
        "integrated {} steps; distance to the origin {last:.4}{}",
        trace.times.len().saturating_sub(1),
        if trace.diverged { " (diverged)" } else { "" }
    );
    let path = artifacts::write_report(out, "flow.json", &resolved.config, &trace)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct DirectionCertificate {
    theta: Vec<f64>,
    outward_rate: f64,
    se: f64,
}

#[derive(Debug, Serialize)]
struct CounterexampleReport {
    xi: f64,
    params: qcd::meanflow::CounterexampleParams,
    certificates: Vec<DirectionCertificate>,
    outward_directions: usize,
    escape_time: Option<f64>,
    final_norm: f64,
    diverged: bool,
}

fn cmd_counterexample(
    out: &Path,
    seed: u64,
    xi: f64,
    samples: usize,
    directions: u32,
) -> Result<()> {
    let params = counterexample_params(xi);
    let est = counterexample_instance(xi, samples, seed)?;
    let d = est.feature_dim();

    let mut rng = substream(child_seed(seed, 1), 0);
    let mut certificates = Vec::with_capacity(directions as usize);
    let mut outward = 0usize;
    for _ in 0..directions {
        let theta = random_unit(&mut rng, d);
        let (barf, se) = est.estimate_barf(&theta);
        let rate: f64 = theta.iter().zip(&barf).map(|(t, f)| t * f).sum();
        let rate_se: f64 =
            theta.iter().zip(&se).map(|(t, s)| (t * s).powi(2)).sum::<f64>().sqrt();
        if rate > 3.0 * rate_se {
            outward += 1;
        }
        certificates.push(DirectionCertificate { theta, outward_rate: rate, se: rate_se });
    }

    let mut theta0 = vec![0.0; d];
    theta0[0] = 1.0;
    let trace = integrate_flow(&est, &theta0, 0.1, 1_000.0, &vec![0.0; d])?;
    let escape_time = trace
        .times
        .iter()
        .zip(&trace.dist_to_ref)
        .find(|(_, dist)| **dist >= 1e3)
        .map(|(t, _)| *t);
    let final_norm = trace.dist_to_ref.last().copied().unwrap_or(f64::NAN);
    println!(
        "xi = {xi}: {outward} of {directions} directions drift outward; {}",
        match escape_time {
            Some(t) => format!("flow from the unit sphere passes norm 1e3 at t = {t:.1}"),
            None => format!("flow reaches norm {final_norm:.3} by t = 1e3"),
        }
    );

    let report = CounterexampleReport {
        xi,
        params,
        certificates,
        outward_directions: outward,
        escape_time,
        final_norm,
        diverged: trace.diverged,
    };
    let inputs = json!({ "xi": xi, "samples": samples, "directions": directions });
    let path = artifacts::write_json(out, "counterexample.json", inputs, seed, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn cmd_contraction(out: &Path, instance_path: &Path) -> Result<()> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawInstance {
        p: Vec<Vec<f64>>,
        #[serde(default)]
        pi: Option<Vec<f64>>,
        psi: Vec<Vec<f64>>,
        delta: Vec<bool>,
    }

    let text = std::fs::read_to_string(instance_path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", instance_path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", instance_path.display())))?;
    let raw: RawInstance = serde_json::from_value(value.clone())
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", instance_path.display())))?;
    let instance = match raw.pi {
        Some(pi) => FiniteInstance::new(raw.p, pi, raw.psi, raw.delta)?,
        None => FiniteInstance::with_stationary(raw.p, raw.psi, raw.delta)?,
    };
    let report = contraction_check(&instance)?;
    println!(
        "rho_hat = {:.8} over {} feature(s), rank {}",
        report.rho_hat, report.feature_dim, report.rank_r
    );
    let inputs = json!({ "instance": value });
    let path = artifacts::write_json(out, "contraction.json", inputs, 0, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_batchmeans(resolved: &ResolvedExperiment, out: &Path, runs: Option<u32>) -> Result<()> {
    let m = runs.unwrap_or(resolved.config.eval.batch_runs);
    let basis = fit_basis(resolved)?;
    println!("batch-means: {m} independent trainings of {} regenerations", resolved.train.n_regens);
    let report = batch_means(
        &resolved.model,
        &resolved.spec,
        &basis,
        &resolved.train,
        m,
        child_seed(resolved.config.seed, streams::BATCH),
    )?;
    if !report.failures.is_empty() {
        eprintln!("warning: {} of {m} runs failed", report.failures.len());
    }
    println!(
        "{} runs succeeded; covariance {}",
        report.runs.len(),
        if report.sigma.is_some() { "estimated" } else { "withheld (too few runs)" }
    );

    let thresholds: Vec<f64> = report.thresholds.iter().flatten().copied().collect();
    let (samples, label) = if thresholds.len() >= 2 {
        (thresholds, "threshold")
    } else {
        (report.z.iter().map(|z| z[0]).collect(), "z0")
    };
    if samples.len() >= 2 {
        let hist = histogram(&samples)?;
        let rows: Vec<String> = (0..hist.counts.len())
            .map(|i| format!("{},{},{}", hist.edges[i], hist.edges[i + 1], hist.counts[i]))
            .collect();
        let columns = format!("{label}_lo,{label}_hi,count");
        write_table_histogram(out, &resolved.config, &columns, &rows)?;
    } else {
        eprintln!("warning: too few successful runs for a histogram");
    }
    let path = artifacts::write_report(out, "batch_means.json", &resolved.config, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_table_histogram(
    out: &Path,
    config: &ExperimentConfig,
    columns: &str,
    rows: &[String],
) -> Result<()> {
    let path = artifacts::write_csv(out, "histogram.csv", config, columns, rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_region(
    resolved: &ResolvedExperiment,
    out: &Path,
    policy: &Path,
    h1: f64,
    h2: f64,
) -> Result<()> {
    let qf = load_policy(policy)?;
    let eval = &resolved.config.eval;
    let n = eval.region_points;
    let axis: Vec<f64> =
        (0..n).map(|i| eval.h_max * i as f64 / (n - 1) as f64).collect();
    let points = decision_region(&qf, &axis, &axis, (h1, h2))?;
    let stops = points.iter().filter(|p| p.policy == 1).count();
    println!("scanned {} points; the policy stops on {stops}", points.len());
    let rows: Vec<String> = points
        .iter()
        .map(|p| format!("{},{},{},{}", p.s1, p.s2, p.policy, p.box_rule))
        .collect();
    let path = artifacts::write_csv(out, "region.csv", &resolved.config, "s1,s2,phi,box", &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ComponentStar {
    component: usize,
    h_star: f64,
    j_star: f64,
}

#[derive(Debug, Serialize)]
struct RecipeSummary {
    recipe: String,
    policy_cost: f64,
    policy_cost_se: f64,
    best_single_threshold_cost: f64,
    cost_ratio: f64,
    components: Vec<ComponentStar>,
    threshold_form: Option<ThresholdForm>,
}

fn cmd_recipe(resolved: &ResolvedExperiment, out: &Path, name: &str) -> Result<()> {
    let config = &resolved.config;
    let basis = fit_basis(resolved)?;
    println!(
        "[{name}] training: {} regenerations, {} features, kappa = {}",
        resolved.train.n_regens,
        basis.feature_dim(),
        resolved.train.kappa
    );
    let result = train(&resolved.model, &resolved.spec, &basis, &resolved.train)?;
    let qf = QFunction::new(basis, chosen_theta(&result))?;
    let threshold_form =
        (resolved.spec.dim() == 1).then(|| threshold_of(&qf, ScanGrid::for_eta(resolved.train.eta)));
    report_training(&result, threshold_form.as_ref());
    let payload =
        TrainPayload { train: result, qfunction: qf.clone(), threshold_form: threshold_form.clone() };
    artifacts::write_report(out, "train.json", config, &payload)?;

    let mut stars = Vec::with_capacity(resolved.spec.dim());
    for i in 0..resolved.spec.dim() {
        let table = sweep_component(resolved, i)?;
        let file = if resolved.spec.dim() == 1 {
            "threshold_table.csv".to_string()
        } else {
            format!("threshold_table_{i}.csv")
        };
        write_table_csv(out, &file, config, &table)?;
        let (h_star, j_star) = cusum_star(&table, resolved.model.kappa);
        println!("[{name}] component {i}: best fixed threshold h = {h_star}, cost {j_star:.4}");
        stars.push(ComponentStar { component: i, h_star, j_star });
    }

    println!("[{name}] evaluating the trained policy on {} paths", config.eval.n_paths);
    let seed = child_seed(config.seed, streams::EVAL);
    let report = eval_policy(
        &resolved.model,
        &resolved.spec,
        &StopRule::Greedy(&qf),
        resolved.model.kappa,
        config.eval.n_paths,
        seed,
    )?;
    warn_capped(report.capped, report.n_paths);
    artifacts::write_report(out, "eval_report.json", config, &report)?;

    let best = stars.iter().map(|s| s.j_star).fold(f64::INFINITY, f64::min);
    let summary = RecipeSummary {
        recipe: name.to_string(),
        policy_cost: report.j,
        policy_cost_se: report.se_j,
        best_single_threshold_cost: best,
        cost_ratio: report.j / best,
        components: stars,
        threshold_form,
    };
    let path = artifacts::write_report(out, "recipe_summary.json", config, &summary)?;
    println!(
        "[{name}] policy cost {:.4} vs best fixed threshold {best:.4} (ratio {:.3})",
        report.j,
        report.j / best
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_split_off_in_all_three_spellings() {
        let args = strings(&[
            "qcd",
            "--seed",
            "7",
            "recipe",
            "model1a",
            "--train.n_regens",
            "2e4",
            "--eval.n_paths=1e5",
            "model.kappa=2",
        ]);
        let (rest, overrides) = split_overrides(args).unwrap();
        assert_eq!(rest, strings(&["qcd", "--seed", "7", "recipe", "model1a"]));
        assert_eq!(
            overrides,
            vec![
                ("train.n_regens".to_string(), "2e4".to_string()),
                ("eval.n_paths".to_string(), "1e5".to_string()),
                ("model.kappa".to_string(), "2".to_string()),
            ]
        );
    }

    #[test]
    fn flags_and_paths_are_not_mistaken_for_overrides() {
        let args = strings(&[
            "qcd",
            "--config=runs/exp.toml",
            "--out",
            "runs/v1.2",
            "meanflow",
            "flow",
            "--t-end",
            "10",
        ]);
        let (rest, overrides) = split_overrides(args.clone()).unwrap();
        assert_eq!(rest, args);
        assert!(overrides.is_empty());
    }

    #[test]
    fn a_trailing_override_without_a_value_is_an_error() {
        let args = strings(&["qcd", "sweep", "--eval.n_paths"]);
        let err = split_overrides(args).unwrap_err().to_string();
        assert!(err.contains("eval.n_paths"), "{err}");
    }

    #[test]
    fn comma_lists_parse_into_tuples() {
        assert_eq!(parse_pair("8, 6").unwrap(), (8.0, 6.0));
        assert_eq!(parse_triple("27,4.5,61.7").unwrap(), (27.0, 4.5, 61.7));
        assert!(parse_pair("8").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn negative_values_ride_along_with_their_override() {
        let args = strings(&["qcd", "sweep", "--sis.components.0.shift", "-0.5"]);
        let (rest, overrides) = split_overrides(args).unwrap();
        assert_eq!(rest, strings(&["qcd", "sweep"]));
        assert_eq!(overrides, vec![("sis.components.0.shift".to_string(), "-0.5".to_string())]);
    }
}

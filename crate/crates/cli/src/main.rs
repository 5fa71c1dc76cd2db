//! Command-line front end: runs experiments from a config file, compares
//! strategies, sweeps the estimator order, and self-checks the core library.
//!
//! Exit codes: 0 on success, 1 for invalid configuration, 2 for runtime
//! failures. Errors go to standard error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowbal::agent::{log_policy_gradient, policy, update_policy, DecisionContext};
use flowbal::comm::{CommCostModel, CommPriors, TransferRates};
use flowbal::metrics::export_report;
use flowbal::workload::{TrajectoriesTree, TrajectoryPath};
use flowbal::{
    BlockId, Error, MetricsReport, PolicyParams, Rank, Result, SimConfig, Strategy, TransferKind,
};

#[derive(Parser)]
#[command(
    name = "flowbal",
    version,
    about = "Deterministic simulator for load-balanced, data-parallel particle tracing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Run the same scenario under every strategy and print a comparison.
    Compare(CompareArgs),
    /// Run estimator orders 0..=R and print the error-vs-order table.
    SweepOrder(SweepArgs),
    /// Execute the built-in correctness oracles.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the RNG seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to export the report files into.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the rebalancing strategy from the config.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the RNG seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to export per-strategy report files into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the RNG seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to export per-order report files into.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Largest estimator order to sweep to (defaults to the config's order).
    #[arg(long)]
    max_order: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::SweepOrder(args) => cmd_sweep_order(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Invalid inputs exit with 1; everything else that fails exits with 2.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::MalformedHeader(_)
        | Error::SizeMismatch { .. }
        | Error::TooFewBlocks { .. } => 1,
        _ => 2,
    }
}

fn load_config(path: &Path, seed: Option<u64>, strategy: Option<&str>) -> Result<SimConfig> {
    let mut cfg = SimConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    if let Some(name) = strategy {
        cfg.run.strategy = name.parse()?;
    }
    Ok(cfg)
}

fn print_summary(report: &MetricsReport) {
    println!("strategy            {}", report.strategy);
    println!("seed                {}", report.seed);
    println!("rounds              {}", report.rounds);
    if report.round_cap_exceeded {
        println!("round cap           exceeded");
    }
    println!("makespan            {:.6} s", report.makespan);
    match report.imbalance {
        Some(i) => println!("max/avg imbalance   {i:.4}"),
        None => println!("max/avg imbalance   n/a"),
    }
    match report.overall_estimation_error {
        Some(e) => println!("estimation error    {e:.4}"),
        None => println!("estimation error    n/a"),
    }
    let accepted = report.donations.iter().filter(|d| d.accepted).count();
    println!(
        "donations           {} offered, {} accepted",
        report.donations.len(),
        accepted
    );
    println!(
        "particles           {} seeded; {} left the domain, {} hit the step cap, {} stalled",
        report.seeded,
        report.terminated_out_of_domain,
        report.terminated_max_steps,
        report.terminated_stopped
    );
    println!("advection steps     {}", report.total_steps);
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed, args.strategy.as_deref())?;
    let report = flowbal::run(&cfg)?;
    print_summary(&report);
    if let Some(out) = args.out {
        export_report(&report, &out)?;
        println!("report written      {}", out.display());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed, None)?;
    println!(
        "{:<16} {:>6} {:>12} {:>9} {:>10} {:>10}",
        "strategy", "rounds", "makespan", "max/avg", "est_error", "donations"
    );
    for strategy in Strategy::ALL {
        let report = flowbal::run_baseline(&cfg, strategy)?;
        let accepted = report.donations.iter().filter(|d| d.accepted).count();
        println!(
            "{:<16} {:>6} {:>12.6} {:>9} {:>10} {:>10}",
            strategy.as_str(),
            report.rounds,
            report.makespan,
            report
                .imbalance
                .map_or_else(|| "n/a".into(), |i| format!("{i:.4}")),
            report
                .overall_estimation_error
                .map_or_else(|| "n/a".into(), |e| format!("{e:.4}")),
            format!("{accepted}/{}", report.donations.len()),
        );
        if let Some(out) = &args.out {
            export_report(&report, &out.join(strategy.as_str()))?;
        }
    }
    Ok(())
}

fn cmd_sweep_order(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed, None)?;
    let max_order = args.max_order.unwrap_or(cfg.estimator.order);
    if max_order > 8 {
        return Err(Error::InvalidConfig(format!(
            "max order {max_order} is above the supported limit 8"
        )));
    }
    let mut rows = Vec::new();
    println!("{:<6} {:>15} {:>6}", "order", "relative_error", "rounds");
    for order in 0..=max_order {
        let mut run_cfg = cfg.clone();
        run_cfg.estimator.order = order;
        let report = flowbal::run(&run_cfg)?;
        let error = report.overall_estimation_error;
        println!(
            "{:<6} {:>15} {:>6}",
            order,
            error.map_or_else(|| "n/a".into(), |e| format!("{e:.6}")),
            report.rounds
        );
        rows.push((order, error));
        if let Some(out) = &args.out {
            export_report(&report, &out.join(format!("order_{order}")))?;
        }
    }
    if let Some(out) = &args.out {
        let mut csv = String::from("order,relative_error\n");
        for (order, error) in rows {
            let text = error.map_or_else(|| "none".into(), |e| format!("{e:.17e}"));
            csv.push_str(&format!("{order},{text}\n"));
        }
        std::fs::write(out.join("sweep_order.csv"), csv)?;
    }
    Ok(())
}

fn check(name: &str, ok: bool, detail: String) -> Result<()> {
    if ok {
        println!("selftest: {name} ok");
        Ok(())
    } else {
        Err(Error::InvariantViolation(format!("{name}: {detail}")))
    }
}

/// Fast condensed versions of the library's correctness oracles.
fn cmd_selftest() -> Result<()> {
    // Transfer-rate fit recovers an exact linear model.
    let mut model = CommCostModel::new(CommPriors::default());
    for x in 1..=25u64 {
        model.record_event(TransferKind::ParticleSend, x, 1e-3 + 1e-5 * x as f64)?;
    }
    let (d, e) = model.fit(TransferKind::ParticleSend)?;
    check(
        "transfer-rate recovery",
        (d - 1e-5).abs() <= 1e-9 * 1e-5 && (e - 1e-3).abs() <= 1e-9 * 1e-3,
        format!("fit gave d={d} e={e}"),
    )?;

    // Analytic policy gradient agrees with central finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ctx = random_context(&mut rng);
        let theta = [
            rng.gen_range(0.2..3.0),
            rng.gen_range(0.2..3.0),
            rng.gen_range(0.2..3.0),
        ];
        let candidates: Vec<Rank> = ctx.friend_workloads.keys().copied().collect();
        let action = candidates[rng.gen_range(0..candidates.len())];
        let probs = policy(theta, &ctx)?;
        let analytic = log_policy_gradient(&ctx, action, &probs)?;
        for k in 0..3 {
            let h = 1e-5;
            let mut plus = theta;
            plus[k] += h;
            let mut minus = theta;
            minus[k] -= h;
            let numeric = (policy(plus, &ctx)?[&action].ln() - policy(minus, &ctx)?[&action].ln())
                / (2.0 * h);
            worst = worst.max((analytic[k] - numeric).abs());
        }
    }
    check(
        "policy gradient",
        worst <= 1e-6,
        format!("worst deviation {worst:.3e}"),
    )?;

    // A two-armed bandit rewarding donation converges past 0.9.
    let ctx = DecisionContext {
        owner: 0,
        block: BlockId(0),
        workload: 1.0,
        friend_workloads: BTreeMap::from([(0, 3.0), (1, 1.0)]),
        rates: TransferRates {
            d_block_send: 0.1,
            d_block_recv: 0.1,
            d_particle_send: 0.0,
            d_particle_recv: 0.0,
        },
        incoming_counts: BTreeMap::new(),
        neighbor_owners: BTreeMap::new(),
    };
    let mut params = PolicyParams::new(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut best = 0.0f64;
    for _ in 0..200 {
        let probs = policy(params.theta, &ctx)?;
        let action: Rank = if rng.gen::<f64>() < probs[&1] { 1 } else { 0 };
        let reward = if action == 1 { 1.0 } else { -1.0 };
        let gradient = log_policy_gradient(&ctx, action, &probs)?;
        update_policy(&mut params, gradient, reward);
        best = best.max(policy(params.theta, &ctx)?[&1]);
        if best > 0.9 {
            break;
        }
    }
    check(
        "bandit convergence",
        best > 0.9,
        format!("donate probability peaked at {best:.3}"),
    )?;

    // Tree estimates equal brute-force grouping over the raw records.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..10 {
        let order = rng.gen_range(0..=4usize);
        let mut tree = TrajectoriesTree::new(BlockId(0), order);
        let mut records: Vec<(TrajectoryPath, u64)> = Vec::new();
        for _ in 0..rng.gen_range(1..=500usize) {
            let path: TrajectoryPath = (0..order).map(|_| BlockId(rng.gen_range(0..16))).collect();
            let steps = rng.gen_range(1..200u64);
            tree.record_advection(&path, steps);
            records.push((path, steps));
        }
        tree.aggregate();
        let mut arrivals: BTreeMap<TrajectoryPath, u64> = BTreeMap::new();
        for _ in 0..4 {
            let path: TrajectoryPath = (0..order).map(|_| BlockId(rng.gen_range(0..16))).collect();
            *arrivals.entry(path).or_insert(0) += rng.gen_range(1..20u64);
        }
        let got = tree.estimate(&arrivals, 1e-4);
        let want = brute_force_estimate(&records, &arrivals, order, 1e-4);
        if (got - want).abs() > 1e-9 * want.abs().max(1e-300) {
            return Err(Error::InvariantViolation(format!(
                "estimator oracle case {case}: tree {got} vs brute force {want}"
            )));
        }
    }
    println!("selftest: estimator oracle ok");

    // A validated mini-run per strategy keeps every invariant.
    for strategy in Strategy::ALL {
        let cfg = SimConfig::from_toml_str(&format!(
            r#"
            [field]
            kind = "double_gyre"

            [decomposition]
            blocks_per_axis = [4, 2]

            [processes]
            count = 4

            [seeding]
            mode = "uniform"
            count = 120

            [tracing]
            max_steps = 96

            [run]
            strategy = "{strategy}"
            seed = 9
            validate = true
            "#
        ))?;
        flowbal::run(&cfg)?;
        println!("selftest: validated {strategy} run ok");
    }
    println!("selftest passed");
    Ok(())
}

fn random_context(rng: &mut ChaCha8Rng) -> DecisionContext {
    let n_friends = rng.gen_range(1..=4usize);
    let mut friend_workloads = BTreeMap::new();
    for f in 0..=n_friends {
        friend_workloads.insert(f, rng.gen_range(0.1..10.0));
    }
    let mut incoming_counts = BTreeMap::new();
    let mut neighbor_owners = BTreeMap::new();
    for j in 0..rng.gen_range(0..=3usize) {
        let id = BlockId(100 + j);
        incoming_counts.insert(id, rng.gen_range(0..20u64));
        neighbor_owners.insert(id, rng.gen_range(0..=n_friends));
    }
    DecisionContext {
        owner: 0,
        block: BlockId(0),
        workload: rng.gen_range(0.1..5.0),
        friend_workloads,
        rates: TransferRates {
            d_block_send: rng.gen_range(0.0..0.1),
            d_block_recv: rng.gen_range(0.0..0.1),
            d_particle_send: rng.gen_range(0.0..1e-3),
            d_particle_recv: rng.gen_range(0.0..1e-3),
        },
        incoming_counts,
        neighbor_owners,
    }
}

fn brute_force_estimate(
    records: &[(TrajectoryPath, u64)],
    arrivals: &BTreeMap<TrajectoryPath, u64>,
    order: usize,
    d_a: f64,
) -> f64 {
    let mut total = 0.0;
    for (path, &count) in arrivals {
        let mut depth = 0;
        for k in (0..=order).rev() {
            if records.iter().any(|(p, _)| p[..k] == path[..k]) {
                depth = k;
                break;
            }
        }
        let group: Vec<u64> = records
            .iter()
            .filter(|(p, _)| p[..depth] == path[..depth])
            .map(|(_, steps)| *steps)
            .collect();
        let mean = group.iter().sum::<u64>() as f64 / group.len() as f64;
        total += count as f64 * d_a * mean;
    }
    total
}

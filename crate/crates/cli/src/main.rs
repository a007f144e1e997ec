use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kinchaos::constants::ARule;
use kinchaos::harness::{
    assumption_report, constants_records, parse_config, run_experiment, ExperimentConfig, Recipe,
};
use kinchaos::potentials::Verdict;

const EXIT_CONFIG: u8 = 2;
const EXIT_ASSUMPTION: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "kinchaos", version, about = "Kinetic Langevin mean-field experiments")]
struct Cli {
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV and JSON outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Exit with status 3 when a sampled assumption fails.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the recipe described by a configuration file.
    Run { config: PathBuf },
    /// Print theorem constants as JSON and as aligned tables.
    Constants(ConstantsArgs),
    /// Sample the structural assumptions for a configured potential pair.
    CheckAssumptions { config: Option<PathBuf> },
    /// Print the version.
    Version,
}

#[derive(clap::Args)]
struct ConstantsArgs {
    /// Configuration to take the potential and model from.
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    c_k: Option<f64>,
    #[arg(long)]
    c_v: Option<f64>,
    #[arg(long)]
    rho_ls: Option<f64>,
    #[arg(long)]
    rho_wls: Option<f64>,
    #[arg(long, value_enum)]
    a_rule: Option<Rule>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    c_v_theta: Option<f64>,
    #[arg(long)]
    w_grad_sup: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Remark,
    Proof,
    Min,
}

struct Failure(u8, String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Version => {
            println!("kinchaos {}", kinchaos::VERSION);
            Ok(())
        }
        Command::Run { config } => run(cli, config),
        Command::Constants(args) => constants(cli, args),
        Command::CheckAssumptions { config } => {
            let cfg = load_or(cli, config.as_deref(), Recipe::Assumptions)?;
            check(&cfg, true, cli.strict)
        }
    }
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure(EXIT_CONFIG, format!("error: cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| {
        Failure(EXIT_CONFIG, format!("error: invalid configuration {}\n{e}", path.display()))
    })?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn load_or(cli: &Cli, path: Option<&Path>, recipe: Recipe) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => load(cli, p),
        None => {
            let mut cfg = ExperimentConfig::baseline(recipe);
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            Ok(cfg)
        }
    }
}

/// Prints the assumption table; with `strict`, a failure is an error.
fn check(cfg: &ExperimentConfig, print: bool, strict: bool) -> Result<(), Failure> {
    let rep = assumption_report(cfg).map_err(|e| Failure(EXIT_NUMERICAL, format!("error: {e}")))?;
    let mut failed = Vec::new();
    for c in &rep.checks {
        let v = match c.verdict {
            Verdict::Pass => "pass",
            Verdict::Fail => {
                failed.push(c.id);
                "FAIL"
            }
            Verdict::NotChecked => "not checked",
        };
        if print {
            println!("A{}  {v:<11}  {}", c.id, c.detail);
        }
    }
    if strict && !failed.is_empty() {
        let ids: Vec<String> = failed.iter().map(|i| format!("A{i}")).collect();
        return Err(Failure(EXIT_ASSUMPTION, format!("assumption violation: {}", ids.join(", "))));
    }
    Ok(())
}

fn run(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let cfg = load(cli, path)?;
    if cli.strict && cfg.recipe != Recipe::Assumptions {
        check(&cfg, false, true)?;
    }
    let report = run_experiment(&cfg).map_err(|e| Failure(EXIT_NUMERICAL, format!("error: {e}")))?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let files = report
        .write(&dir)
        .map_err(|e| Failure(EXIT_NUMERICAL, format!("error: cannot write outputs: {e}")))?;
    println!("recipe {} (seed {})", report.recipe, report.seed);
    for v in &report.verdicts {
        println!("  {v}");
    }
    for n in &report.notes {
        println!("  note: {n}");
    }
    for f in &files {
        println!("  wrote {}", f.display());
    }
    if cfg.recipe == Recipe::Assumptions && cli.strict {
        check(&cfg, false, true)?;
    }
    Ok(())
}

fn constants(cli: &Cli, a: &ConstantsArgs) -> Result<(), Failure> {
    let mut cfg = load_or(cli, a.config.as_deref(), Recipe::ConstantsTable)?;
    if let Some(g) = a.gamma {
        cfg.model.gamma = g;
        if a.sigma.is_none() {
            cfg.model.sigma = g / cfg.model.beta;
        }
    }
    if let Some(s) = a.sigma {
        cfg.model.sigma = s;
    }
    let c = &mut cfg.constants;
    for (flag, slot) in [
        (a.c_k, &mut c.c_k),
        (a.c_v, &mut c.c_v),
        (a.theta, &mut c.theta),
        (a.c_v_theta, &mut c.c_v_theta),
        (a.w_grad_sup, &mut c.w_grad_sup),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    if let Some(r) = a.rho_ls {
        c.rho_ls = r;
    }
    if let Some(r) = a.rho_wls {
        c.rho_wls = r;
    }
    if let Some(r) = a.a_rule {
        c.a_rule = match r {
            Rule::Remark => ARule::Remark,
            Rule::Proof => ARule::Proof,
            Rule::Min => ARule::Min,
        };
    }
    let (records, notes) = constants_records(&cfg).map_err(|e| Failure(EXIT_CONFIG, format!("error: {e}")))?;
    let json = serde_json::to_string_pretty(&records).map_err(|e| Failure(EXIT_NUMERICAL, e.to_string()))?;
    println!("{json}");
    for r in &records {
        println!();
        print!("{}", r.to_table());
    }
    for n in notes {
        println!("note: {n}");
    }
    Ok(())
}

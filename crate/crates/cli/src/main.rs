use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bolted_core::config::load_fleet;
use bolted_core::orchestrator::{AdmitOutcome, Cloud, NodeState, TrustProfile};
use bolted_core::scenario::{self, Report, Scenario};
use bolted_core::state_file;
use clap::{Parser, Subcommand};

/// Exit code when an expectation, invariant or capacity request fails.
const EXIT_FAILED: u8 = 1;
/// Exit code for usage, parse and state errors.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "bolted", version, about = "Desk-scale secure bare-metal cloud simulator")]
struct Cli {
    /// Cloud state file.
    #[arg(long, global = true, default_value = "bolted.state")]
    state: PathBuf,
    /// Seed for nonces, keys and scheduling. Random (and printed) if omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a cloud from a fleet config and persist it.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing state file.
        #[arg(long)]
        force: bool,
    },
    /// Admit free nodes into a tenant enclave, creating the tenant if needed.
    Admit {
        #[arg(long)]
        tenant: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Trust profile: full, attested or unattested.
        #[arg(long)]
        profile: Option<String>,
        /// Private enclave networks for a new tenant.
        #[arg(long, default_value_t = 1)]
        networks: usize,
    },
    /// Return an allocated node to the free pool.
    Release {
        #[arg(long)]
        node: String,
    },
    /// Wipe a rejected node and return it to the free pool.
    Clean {
        #[arg(long)]
        node: String,
    },
    /// Run verifier poll ticks over allocated nodes.
    Tick {
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Show nodes and tenants.
    Status,
    /// Run a scenario script and write its trace and report.
    Scenario {
        #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
        file: Option<PathBuf>,
        /// Name of a built-in scenario.
        #[arg(long)]
        bundled: Option<String>,
        /// Directory for the trace and report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also persist the final cloud to --state.
        #[arg(long)]
        save: bool,
    },
    /// List built-in scenarios.
    Scenarios,
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

fn failed(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FAILED,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn load(path: &Path, seed: Option<u64>) -> Result<Cloud, Failure> {
    if !path.exists() {
        return Err(usage(format!("no state file at {}; run init first", path.display())));
    }
    state_file::load(path, seed_or_random(seed)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn save(cloud: &Cloud, path: &Path) -> Result<(), Failure> {
    state_file::save(cloud, path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Fails with exit 1 if the command left any invariant broken.
fn check_invariants(cloud: &Cloud) -> Result<(), Failure> {
    let v = cloud.violations();
    if v.is_empty() {
        return Ok(());
    }
    for x in &v {
        eprintln!("violation: {x}");
    }
    Err(failed(format!("{} invariant violations", v.len())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let state = cli.state.as_path();
    match cli.command {
        Command::Init { config, force } => {
            if state.exists() && !force {
                return Err(usage(format!(
                    "{} already exists; pass --force to overwrite",
                    state.display()
                )));
            }
            let fleet = load_fleet(&config).map_err(|e| usage(format!("{}: {e}", config.display())))?;
            let cloud = Cloud::new(fleet, seed_or_random(cli.seed)).map_err(usage)?;
            save(&cloud, state)?;
            print!("{}", status(&cloud));
            Ok(())
        }
        Command::Admit {
            tenant,
            count,
            profile,
            networks,
        } => {
            let mut cloud = load(state, cli.seed)?;
            let wanted = profile
                .as_deref()
                .map(TrustProfile::builtin)
                .transpose()
                .map_err(usage)?;
            match (cloud.tenant(&tenant), wanted) {
                (Some(t), Some(p)) if t.profile != p => {
                    return Err(usage(format!(
                        "tenant {tenant} already uses profile {}",
                        t.profile.name
                    )))
                }
                (Some(_), _) => {}
                (None, p) => {
                    let p = p.unwrap_or_else(TrustProfile::full);
                    cloud.add_tenant(&tenant, p, networks).map_err(usage)?;
                }
            }
            let outcomes = cloud.admit(&tenant, count).map_err(usage)?;
            let mut shortfall = 0;
            for o in &outcomes {
                match o {
                    AdmitOutcome::Allocated { uuid } => println!("{uuid} Allocated"),
                    AdmitOutcome::Rejected { uuid, reason } => println!("{uuid} Rejected: {reason}"),
                    AdmitOutcome::Failed { uuid, reason } => {
                        shortfall += 1;
                        println!("{} Failed: {reason}", uuid.as_deref().unwrap_or("-"));
                    }
                    AdmitOutcome::NoFreeNodes => shortfall += 1,
                }
            }
            check_invariants(&cloud)?;
            save(&cloud, state)?;
            if shortfall > 0 {
                println!("NoFreeNodes: {shortfall} of {count} requested nodes not admitted");
                return Err(failed(format!("processed {} of {count} requested nodes", count - shortfall)));
            }
            Ok(())
        }
        Command::Release { node } => {
            let mut cloud = load(state, cli.seed)?;
            cloud.release_node(&node).map_err(usage)?;
            check_invariants(&cloud)?;
            save(&cloud, state)?;
            println!("{node} {}", cloud.state_of(&node).map_or("?".into(), |s| s.to_string()));
            Ok(())
        }
        Command::Clean { node } => {
            let mut cloud = load(state, cli.seed)?;
            cloud.clean_node(&node).map_err(usage)?;
            check_invariants(&cloud)?;
            save(&cloud, state)?;
            println!("{node} {}", cloud.state_of(&node).map_or("?".into(), |s| s.to_string()));
            Ok(())
        }
        Command::Tick { count } => {
            let mut cloud = load(state, cli.seed)?;
            for _ in 0..count {
                let results = cloud.tick().map_err(usage)?;
                for (uuid, r) in results {
                    println!("tick {} {uuid} {r}", cloud.current_tick());
                }
            }
            check_invariants(&cloud)?;
            save(&cloud, state)?;
            Ok(())
        }
        Command::Status => {
            let cloud = load(state, Some(cli.seed.unwrap_or(0)))?;
            print!("{}", status(&cloud));
            Ok(())
        }
        Command::Scenario {
            file,
            bundled,
            out,
            save: persist,
        } => {
            let parsed = match (&file, &bundled) {
                (Some(f), _) => Scenario::load(f).map_err(|e| usage(format!("{}: {e}", f.display())))?,
                (None, Some(name)) => {
                    Scenario::bundled(name).ok_or_else(|| usage(format!("no bundled scenario {name:?}")))?
                }
                (None, None) => return Err(usage("pass --file or --bundled")),
            };
            let report = parsed.run_with_seed(cli.seed.unwrap_or(parsed.seed));
            write_outputs(&report, &out)?;
            print!("{}", report.summary());
            if persist {
                if let Some(cloud) = &report.cloud {
                    save(cloud, state)?;
                }
            }
            if report.passed() {
                Ok(())
            } else {
                Err(failed(format!("scenario {} failed", report.name)))
            }
        }
        Command::Scenarios => {
            for (name, _) in scenario::BUNDLED {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn write_outputs(report: &Report, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let trace = out.join(format!("{}.trace", report.name));
    let summary = out.join(format!("{}.report", report.name));
    std::fs::write(&trace, &report.trace).map_err(|e| usage(format!("{}: {e}", trace.display())))?;
    std::fs::write(&summary, report.summary()).map_err(|e| usage(format!("{}: {e}", summary.display())))?;
    Ok(())
}

fn status(cloud: &Cloud) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "tick {}", cloud.current_tick());
    for r in cloud.records() {
        let _ = write!(s, "{} {} {}", r.uuid, r.state, r.tenant.as_deref().unwrap_or("-"));
        if let Some(reason) = &r.reason {
            let _ = write!(s, " ({reason})");
        }
        s.push('\n');
    }
    for t in cloud.tenants() {
        let held: Vec<&str> = cloud
            .records()
            .filter(|r| r.state == NodeState::Allocated && r.tenant.as_deref() == Some(t.name.as_str()))
            .map(|r| r.uuid.as_str())
            .collect();
        let _ = writeln!(s, "tenant {} profile={} nodes={}", t.name, t.profile.name, held.join(","));
    }
    s
}

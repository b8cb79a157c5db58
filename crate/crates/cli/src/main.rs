use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use sqmd_core::client::Split;
use sqmd_core::sim::{
    run_simulation, sweep, write_comparison_csv, write_metrics_csv, Protocol, RunRecord, SimConfig, SweepSpec,
};

#[derive(Parser)]
#[command(name = "sqmd", version, about = "Run similarity-quality messenger distillation simulations")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's protocol (sqmd, fedmd, d_dist, i_sgd).
    #[arg(long)]
    protocol: Option<Protocol>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write record.json and metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a sweep (a {base, axes} document or a list of configs).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarize a record.json file.
    Inspect { record: PathBuf },
    /// Check a run or sweep config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

/// A config file holds a single run, a sweep spec or a list of runs.
enum ConfigDoc {
    Single(SimConfig),
    Many(Vec<SimConfig>),
}

fn read_config(path: &Path, overrides: Option<&Overrides>) -> Result<ConfigDoc> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    let apply = |c: &mut SimConfig| {
        if let Some(o) = overrides {
            if let Some(seed) = o.seed {
                c.seed = seed;
            }
            if let Some(p) = o.protocol {
                c.protocol = p;
            }
        }
    };
    let doc = if value.get("base").is_some() && value.get("axes").is_some() {
        let mut spec: SweepSpec = serde_json::from_value(value).context("invalid sweep spec")?;
        apply(&mut spec.base);
        ConfigDoc::Many(spec.expand()?)
    } else if value.is_array() {
        let mut configs: Vec<SimConfig> = serde_json::from_value(value).context("invalid config list")?;
        configs.iter_mut().for_each(apply);
        ConfigDoc::Many(configs)
    } else {
        let mut c: SimConfig = serde_json::from_value(value).context("invalid config")?;
        apply(&mut c);
        ConfigDoc::Single(c)
    };
    match &doc {
        ConfigDoc::Single(c) => c.validate()?,
        ConfigDoc::Many(cs) => {
            if cs.is_empty() {
                bail!("the config list is empty");
            }
            for (i, c) in cs.iter().enumerate() {
                c.validate().with_context(|| format!("config {i}"))?;
            }
        }
    }
    Ok(doc)
}

fn base_dir(config: &Path) -> Option<&Path> {
    config.parent().filter(|p| !p.as_os_str().is_empty())
}

fn write_record(record: &RunRecord, dir: &Path, stem: &str) -> Result<()> {
    fs::write(dir.join(format!("{stem}.json")), record.to_json()?)?;
    let csv = fs::File::create(dir.join(format!("{stem}.csv")))?;
    write_metrics_csv(record, csv)?;
    Ok(())
}

fn cmd_run(config: &Path, out: &Path, overrides: &Overrides, quiet: bool) -> Result<()> {
    let c = match read_config(config, Some(overrides))? {
        ConfigDoc::Single(c) => c,
        ConfigDoc::Many(_) => bail!("{} describes a sweep; use the sweep subcommand", config.display()),
    };
    let record = run_simulation(&c, base_dir(config))?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_record(&record, out, "record")?;
    if !quiet {
        println!(
            "{} seed {}: mean accuracy {:.4}, precision {:.4}, recall {:.4}",
            record.protocol,
            record.seed,
            record.summary.mean_accuracy,
            record.summary.mean_precision,
            record.summary.mean_recall
        );
    }
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path, overrides: &Overrides, quiet: bool) -> Result<()> {
    let configs = match read_config(config, Some(overrides))? {
        ConfigDoc::Single(c) => vec![c],
        ConfigDoc::Many(cs) => cs,
    };
    let result = sweep(&configs, base_dir(config))?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for (i, record) in result.records.iter().enumerate() {
        write_record(record, out, &format!("run_{i:03}"))?;
    }
    write_comparison_csv(&result.table, fs::File::create(out.join("comparison.csv"))?)?;
    if !quiet {
        for row in &result.table {
            let label: Vec<String> = row.swept.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{:<40} accuracy {:.4}", label.join(" "), row.mean_accuracy);
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let record: RunRecord = serde_json::from_str(&text).context("not a run record")?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "protocol {}  seed {}  clients {}", record.protocol, record.seed, record.num_clients)?;
    writeln!(out, "config hash {}", record.config_hash)?;
    writeln!(out, "\nfinal test metrics")?;
    writeln!(out, "{:>6} {:>9} {:>9} {:>9} {:>12} {:>4}", "client", "accuracy", "precision", "recall", "quality", "in_Q")?;
    for m in record.summary.final_metrics.iter().filter(|m| m.split == Split::Test) {
        let quality = m.quality_score.map_or("-".to_string(), |g| format!("{g:.3}"));
        writeln!(
            out,
            "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>12} {:>4}",
            m.client_id,
            m.accuracy,
            m.precision,
            m.recall,
            quality,
            if m.in_q { "yes" } else { "no" }
        )?;
    }
    writeln!(
        out,
        "{:>6} {:>9.4} {:>9.4} {:>9.4}",
        "mean", record.summary.mean_accuracy, record.summary.mean_precision, record.summary.mean_recall
    )?;

    let timeline: Vec<_> = record.rounds.iter().filter_map(|r| r.quality_set.as_ref().map(|q| (r.round, q))).collect();
    if timeline.is_empty() {
        writeln!(out, "\nno quality sets recorded")?;
    } else {
        writeln!(out, "\nQ membership (# = in Q, . = not)")?;
        for id in 0..record.num_clients as u32 {
            let row: String = timeline.iter().map(|(_, q)| if q.contains(&id) { '#' } else { '.' }).collect();
            writeln!(out, "{id:>6} {row}")?;
        }
        writeln!(
            out,
            "rounds {}..{}",
            timeline.first().map_or(0, |t| t.0),
            timeline.last().map_or(0, |t| t.0)
        )?;
    }
    Ok(())
}

fn cmd_validate(config: &Path, quiet: bool) -> Result<()> {
    let n = match read_config(config, None)? {
        ConfigDoc::Single(_) => 1,
        ConfigDoc::Many(cs) => cs.len(),
    };
    if !quiet {
        println!("{}: {n} valid configuration(s)", config.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Run { config, out, overrides } => cmd_run(config, out, overrides, cli.quiet),
        Command::Sweep { config, out, overrides } => cmd_sweep(config, out, overrides, cli.quiet),
        Command::Inspect { record } => cmd_inspect(record),
        Command::ValidateConfig { config } => cmd_validate(config, cli.quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `crossdiff`: run, sweep and inspect toy crosscoder model-diffing
//! experiments.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on configuration
//! errors (including bad command-line arguments).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use crossdiff_core::alignment::{
    align, alignment_stats, parse_token_lines, FixtureTokenizer, TokenStream, DEFAULT_MAX_WINDOW,
};
use crossdiff_core::crosscoder::read_checkpoint;
use crossdiff_core::experiment::{
    emit_plot_data, evaluate_model, fit_run_stitch, run_experiment, sweep_dictionary, ArchSpec,
    ExperimentConfig, Preset, ProxySettings, RunConfig,
};
use crossdiff_core::transfer::{stitch_transform_error, write_stitch};
use crossdiff_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "crossdiff",
    version,
    about = "Toy crosscoder model-diffing laboratory"
)]
struct Cli {
    /// JSON configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for commands that write one file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base configuration.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate every (architecture, seed) pair.
    Run,
    /// Repeat the configured architectures over several dictionary sizes.
    Sweep {
        /// Comma-separated sizes; 0.25, 0.5, 1 and 2 times the concept count
        /// when omitted.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Evaluate a checkpoint against the configured concept bank.
    Eval { checkpoint: PathBuf },
    /// Align two token-id files (one document per line).
    Align {
        tokens_a: PathBuf,
        tokens_b: PathBuf,
        /// Fixture tokenizer of stream A: char, word or merge, optionally `+lossy`.
        #[arg(long, default_value = "char")]
        tokenizer_a: String,
        #[arg(long, default_value = "char")]
        tokenizer_b: String,
        #[arg(long, default_value_t = DEFAULT_MAX_WINDOW)]
        max_window: usize,
    },
    /// Fit the affine stitch between the two simulated models.
    Stitch {
        #[arg(long, default_value_t = 20_000)]
        rows: usize,
    },
    /// Emit plot-ready CSVs for a finished experiment directory.
    PlotData { dir: Option<PathBuf> },
    /// Print a checkpoint summary as JSON.
    InspectCheckpoint { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let base = ExperimentConfig::preset(cli.preset.parse::<Preset>()?);
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &base)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Single-run configuration for commands that work on one seed.
fn run_config(cfg: &ExperimentConfig, arch: ArchSpec) -> RunConfig {
    let eff = cfg.effective();
    RunConfig {
        toy: eff.toy,
        arch: arch.effective(),
        train: eff.train,
        eval: eff.eval,
        seed: eff.seeds[0],
        curve_every: None,
        checkpoint_every: None,
        proxy: None,
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
            }
            fs::write(p, text).with_context(|| p.display().to_string())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn summary_table(rows: &[crossdiff_core::experiment::AggregateRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let mut s = String::from("name\tM\tseeds\texcl_recovery\tshared_recovery\tfp_rate\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{} ± {}\t{}\t{}",
            r.name,
            r.dict_size,
            r.seeds,
            fmt(r.recovery_exclusive.mean),
            fmt(r.recovery_exclusive.se),
            fmt(r.recovery_shared.mean),
            fmt(r.false_positive_rate.mean)
        );
    }
    s
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Run => {
            let cfg = load_config(cli)?;
            let out = run_experiment(&cfg)?;
            print!("{}", summary_table(&out.aggregate));
        }
        Command::Sweep { sizes } => {
            let cfg = load_config(cli)?;
            let sizes = if sizes.is_empty() {
                let n = cfg.toy.n_concepts;
                vec![n / 4, n / 2, n, 2 * n]
            } else {
                sizes.clone()
            };
            let out = sweep_dictionary(&cfg, &sizes)?;
            print!("{}", summary_table(&out.aggregate));
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            let model = read_checkpoint::<f32>(checkpoint)?;
            let run = run_config(&cfg, ArchSpec::of_model(&model));
            let report = evaluate_model(&run, &model)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            write_or_print(cli.out.as_deref(), &text)?;
        }
        Command::Align {
            tokens_a,
            tokens_b,
            tokenizer_a,
            tokenizer_b,
            max_window,
        } => {
            let tok_a: FixtureTokenizer = tokenizer_a.parse()?;
            let tok_b: FixtureTokenizer = tokenizer_b.parse()?;
            let read = |p: &PathBuf| -> anyhow::Result<Vec<Vec<u32>>> {
                let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
                Ok(parse_token_lines(&text)?)
            };
            let (docs_a, docs_b) = (read(tokens_a)?, read(tokens_b)?);
            if docs_a.len() != docs_b.len() {
                return Err(Error::config(
                    "tokens_b",
                    format!("{} documents in A but {} in B", docs_a.len(), docs_b.len()),
                )
                .into());
            }
            let mut results = Vec::with_capacity(docs_a.len());
            let mut pairs = String::from("doc,idx_a,idx_b\n");
            for (doc, (a, b)) in docs_a.iter().zip(&docs_b).enumerate() {
                let r = align(
                    TokenStream::new(a, &tok_a),
                    TokenStream::new(b, &tok_b),
                    *max_window,
                )?;
                for &(i, j) in &r.pairs {
                    let _ = writeln!(pairs, "{doc},{i},{j}");
                }
                results.push(r);
            }
            let stats = serde_json::to_string_pretty(&alignment_stats(&results))? + "\n";
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            fs::write(dir.join("pairs.csv"), pairs).context("pairs.csv")?;
            fs::write(dir.join("alignment_stats.json"), &stats).context("alignment_stats.json")?;
            print!("{stats}");
        }
        Command::Stitch { rows } => {
            let cfg = load_config(cli)?;
            let arch = cfg.archs[0].clone();
            let run = run_config(&cfg, arch);
            let settings = ProxySettings {
                rows: *rows,
                ..cfg.proxy.clone().unwrap_or_default()
            };
            let (bank, map) = fit_run_stitch(&run, &settings)?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            write_stitch(&dir.join("stitch.xstc"), &map)?;
            let summary = serde_json::json!({
                "seed": run.seed,
                "rows": rows,
                "fit_mse": map.fit_mse,
                "relative_transform_error": stitch_transform_error(&map, &bank),
            });
            let text = serde_json::to_string_pretty(&summary)? + "\n";
            fs::write(dir.join("stitch.json"), &text).context("stitch.json")?;
            print!("{text}");
        }
        Command::PlotData { dir } => {
            let dir = dir
                .clone()
                .or_else(|| cli.out.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let summary = emit_plot_data(&dir)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            for p in &summary.written {
                println!("{}", p.display());
            }
        }
        Command::InspectCheckpoint { checkpoint } => {
            let model = read_checkpoint::<f32>(checkpoint)?;
            let text = serde_json::to_string_pretty(&model.summary())? + "\n";
            write_or_print(cli.out.as_deref(), &text)?;
        }
    }
    Ok(())
}

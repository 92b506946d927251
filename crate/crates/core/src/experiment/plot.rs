use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::runner::{curve_from_checkpoints, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{curve_csv, EvalReport};
use crate::io::write_file;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotDataSummary {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

struct RunFiles {
    name: String,
    seed: String,
    dir: PathBuf,
    config: RunConfig,
    report: EvalReport,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn collect_runs(out_dir: &Path) -> Result<Vec<RunFiles>> {
    let runs_dir = out_dir.join("runs");
    if !runs_dir.is_dir() {
        return Err(Error::MissingInputs(vec![runs_dir.display().to_string()]));
    }
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for arch_dir in sorted_dirs(&runs_dir)? {
        for seed_dir in sorted_dirs(&arch_dir)? {
            let cfg_path = seed_dir.join("config.json");
            let report_path = seed_dir.join("report.json");
            for p in [&cfg_path, &report_path] {
                if !p.is_file() {
                    missing.push(p.display().to_string());
                }
            }
            if !cfg_path.is_file() || !report_path.is_file() {
                continue;
            }
            let name = |p: &Path| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            };
            runs.push(RunFiles {
                name: name(&arch_dir),
                seed: name(&seed_dir),
                config: read_json(&cfg_path)?,
                report: read_json(&report_path)?,
                dir: seed_dir,
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    if runs.is_empty() {
        return Err(Error::MissingInputs(vec![format!(
            "{}/<name>/<seed>/report.json",
            runs_dir.display()
        )]));
    }
    Ok(runs)
}

/// Writes plot-ready CSVs under `<out_dir>/plots`:
///
/// * `recovery_curves/<name>_<seed>.csv`, recomputed from intermediate
///   checkpoints (runs without them are skipped with a warning);
/// * `relative_norm_histogram.csv`, one line per run and bin;
/// * `fp_breakdown.csv`, the false-positive split per run.
///
/// Re-running rewrites identical bytes.
pub fn emit_plot_data(out_dir: &Path) -> Result<PlotDataSummary> {
    let runs = collect_runs(out_dir)?;
    let plots = out_dir.join("plots");
    let mut summary = PlotDataSummary::default();

    for run in &runs {
        match curve_from_checkpoints(&run.dir)? {
            Some(rows) => {
                let path = plots
                    .join("recovery_curves")
                    .join(format!("{}_{}.csv", run.name, run.seed));
                write_file(&path, curve_csv(&rows).as_bytes())?;
                summary.written.push(path);
            }
            None => summary.warnings.push(format!(
                "{}/{}: no intermediate checkpoints, recovery curve skipped",
                run.name, run.seed
            )),
        }
    }

    let mut hist = String::from("name,arch,dict_size,seed,bin_lo,bin_hi,count\n");
    for run in &runs {
        let h = &run.report.relative_norm_histogram;
        for (b, count) in h.counts.iter().enumerate() {
            let _ = writeln!(
                hist,
                "{},{},{},{},{},{},{}",
                run.name,
                run.config.arch.arch,
                run.report.dict_size,
                run.seed,
                b as f64 / h.bins as f64,
                (b + 1) as f64 / h.bins as f64,
                count
            );
        }
    }
    let path = plots.join("relative_norm_histogram.csv");
    write_file(&path, hist.as_bytes())?;
    summary.written.push(path);

    let mut fp = String::from(
        "name,arch,dict_size,seed,exclusive_classified,true_positive,fp_shared_as_exclusive,fp_no_concept,false_positive_rate\n",
    );
    for run in &runs {
        let c = &run.report.counts;
        let _ = writeln!(
            fp,
            "{},{},{},{},{},{},{},{},{}",
            run.name,
            run.config.arch.arch,
            run.report.dict_size,
            run.seed,
            c.exclusive_classified(),
            c.true_positive,
            c.fp_shared_as_exclusive,
            c.fp_no_concept,
            run.report
                .false_positive_rate
                .map(|v| v.to_string())
                .unwrap_or_default()
        );
    }
    let path = plots.join("fp_breakdown.csv");
    write_file(&path, fp.as_bytes())?;
    summary.written.push(path);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::Architecture;
    use crate::experiment::{run_experiment, ArchSpec, ExperimentConfig};

    fn small(dir: &Path, checkpoints: bool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.toy.n_concepts = 64;
        cfg.toy.d_act = 16;
        cfg.toy.r_exclusive = 0.125;
        cfg.archs = vec![
            ArchSpec::new(Architecture::Standard, 32),
            ArchSpec::new(Architecture::Dfc, 32),
        ];
        cfg.train.steps = 20;
        cfg.train.batch = 32;
        cfg.train.warmup_steps = 2;
        cfg.train.anneal_steps = 5;
        cfg.train.calibration_batches = 1;
        cfg.eval.heldout_rows = 128;
        cfg.seeds = vec![1];
        cfg.curve_every = None;
        cfg.checkpoint_every = checkpoints.then_some(10);
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn three_bundles_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&small(dir.path(), true)).unwrap();
        let first = emit_plot_data(dir.path()).unwrap();
        assert!(first.warnings.is_empty());
        assert_eq!(first.written.len(), 4);
        let bytes: Vec<Vec<u8>> = first.written.iter().map(|p| fs::read(p).unwrap()).collect();
        let second = emit_plot_data(dir.path()).unwrap();
        assert_eq!(second, first);
        for (p, b) in second.written.iter().zip(&bytes) {
            assert_eq!(&fs::read(p).unwrap(), b);
        }
        let hist =
            fs::read_to_string(dir.path().join("plots/relative_norm_histogram.csv")).unwrap();
        assert_eq!(hist.lines().count(), 1 + 2 * 50);
        let curve = fs::read_to_string(dir.path().join("plots/recovery_curves/dfc_1.csv")).unwrap();
        // checkpoints at steps 0, 10, 20
        assert_eq!(curve.lines().count(), 4);
    }

    #[test]
    fn curves_skipped_without_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&small(dir.path(), false)).unwrap();
        let s = emit_plot_data(dir.path()).unwrap();
        assert_eq!(s.warnings.len(), 2);
        assert_eq!(s.written.len(), 2);
    }

    #[test]
    fn missing_inputs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_plot_data(dir.path()),
            Err(Error::MissingInputs(_))
        ));
        fs::create_dir_all(dir.path().join("runs/dfc/0")).unwrap();
        match emit_plot_data(dir.path()) {
            Err(Error::MissingInputs(files)) => assert_eq!(files.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}

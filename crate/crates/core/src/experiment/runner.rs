use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, ExperimentConfig, ProxySettings};
use crate::crosscoder::{
    init_model, read_checkpoint, write_checkpoint, Architecture, CrosscoderModel,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    classify_features, curve_row, evaluate, never_fired, CurveRow, EvalConfig, EvalReport,
};
use crate::io::write_file;
use crate::rng::Stream;
use crate::synthdata::{
    build_concept_bank, ActivationPairBatch, BatchSource, ConceptBank, PairStream, ToyConfig,
};
use crate::training::{compute_normalization, dead_features, train, MetricsRecord, TrainConfig};
use crate::transfer::{fit_stitch, proxy_scores, write_stitch, StitchMap};

/// Everything one (architecture, seed) run needs; written as `config.json`
/// in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub toy: ToyConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub curve_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub proxy: Option<ProxySettings>,
}

impl RunConfig {
    pub fn id(&self) -> String {
        format!("{}/{}", self.arch.name(), self.seed)
    }
}

impl ExperimentConfig {
    /// Effective per-run configurations in (arch, seed) order.
    pub fn run_configs(&self) -> Vec<RunConfig> {
        let eff = self.effective();
        eff.archs
            .iter()
            .flat_map(|a| {
                eff.seeds.iter().map(|&seed| RunConfig {
                    toy: eff.toy.clone(),
                    arch: a.clone(),
                    train: eff.train.clone(),
                    eval: eff.eval.clone(),
                    seed,
                    curve_every: eff.curve_every,
                    checkpoint_every: eff.checkpoint_every,
                    proxy: eff.proxy.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub report: EvalReport,
    /// Recovery-vs-step points (empty unless `curve_every` is set).
    pub curve: Vec<CurveRow>,
    pub metrics: Vec<MetricsRecord>,
    pub model: CrosscoderModel<f32>,
}

fn heldout_batch(bank: &ConceptBank<f32>, cfg: &RunConfig) -> ActivationPairBatch<f32> {
    PairStream::new(bank, cfg.seed, Stream::Heldout, cfg.toy.noise)
        .with_max_resample(cfg.toy.max_resample)
        .batch_at(0, cfg.eval.heldout_rows)
}

fn data_stream<'a>(bank: &'a ConceptBank<f32>, cfg: &RunConfig) -> PairStream<'a, f32> {
    PairStream::new(bank, cfg.seed, Stream::Data, cfg.toy.noise)
        .with_max_resample(cfg.toy.max_resample)
}

/// Curve point whose dead set is the features that never fire on the
/// (already normalized) held-out batch.
fn curve_point(
    step: usize,
    model: &CrosscoderModel<f32>,
    bank: &ConceptBank<f32>,
    heldout: &ActivationPairBatch<f32>,
    eval: &EvalConfig,
) -> Result<CurveRow> {
    let dead = never_fired(model, heldout.x_a.view(), heldout.x_b.view())?;
    curve_row(step, model, bank, eval, &dead)
}

fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir
        .join("checkpoints")
        .join(format!("step_{step:08}.xckp"))
}

/// Builds the bank, trains, checkpoints and evaluates one run. Artifacts
/// go to `run_dir` when given.
pub fn run_single(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<RunResult> {
    let bank = build_concept_bank::<f32>(&cfg.toy, cfg.seed)?;
    let d = cfg.toy.d_act;
    let mut model = init_model::<f32>(
        cfg.arch.arch,
        d,
        d,
        cfg.train.k_final,
        cfg.arch.partition_layout(),
        cfg.train.init_decoder_norm,
        cfg.seed,
    )?;
    model.dsf_multiplier = cfg.arch.dsf_multiplier;
    let heldout_raw = heldout_batch(&bank, cfg);
    let mut source = data_stream(&bank, cfg);

    let mut curve = Vec::new();
    let outcome = train(model, &mut source, &cfg.train, |done, model, state| {
        let last = done == cfg.train.steps;
        if let Some(every) = cfg.curve_every {
            if done % every == 0 || last {
                let mut h = heldout_raw.clone();
                h.scale(state.scale_a, state.scale_b);
                curve.push(curve_point(done, model, &bank, &h, &cfg.eval)?);
            }
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, run_dir) {
            if done % every == 0 || last {
                write_checkpoint(&checkpoint_path(dir, done), model)?;
            }
        }
        Ok(())
    })?;

    let model = outcome.model;
    let state = outcome.state;
    let mut dead = vec![false; model.dict_size()];
    for j in dead_features(&state, cfg.train.dead_window()) {
        dead[j] = true;
    }
    let scales = (state.scale_a, state.scale_b);
    let mut report = evaluate(&model, &bank, &heldout_raw, scales, &cfg.eval, Some(&dead))?;

    let mut stitch = None;
    if let Some(p) = &cfg.proxy {
        let (_, map) = fit_run_stitch(cfg, p)?;
        let classes = classify_features(&model, cfg.eval.theta_low, cfg.eval.theta_high, &dead);
        report.exclusivity_proxy = Some(proxy_scores(&model, &map, &bank, &classes)?);
        stitch = Some(map);
    }

    if let Some(dir) = run_dir {
        write_file(&dir.join("config.json"), to_pretty(cfg)?.as_bytes())?;
        write_checkpoint(&dir.join("checkpoints").join("final.xckp"), &model)?;
        let mut lines = String::new();
        for m in &outcome.metrics {
            lines.push_str(&serde_json::to_string(m)?);
            lines.push('\n');
        }
        write_file(&dir.join("metrics.jsonl"), lines.as_bytes())?;
        write_file(&dir.join("report.json"), to_pretty(&report)?.as_bytes())?;
        if !curve.is_empty() {
            crate::evaluation::write_curve_csv(&dir.join("curve.csv"), &curve)?;
        }
        if let Some(map) = &stitch {
            write_stitch(&dir.join("stitch.xstc"), map)?;
        }
    }

    Ok(RunResult {
        config: cfg.clone(),
        report,
        curve,
        metrics: outcome.metrics,
        model,
    })
}

/// Normalization scales a run with this configuration would calibrate.
fn calibrated_scales(bank: &ConceptBank<f32>, cfg: &RunConfig) -> Result<(f32, f32)> {
    let mut source = data_stream(bank, cfg);
    let calibration = (0..cfg.train.calibration_batches)
        .map(|_| source.next_batch(cfg.train.batch))
        .collect::<Result<Vec<_>>>()?;
    let sample = ActivationPairBatch::concat(&calibration)?;
    compute_normalization(&sample, cfg.toy.d_act, cfg.toy.d_act)
}

/// Evaluates a stored model against the run's concept bank and held-out
/// stream. Without training counters, features that never fire on the
/// held-out batch count as dead.
pub fn evaluate_model(cfg: &RunConfig, model: &CrosscoderModel<f32>) -> Result<EvalReport> {
    let bank = build_concept_bank::<f32>(&cfg.toy, cfg.seed)?;
    let scales = calibrated_scales(&bank, cfg)?;
    evaluate(
        model,
        &bank,
        &heldout_batch(&bank, cfg),
        scales,
        &cfg.eval,
        None,
    )
}

/// Fits the stitch of the run's concept bank on `settings.rows` pairs.
pub fn fit_run_stitch(
    cfg: &RunConfig,
    settings: &ProxySettings,
) -> Result<(ConceptBank<f32>, StitchMap)> {
    let bank = build_concept_bank::<f32>(&cfg.toy, cfg.seed)?;
    let stream = PairStream::new(&bank, cfg.seed, Stream::Stitch, cfg.toy.noise)
        .with_max_resample(cfg.toy.max_resample);
    let fit_rows = stream.batch_at(0, settings.rows);
    let check_rows = stream.batch_at(1, settings.rows.min(cfg.eval.heldout_rows));
    let map = fit_stitch(&fit_rows, &check_rows, &settings.stitch)?;
    Ok((bank, map))
}

fn to_pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Recomputes a run's recovery curve from its intermediate checkpoints.
/// `None` when the run saved none.
pub fn curve_from_checkpoints(run_dir: &Path) -> Result<Option<Vec<CurveRow>>> {
    let dir = run_dir.join("checkpoints");
    let mut steps: Vec<(usize, PathBuf)> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let step = name
                    .strip_prefix("step_")?
                    .strip_suffix(".xckp")?
                    .parse()
                    .ok()?;
                Some((step, e.path()))
            })
            .collect(),
        Err(_) => return Ok(None),
    };
    if steps.is_empty() {
        return Ok(None);
    }
    steps.sort();
    let text = fs::read_to_string(run_dir.join("config.json"))
        .map_err(|e| Error::io(run_dir.join("config.json"), e))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    let bank = build_concept_bank::<f32>(&cfg.toy, cfg.seed)?;
    let (sa, sb) = calibrated_scales(&bank, &cfg)?;
    let mut heldout = heldout_batch(&bank, &cfg);
    heldout.scale(sa, sb);
    let mut rows = Vec::with_capacity(steps.len());
    for (step, path) in steps {
        let mut model = read_checkpoint::<f32>(&path)?;
        model.dsf_multiplier = cfg.arch.dsf_multiplier;
        rows.push(curve_point(step, &model, &bank, &heldout, &cfg.eval)?);
    }
    Ok(Some(rows))
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: Option<f64>,
    /// `None` with fewer than two values.
    pub se: Option<f64>,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: None,
                se: None,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = (n > 1).then(|| {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Self {
            mean: Some(mean),
            se,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub name: String,
    pub arch: Architecture,
    pub dict_size: usize,
    pub seeds: usize,
    pub recovery_exclusive: MeanSe,
    pub recovery_shared: MeanSe,
    pub false_positive_rate: MeanSe,
    pub fve_a: MeanSe,
    pub fve_b: MeanSe,
    pub dead_fraction: MeanSe,
}

/// One row per architecture entry, in configuration order. Undefined
/// per-seed metrics are left out of the mean.
pub fn aggregate(runs: &[RunResult]) -> Vec<AggregateRow> {
    let mut names: Vec<String> = Vec::new();
    for r in runs {
        let n = r.config.arch.name();
        if !names.contains(&n) {
            names.push(n);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let group: Vec<&RunResult> = runs
                .iter()
                .filter(|r| r.config.arch.name() == name)
                .collect();
            let stat = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
                MeanSe::of(group.iter().filter_map(|r| f(&r.report)))
            };
            AggregateRow {
                name,
                arch: group[0].config.arch.arch,
                dict_size: group[0].config.arch.dict_size,
                seeds: group.len(),
                recovery_exclusive: stat(&|r| r.counts.recovery_exclusive()),
                recovery_shared: stat(&|r| r.recovery_shared),
                false_positive_rate: stat(&|r| r.false_positive_rate),
                fve_a: stat(&|r| Some(r.fve_a)),
                fve_b: stat(&|r| Some(r.fve_b)),
                dead_fraction: stat(&|r| Some(r.dead_fraction)),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let metrics = [
        "recovery_exclusive",
        "recovery_shared",
        "false_positive_rate",
        "fve_a",
        "fve_b",
        "dead_fraction",
    ];
    let mut s = String::from("name,arch,dict_size,seeds");
    for m in metrics {
        let _ = write!(s, ",{m}_mean,{m}_se");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.name, r.arch, r.dict_size, r.seeds);
        for v in [
            r.recovery_exclusive,
            r.recovery_shared,
            r.false_positive_rate,
            r.fve_a,
            r.fve_b,
            r.dead_fraction,
        ] {
            let _ = write!(s, ",{},{}", cell(v.mean), cell(v.se));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::config("threads", format!("cannot start worker pool: {e}")))
}

/// Runs every (architecture, seed) pair on a worker pool and writes
/// `runs/<name>/<seed>/...`, `config.json` and `aggregate.csv` under
/// `cfg.output_dir`. Outputs do not depend on the thread count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    write_file(
        &out.join("config.json"),
        cfg.effective().to_json()?.as_bytes(),
    )?;
    let jobs = cfg.run_configs();
    let results: Vec<Result<RunResult>> = pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .map(|job| {
                let dir = out
                    .join("runs")
                    .join(job.arch.name())
                    .join(job.seed.to_string());
                run_single(job, Some(&dir)).map_err(|e| Error::Run {
                    run: job.id(),
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&runs);
    write_file(&out.join("aggregate.csv"), aggregate_csv(&rows).as_bytes())?;
    Ok(ExperimentOutcome {
        runs,
        aggregate: rows,
    })
}

/// Repeats every architecture entry of `cfg` at each dictionary size in
/// `sizes` (entries named `<name>-m<M>`) and writes `sweep.csv` next to
/// the usual experiment artifacts.
pub fn sweep_dictionary(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<ExperimentOutcome> {
    if sizes.is_empty() {
        return Err(Error::config("sizes", "must not be empty"));
    }
    let mut swept = cfg.clone();
    swept.archs = cfg
        .archs
        .iter()
        .flat_map(|a| {
            sizes.iter().map(move |&m| ArchSpec {
                dict_size: m,
                name: Some(format!("{}-m{m}", a.name())),
                ..a.clone()
            })
        })
        .collect();
    let outcome = run_experiment(&swept)?;
    write_file(
        &cfg.output_dir.join("sweep.csv"),
        sweep_csv(&outcome.runs).as_bytes(),
    )?;
    Ok(outcome)
}

/// Columns `arch,M,seed,recovery_excl,recovery_shared,fpr`.
pub fn sweep_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("arch,M,seed,recovery_excl,recovery_shared,fpr\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.config.arch.arch,
            r.config.arch.dict_size,
            r.config.seed,
            cell(r.report.counts.recovery_exclusive()),
            cell(r.report.recovery_shared),
            cell(r.report.false_positive_rate)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.toy.n_concepts = 64;
        cfg.toy.d_act = 16;
        cfg.toy.r_exclusive = 0.125;
        cfg.archs = vec![
            ArchSpec::new(Architecture::Standard, 32),
            ArchSpec::new(Architecture::Dfc, 32),
        ];
        cfg.train.steps = 40;
        cfg.train.batch = 32;
        cfg.train.warmup_steps = 5;
        cfg.train.anneal_steps = 10;
        cfg.train.calibration_batches = 2;
        cfg.eval.heldout_rows = 256;
        cfg.seeds = vec![3, 4];
        cfg.curve_every = Some(10);
        cfg.checkpoint_every = Some(20);
        cfg.threads = Some(2);
        cfg
    }

    #[test]
    fn mean_and_standard_error() {
        let m = MeanSe::of([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, Some(2.5));
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((m.se.unwrap() - sd / 2.0).abs() < 1e-12);
        assert_eq!(MeanSe::of([7.0]).se, None);
        assert_eq!(MeanSe::of(std::iter::empty()).mean, None);
    }

    #[test]
    fn experiment_tree_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().to_path_buf();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.runs.len(), 4);
        assert_eq!(out.aggregate.len(), 2);
        for name in ["standard", "dfc"] {
            for seed in [3, 4] {
                let run = dir.path().join("runs").join(name).join(seed.to_string());
                for f in ["config.json", "metrics.jsonl", "report.json", "curve.csv"] {
                    assert!(run.join(f).is_file(), "{name}/{seed}/{f}");
                }
                assert!(run.join("checkpoints/final.xckp").is_file());
                assert!(run.join("checkpoints/step_00000020.xckp").is_file());
                let text = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
                assert_eq!(text.lines().count(), 40);
            }
        }
        let csv = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        // curve points at 0, 10, 20, 30, 40
        assert_eq!(out.runs[0].curve.len(), 5);
    }

    #[test]
    fn reruns_are_byte_identical_across_thread_counts() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = a.path().to_path_buf();
        run_experiment(&cfg).unwrap();
        cfg.output_dir = b.path().to_path_buf();
        cfg.threads = Some(1);
        run_experiment(&cfg).unwrap();
        for rel in [
            "runs/dfc/4/report.json",
            "runs/standard/3/checkpoints/final.xckp",
            "aggregate.csv",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn checkpoint_curve_matches_training_curve() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.archs.truncate(1);
        cfg.seeds = vec![3];
        cfg.checkpoint_every = Some(10);
        let out = run_experiment(&cfg).unwrap();
        let from_disk = curve_from_checkpoints(&dir.path().join("runs/standard/3"))
            .unwrap()
            .unwrap();
        assert_eq!(from_disk, out.runs[0].curve);
    }

    #[test]
    fn sweep_rows_per_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.curve_every = None;
        cfg.checkpoint_every = None;
        cfg.train.steps = 12;
        let out = sweep_dictionary(&cfg, &[16, 32]).unwrap();
        assert_eq!(out.runs.len(), 8);
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
        assert!(dir.path().join("runs/dfc-m16/4/report.json").is_file());
    }

    #[test]
    fn run_errors_name_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.train.lr = 1e30;
        cfg.train.warmup_steps = 0;
        match run_experiment(&cfg) {
            Err(Error::Run { run, .. }) => assert!(run.contains('/')),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("diverging run succeeded"),
        }
    }
}

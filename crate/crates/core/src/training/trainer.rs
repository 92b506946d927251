use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{compute_normalization, loss_and_grads, mask_outliers, select_rows, Adam, TrainConfig};
use crate::crosscoder::CrosscoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{ActivationPairBatch, BatchSource};

const RECENT_CAPACITY: usize = 100;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_recon_a: f64,
    pub loss_recon_b: f64,
    pub loss_aux: f64,
    pub k: usize,
    pub lr: f64,
    pub dead_frac: f64,
    /// `None` when the batch has zero variance.
    pub fve_a: Option<f64>,
    pub fve_b: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub adam: Adam<S>,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Rows seen since each feature last had a nonzero activation.
    pub tokens_since_fire: Vec<u64>,
    pub scale_a: S,
    pub scale_b: S,
    pub recent: VecDeque<MetricsRecord>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: &CrosscoderModel<S>, cfg: &TrainConfig, scale_a: S, scale_b: S) -> Self {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        Self {
            adam: Adam::new(&shapes, cfg.beta1, cfg.beta2, cfg.eps),
            step: 0,
            tokens_since_fire: vec![0; model.dict_size()],
            scale_a,
            scale_b,
            recent: VecDeque::with_capacity(RECENT_CAPACITY),
        }
    }

    /// Mean total reconstruction loss over the buffered recent steps.
    pub fn recent_recon_loss(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| {
            self.recent
                .iter()
                .map(|r| r.loss_recon_a + r.loss_recon_b)
                .sum::<f64>()
                / self.recent.len() as f64
        })
    }
}

/// Features that have not fired for at least `window` rows.
pub fn dead_features<S>(state: &TrainState<S>, window: u64) -> Vec<usize> {
    state
        .tokens_since_fire
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub model: CrosscoderModel<S>,
    pub state: TrainState<S>,
    pub metrics: Vec<MetricsRecord>,
}

fn fve<S: Scalar>(x: ArrayView2<'_, S>, sse: f64) -> Option<f64> {
    if x.nrows() == 0 {
        return None;
    }
    let mean = x.mean_axis(Axis(0))?;
    let var: f64 = x
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .zip(mean.iter())
                .map(|(&v, &m)| (v - m).as_f64().powi(2))
                .sum::<f64>()
        })
        .sum();
    (var > 0.0).then(|| 1.0 - sse / var)
}

fn max_abs<S: Scalar>(x: &Array2<S>) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
}

/// Applies one optimizer step on a raw (unnormalized) batch.
pub fn train_step<S: Scalar>(
    model: &mut CrosscoderModel<S>,
    state: &mut TrainState<S>,
    mut batch: ActivationPairBatch<S>,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let step = state.step;
    batch.scale(state.scale_a, state.scale_b);
    let keep = mask_outliers(&batch, cfg.outlier_factor);
    let x_a = select_rows(batch.x_a.view(), &keep);
    let x_b = select_rows(batch.x_b.view(), &keep);
    let k = cfg.k_at(step).min(model.dict_size());
    let dead = dead_features(state, cfg.dead_window());

    let out = loss_and_grads(
        model,
        x_a.view(),
        x_b.view(),
        k,
        &dead,
        cfg.alpha_aux,
        cfg.k_aux,
    )?;
    let main = out.parts.recon_a + out.parts.recon_b;
    if !main.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: format!(
                "rows {} (kept {}), max |x_a| {:.4e}, max |x_b| {:.4e}, recon_a {}, recon_b {}",
                batch.rows(),
                x_a.nrows(),
                max_abs(&x_a),
                max_abs(&x_b),
                out.parts.recon_a,
                out.parts.recon_b
            ),
        });
    }

    let lr = cfg.lr_at(step);
    state
        .adam
        .step(model.param_slices_mut(), out.grads.slices(), lr);
    model.enforce_structural_zeros();

    let rows = x_a.nrows() as u64;
    for t in state.tokens_since_fire.iter_mut() {
        *t = t.saturating_add(rows);
    }
    for &(_, j) in &out.selected {
        state.tokens_since_fire[j] = 0;
    }
    state.step += 1;

    let dead_after = dead_features(state, cfg.dead_window()).len();
    let record = MetricsRecord {
        step,
        loss_recon_a: out.parts.recon_a,
        loss_recon_b: out.parts.recon_b,
        loss_aux: out.parts.aux,
        k,
        lr,
        dead_frac: dead_after as f64 / model.dict_size() as f64,
        fve_a: fve(x_a.view(), out.parts.recon_a),
        fve_b: fve(x_b.view(), out.parts.recon_b),
    };
    if state.recent.len() == RECENT_CAPACITY {
        state.recent.pop_front();
    }
    state.recent.push_back(record.clone());
    Ok(record)
}

/// Trains `model` for `cfg.steps` steps.
///
/// The first `cfg.calibration_batches` batches of `source` fix the
/// normalization scales. `observer` runs once before the first step with
/// `completed = 0` and after every step with the number of completed steps.
pub fn train<S, B, F>(
    mut model: CrosscoderModel<S>,
    source: &mut B,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome<S>>
where
    S: Scalar,
    B: BatchSource<S> + ?Sized,
    F: FnMut(usize, &CrosscoderModel<S>, &TrainState<S>) -> Result<()>,
{
    cfg.validate()?;
    let calibration = (0..cfg.calibration_batches)
        .map(|_| source.next_batch(cfg.batch))
        .collect::<Result<Vec<_>>>()?;
    let sample = ActivationPairBatch::concat(&calibration)?;
    let (scale_a, scale_b) = compute_normalization(&sample, model.d_a(), model.d_b())?;
    let mut state = TrainState::new(&model, cfg, scale_a, scale_b);

    observer(0, &model, &state)?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = source.next_batch(cfg.batch)?;
        metrics.push(train_step(&mut model, &mut state, batch, cfg)?);
        observer(state.step, &model, &state)?;
    }
    Ok(TrainOutcome {
        model,
        state,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::{init_model, Architecture, PartitionLayout};
    use crate::rng::Stream;
    use crate::synthdata::{build_concept_bank, PairStream, ToyConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            steps: 300,
            warmup_steps: 10,
            batch: 32,
            k_final: 4,
            k_initial: 8,
            anneal_steps: 50,
            k_aux: 16,
            calibration_batches: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dead_feature_rules() {
        let m = init_model(
            Architecture::Standard,
            4,
            4,
            1,
            PartitionLayout::standard(3),
            0.4,
            0,
        )
        .unwrap();
        let mut st = TrainState::new(&m, &TrainConfig::default(), 1.0, 1.0);
        st.tokens_since_fire = vec![0, 99, 100];
        assert_eq!(dead_features(&st, 100), vec![2]);
    }

    #[test]
    fn overfits_single_row() {
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup_steps: 0,
            k_initial: 4,
            k_final: 4,
            anneal_steps: 0,
            alpha_aux: 0.0,
            outlier_factor: f64::INFINITY,
            ..tiny_cfg()
        };
        let mut m = init_model(
            Architecture::Standard,
            4,
            4,
            4,
            PartitionLayout::standard(8),
            0.4,
            2,
        )
        .unwrap();
        let row = ndarray::array![[1.0, -0.5, 0.25, 0.0]];
        let batch = ActivationPairBatch::new(row.clone(), row.clone() * 2.0).unwrap();
        let mut st = TrainState::new(&m, &cfg, 1.0, 1.0);
        let first = train_step(&mut m, &mut st, batch.clone(), &cfg).unwrap();
        let mut last = first.clone();
        for _ in 0..1500 {
            last = train_step(&mut m, &mut st, batch.clone(), &cfg).unwrap();
        }
        let l0 = first.loss_recon_a + first.loss_recon_b;
        let l1 = last.loss_recon_a + last.loss_recon_b;
        assert!(l1 < 1e-4 * l0.max(1.0), "{l0} -> {l1}");
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let toy = ToyConfig {
            n_concepts: 32,
            d_act: 16,
            ..ToyConfig::desk()
        };
        let bank = build_concept_bank::<f32>(&toy, 1).unwrap();
        let cfg = tiny_cfg();
        let run = || {
            let layout = PartitionLayout::for_arch(Architecture::Dfc, 32, 0.05, 0.1);
            let m = init_model(Architecture::Dfc, 16, 16, 4, layout, 0.4, 3).unwrap();
            let mut src = PairStream::new(&bank, 7, Stream::Data, toy.noise);
            train(m, &mut src, &cfg, |_, _, _| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.param_slices(), b.model.param_slices());
        let head: f64 = a.metrics[..20]
            .iter()
            .map(|r| r.loss_recon_a + r.loss_recon_b)
            .sum();
        let tail: f64 = a.metrics[280..]
            .iter()
            .map(|r| r.loss_recon_a + r.loss_recon_b)
            .sum();
        assert!(tail < head);
        assert_eq!(a.metrics[0].lr, 0.0);
        assert_eq!(a.metrics[0].k, 8);
        assert_eq!(a.metrics[299].k, 4);
    }

    #[test]
    fn observer_errors_propagate() {
        let toy = ToyConfig {
            n_concepts: 16,
            d_act: 8,
            ..ToyConfig::desk()
        };
        let bank = build_concept_bank::<f64>(&toy, 1).unwrap();
        let m = init_model(
            Architecture::Standard,
            8,
            8,
            2,
            PartitionLayout::standard(8),
            0.4,
            3,
        )
        .unwrap();
        let mut src = PairStream::new(&bank, 7, Stream::Data, 0.0);
        let err = train(m, &mut src, &tiny_cfg(), |s, _, _| {
            if s == 3 {
                Err(Error::io("/nope", std::io::Error::other("boom")))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("/nope"));
    }
}

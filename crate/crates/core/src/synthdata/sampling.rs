use ndarray::{s, Array2};
use rand::Rng as _;

use super::ConceptBank;
use crate::error::{Error, Result};
use crate::rng::{normal, stream_rng, Rng, Stream};
use crate::scalar::Scalar;

/// Active concepts of one row: `(concept id, scale)` in increasing id order.
pub type ActiveSet<S> = Vec<(usize, S)>;

/// Paired activations of the two models, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPairBatch<S> {
    pub x_a: Array2<S>,
    pub x_b: Array2<S>,
    /// Ground-truth active concepts per row, when known.
    pub active_sets: Option<Vec<ActiveSet<S>>>,
}

impl<S: Scalar> ActivationPairBatch<S> {
    pub fn new(x_a: Array2<S>, x_b: Array2<S>) -> Result<Self> {
        if x_a.nrows() != x_b.nrows() {
            return Err(Error::Shape(format!(
                "x_a has {} rows but x_b has {}",
                x_a.nrows(),
                x_b.nrows()
            )));
        }
        Ok(Self {
            x_a,
            x_b,
            active_sets: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.x_a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn d_a(&self) -> usize {
        self.x_a.ncols()
    }

    pub fn d_b(&self) -> usize {
        self.x_b.ncols()
    }

    /// Vertical concatenation; ground-truth sets are kept only if every part has them.
    pub fn concat(parts: &[ActivationPairBatch<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero batches".into()))?;
        let (d_a, d_b) = (first.d_a(), first.d_b());
        if parts.iter().any(|p| p.d_a() != d_a || p.d_b() != d_b) {
            return Err(Error::Shape("batches disagree on dimensions".into()));
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut x_a = Array2::zeros((rows, d_a));
        let mut x_b = Array2::zeros((rows, d_b));
        let mut at = 0;
        for p in parts {
            x_a.slice_mut(s![at..at + p.rows(), ..]).assign(&p.x_a);
            x_b.slice_mut(s![at..at + p.rows(), ..]).assign(&p.x_b);
            at += p.rows();
        }
        let active_sets = parts
            .iter()
            .map(|p| p.active_sets.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect());
        Ok(Self {
            x_a,
            x_b,
            active_sets,
        })
    }

    /// Scales both sides in place (used for activation normalization).
    pub fn scale(&mut self, scale_a: S, scale_b: S) {
        self.x_a.mapv_inplace(|x| x * scale_a);
        self.x_b.mapv_inplace(|x| x * scale_b);
    }
}

/// Draws the active concepts of `rows` rows.
///
/// Bernoulli(p_i) draws are generated per concept by geometric skipping over
/// the rows, which has the same joint law as independent per-row draws but
/// costs O(n + active). A row with no active concept is redrawn up to
/// `max_resample` times, then falls back to the single most probable
/// concept. Scales are `Uniform[0, 1)` per active entry.
pub fn sample_active_sets<S: Scalar>(
    bank: &ConceptBank<S>,
    rows: usize,
    max_resample: usize,
    rng: &mut Rng,
) -> Vec<ActiveSet<S>> {
    let mut active: Vec<Vec<usize>> = vec![Vec::new(); rows];
    for (i, &p) in bank.probs.iter().enumerate() {
        if p >= 1.0 {
            active.iter_mut().for_each(|a| a.push(i));
            continue;
        }
        let log_q = (-p).ln_1p();
        let mut pos = 0usize;
        loop {
            let u: f64 = rng.gen();
            let gap = ((1.0 - u).ln() / log_q).floor();
            if !(gap < (rows - pos) as f64) {
                break;
            }
            pos += gap as usize;
            active[pos].push(i);
            pos += 1;
            if pos >= rows {
                break;
            }
        }
    }

    for set in active.iter_mut().filter(|a| a.is_empty()) {
        for _ in 0..max_resample {
            for (i, &p) in bank.probs.iter().enumerate() {
                if rng.gen::<f64>() < p {
                    set.push(i);
                }
            }
            if !set.is_empty() {
                break;
            }
        }
        if set.is_empty() {
            set.push(most_probable(&bank.probs));
        }
    }

    active
        .into_iter()
        .map(|set| {
            set.into_iter()
                .map(|i| (i, S::of(rng.gen::<f64>())))
                .collect()
        })
        .collect()
}

fn most_probable(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Builds activations from explicit active sets:
/// `x_a = sum s_i c_i` over A-observable concepts and
/// `x_b = sum s_i c''_i` over B-observable ones, plus `N(0, noise^2)` noise.
pub fn synthesize<S: Scalar>(
    bank: &ConceptBank<S>,
    active_sets: Vec<ActiveSet<S>>,
    noise: f64,
    rng: &mut Rng,
) -> ActivationPairBatch<S> {
    let rows = active_sets.len();
    let d = bank.d_act();
    let mut x_a = Array2::<S>::zeros((rows, d));
    let mut x_b = Array2::<S>::zeros((rows, d));
    for (r, set) in active_sets.iter().enumerate() {
        for &(i, scale) in set {
            let kind = bank.partition[i];
            if kind.observable_by_a() {
                x_a.row_mut(r).scaled_add(scale, &bank.concepts.row(i));
            }
            if let Some(br) = bank.b_row_of(i) {
                x_b.row_mut(r).scaled_add(scale, &bank.concepts_b.row(br));
            }
        }
    }
    if noise > 0.0 {
        x_a.mapv_inplace(|x| x + S::of(noise * normal(rng)));
        x_b.mapv_inplace(|x| x + S::of(noise * normal(rng)));
    }
    ActivationPairBatch {
        x_a,
        x_b,
        active_sets: Some(active_sets),
    }
}

/// One batch of synthetic activation pairs.
pub fn sample_batch<S: Scalar>(
    bank: &ConceptBank<S>,
    rows: usize,
    noise: f64,
    max_resample: usize,
    rng: &mut Rng,
) -> ActivationPairBatch<S> {
    let sets = sample_active_sets(bank, rows, max_resample, rng);
    synthesize(bank, sets, noise, rng)
}

/// Anything that yields activation batches on demand.
pub trait BatchSource<S> {
    fn next_batch(&mut self, rows: usize) -> Result<ActivationPairBatch<S>>;
}

/// Deterministic stream of synthetic batches. Batch `i` is drawn from its
/// own substream `(seed, stream, i)`, so batches can be produced in any
/// order or in parallel with identical results.
#[derive(Debug, Clone)]
pub struct PairStream<'a, S> {
    bank: &'a ConceptBank<S>,
    seed: u64,
    stream: Stream,
    noise: f64,
    max_resample: usize,
    keep_sets: bool,
    next_index: u64,
}

impl<'a, S: Scalar> PairStream<'a, S> {
    pub fn new(bank: &'a ConceptBank<S>, seed: u64, stream: Stream, noise: f64) -> Self {
        Self {
            bank,
            seed,
            stream,
            noise,
            max_resample: 8,
            keep_sets: false,
            next_index: 0,
        }
    }

    pub fn with_max_resample(mut self, max_resample: usize) -> Self {
        self.max_resample = max_resample;
        self
    }

    /// Keep ground-truth active sets on produced batches.
    pub fn keep_active_sets(mut self, keep: bool) -> Self {
        self.keep_sets = keep;
        self
    }

    pub fn batch_at(&self, index: u64, rows: usize) -> ActivationPairBatch<S> {
        let mut rng = stream_rng(self.seed, self.stream, index);
        let mut batch = sample_batch(self.bank, rows, self.noise, self.max_resample, &mut rng);
        if !self.keep_sets {
            batch.active_sets = None;
        }
        batch
    }
}

impl<S: Scalar> BatchSource<S> for PairStream<'_, S> {
    fn next_batch(&mut self, rows: usize) -> Result<ActivationPairBatch<S>> {
        let batch = self.batch_at(self.next_index, rows);
        self.next_index += 1;
        Ok(batch)
    }
}

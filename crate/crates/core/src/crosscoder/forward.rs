use std::cmp::Ordering;
use std::ops::Range;

use ndarray::{Array2, ArrayView2, Zip};

use super::CrosscoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// DSF designated pool: its share of the TopK budget is multiplied by
/// `multiplier` relative to its share of the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignatedPool {
    pub range: Range<usize>,
    pub multiplier: f64,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    pub pre_acts: Array2<S>,
    pub acts: Array2<S>,
    pub recon_a: Array2<S>,
    pub recon_b: Array2<S>,
    pub topk_mask: Array2<bool>,
    /// Selected `(row, feature)` entries in row-major order.
    pub selected: Vec<(usize, usize)>,
}

fn check_inputs<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
) -> Result<()> {
    if x_a.ncols() != model.d_a() || x_b.ncols() != model.d_b() {
        return Err(Error::Shape(format!(
            "inputs are {}/{} wide, model expects {}/{}",
            x_a.ncols(),
            x_b.ncols(),
            model.d_a(),
            model.d_b()
        )));
    }
    if x_a.nrows() != x_b.nrows() {
        return Err(Error::Shape(format!(
            "x_a has {} rows but x_b has {}",
            x_a.nrows(),
            x_b.nrows()
        )));
    }
    Ok(())
}

/// Pre-activations: `c_a * (x_a W_enc^A) + c_b * (x_b W_enc^B) + b_enc`,
/// where `(c_a, c_b)` is `(1/2, 1/2)` for averaged features and `(1, 0)` or
/// `(0, 1)` for DFC exclusive features.
pub fn encode<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
) -> Result<Array2<S>> {
    check_inputs(model, x_a, x_b)?;
    let (c_a, c_b) = model.encoder_coefficients();
    let mut pre = x_a.dot(&model.w_enc_a);
    let p_b = x_b.dot(&model.w_enc_b);
    for (mut row, row_b) in pre.rows_mut().into_iter().zip(p_b.rows()) {
        Zip::from(&mut row)
            .and(&row_b)
            .and(&c_a)
            .and(&c_b)
            .and(&model.b_enc)
            .for_each(|p, &q, &ca, &cb, &bias| *p = ca * *p + cb * q + bias);
    }
    Ok(pre)
}

// Descending value, then ascending row-major position.
fn rank_order<S: Scalar>(a: &(S, usize), b: &(S, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn select_pool<S: Scalar>(
    pre: ArrayView2<'_, S>,
    cols: &[Range<usize>],
    budget: usize,
    out: &mut Vec<(usize, usize)>,
) {
    if budget == 0 {
        return;
    }
    let m = pre.ncols();
    let mut candidates: Vec<(S, usize)> = Vec::new();
    for (r, row) in pre.rows().into_iter().enumerate() {
        for j in cols.iter().flat_map(|c| c.clone()) {
            let v = row[j];
            if v > S::zero() {
                candidates.push((v, r * m + j));
            }
        }
    }
    if candidates.len() > budget {
        candidates.select_nth_unstable_by(budget - 1, rank_order);
        candidates.truncate(budget);
    }
    out.extend(candidates.into_iter().map(|(_, flat)| (flat / m, flat % m)));
}

/// Entries kept by BatchTopK: the `rows * k_effective` largest positive
/// pre-activations over the whole batch, ties broken by (row, column).
///
/// With a designated pool, the pool gets a budget of
/// `round(rows * k_effective * multiplier * |pool| / M)` and the remaining
/// features share the residual budget.
pub fn select_topk<S: Scalar>(
    pre: ArrayView2<'_, S>,
    k_effective: usize,
    designated: Option<&DesignatedPool>,
) -> Vec<(usize, usize)> {
    let (rows, m) = pre.dim();
    let total = rows * k_effective;
    let mut selected = Vec::with_capacity(total.min(rows * m));
    match designated {
        Some(pool) if !pool.range.is_empty() => {
            let share = pool.range.len() as f64 / m as f64;
            let pool_budget = ((total as f64 * share * pool.multiplier).round() as usize)
                .min(total)
                .min(rows * pool.range.len());
            select_pool(pre, &[pool.range.clone()], pool_budget, &mut selected);
            let outside = [0..pool.range.start, pool.range.end..m];
            select_pool(pre, &outside, total - pool_budget, &mut selected);
        }
        _ => select_pool(pre, &[0..m], total, &mut selected),
    }
    selected.sort_unstable();
    selected
}

/// BatchTopK activation: `(acts, mask)` with `acts = pre * mask`.
pub fn batch_topk<S: Scalar>(
    pre: ArrayView2<'_, S>,
    k_effective: usize,
    designated: Option<&DesignatedPool>,
) -> (Array2<S>, Array2<bool>) {
    let selected = select_topk(pre, k_effective, designated);
    let mut acts = Array2::zeros(pre.dim());
    let mut mask = Array2::from_elem(pre.dim(), false);
    for &(r, j) in &selected {
        acts[[r, j]] = pre[[r, j]];
        mask[[r, j]] = true;
    }
    (acts, mask)
}

/// Dense decode: `(acts W_dec^A + b_dec^A, acts W_dec^B + b_dec^B)`.
pub fn decode<S: Scalar>(
    model: &CrosscoderModel<S>,
    acts: ArrayView2<'_, S>,
) -> Result<(Array2<S>, Array2<S>)> {
    if acts.ncols() != model.dict_size() {
        return Err(Error::Shape(format!(
            "acts have {} columns, dictionary has {}",
            acts.ncols(),
            model.dict_size()
        )));
    }
    let recon_a = acts.dot(&model.w_dec_a) + &model.b_dec_a;
    let recon_b = acts.dot(&model.w_dec_b) + &model.b_dec_b;
    Ok((recon_a, recon_b))
}

/// Encode, BatchTopK with budget `k_effective`, and a sparse decode over the
/// selected entries.
pub fn forward<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
    k_effective: usize,
) -> Result<ForwardTrace<S>> {
    let pre_acts = encode(model, x_a, x_b)?;
    let rows = pre_acts.nrows();
    let pool = model.designated_pool();
    let selected = select_topk(pre_acts.view(), k_effective, pool.as_ref());

    let mut acts = Array2::zeros(pre_acts.dim());
    let mut topk_mask = Array2::from_elem(pre_acts.dim(), false);
    let mut recon_a = Array2::zeros((rows, model.d_a()));
    let mut recon_b = Array2::zeros((rows, model.d_b()));
    for mut r in recon_a.rows_mut() {
        r.assign(&model.b_dec_a);
    }
    for mut r in recon_b.rows_mut() {
        r.assign(&model.b_dec_b);
    }
    for &(r, j) in &selected {
        let v = pre_acts[[r, j]];
        acts[[r, j]] = v;
        topk_mask[[r, j]] = true;
        recon_a.row_mut(r).scaled_add(v, &model.w_dec_a.row(j));
        recon_b.row_mut(r).scaled_add(v, &model.w_dec_b.row(j));
    }
    Ok(ForwardTrace {
        pre_acts,
        acts,
        recon_a,
        recon_b,
        topk_mask,
        selected,
    })
}

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::crosscoder::{forward, Architecture, CrosscoderModel};
use crate::error::Result;
use crate::scalar::Scalar;

/// Gradients, one tensor per model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub w_enc_a: Array2<S>,
    pub w_enc_b: Array2<S>,
    pub b_enc: Array1<S>,
    pub w_dec_a: Array2<S>,
    pub w_dec_b: Array2<S>,
    pub b_dec_a: Array1<S>,
    pub b_dec_b: Array1<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &CrosscoderModel<S>) -> Self {
        Self {
            w_enc_a: Array2::zeros(model.w_enc_a.dim()),
            w_enc_b: Array2::zeros(model.w_enc_b.dim()),
            b_enc: Array1::zeros(model.b_enc.len()),
            w_dec_a: Array2::zeros(model.w_dec_a.dim()),
            w_dec_b: Array2::zeros(model.w_dec_b.dim()),
            b_dec_a: Array1::zeros(model.b_dec_a.len()),
            b_dec_b: Array1::zeros(model.b_dec_b.len()),
        }
    }

    /// Flat views in the same order as [`CrosscoderModel::param_slices`].
    pub fn slices(&self) -> [&[S]; 7] {
        [
            self.w_enc_a.as_slice().expect("standard layout"),
            self.w_enc_b.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.w_dec_a.as_slice().expect("standard layout"),
            self.w_dec_b.as_slice().expect("standard layout"),
            self.b_dec_a.as_slice().expect("standard layout"),
            self.b_dec_b.as_slice().expect("standard layout"),
        ]
    }

    // DFC: cross-partition rows and columns are not parameters.
    // DSF: a designated row is a single parameter shared by both decoders.
    fn apply_structure(&mut self, model: &CrosscoderModel<S>) {
        match model.arch {
            Architecture::Standard => {}
            Architecture::Dfc => {
                for i in model.layout.a_exclusive() {
                    self.w_dec_b.row_mut(i).fill(S::zero());
                    self.w_enc_b.column_mut(i).fill(S::zero());
                }
                for i in model.layout.b_exclusive() {
                    self.w_dec_a.row_mut(i).fill(S::zero());
                    self.w_enc_a.column_mut(i).fill(S::zero());
                }
            }
            Architecture::Dsf => {
                for i in model.layout.designated_range() {
                    let sum = &self.w_dec_a.row(i) + &self.w_dec_b.row(i);
                    self.w_dec_a.row_mut(i).assign(&sum);
                    self.w_dec_b.row_mut(i).assign(&sum);
                }
            }
        }
    }
}

/// Loss components. `total = recon_a + recon_b + alpha * aux`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub recon_a: f64,
    pub recon_b: f64,
    pub aux: f64,
    pub total: f64,
}

/// The AuxK selection and the (detached) residuals it reconstructs.
#[derive(Debug, Clone)]
pub struct AuxTrace<S> {
    pub residual_a: Array2<S>,
    pub residual_b: Array2<S>,
    /// `(row, feature)` entries kept by the per-row top-`k_aux` over dead
    /// features.
    pub selected: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LossOutput<S> {
    pub parts: LossParts,
    pub grads: Gradients<S>,
    /// BatchTopK selection used in the forward pass.
    pub selected: Vec<(usize, usize)>,
    pub aux: Option<AuxTrace<S>>,
    /// Reconstructions under `selected`.
    pub recon_a: Array2<S>,
    pub recon_b: Array2<S>,
}

/// Loss and straight-through gradients for one normalized, outlier-masked
/// batch.
///
/// The reconstruction term sums squared errors over rows; AuxK reconstructs
/// the detached residual `x - x_hat` from the top-`k_aux` dead features of
/// each row, ranked by encoder response to the residual.
pub fn loss_and_grads<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
    k_effective: usize,
    dead: &[usize],
    alpha_aux: f64,
    k_aux: usize,
) -> Result<LossOutput<S>> {
    let trace = forward(model, x_a, x_b, k_effective)?;
    let aux = if alpha_aux > 0.0 && !dead.is_empty() && k_aux > 0 {
        let residual_a = &x_a - &trace.recon_a;
        let residual_b = &x_b - &trace.recon_b;
        let selected = aux_select(model, residual_a.view(), residual_b.view(), dead, k_aux);
        Some(AuxTrace {
            residual_a,
            residual_b,
            selected,
        })
    } else {
        None
    };
    Ok(loss_given_pre(
        model,
        x_a,
        x_b,
        &trace.pre_acts,
        trace.selected,
        aux,
        alpha_aux,
    ))
}

/// Loss and gradients under a fixed TopK selection and fixed AuxK trace.
/// Gradients are exact derivatives of the returned loss for parameter
/// perturbations that leave the selection unchanged.
pub fn loss_with_selection<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
    selected: Vec<(usize, usize)>,
    aux: Option<AuxTrace<S>>,
    alpha_aux: f64,
) -> LossOutput<S> {
    let pre = crate::crosscoder::encode(model, x_a, x_b).expect("shapes checked by caller");
    loss_given_pre(model, x_a, x_b, &pre, selected, aux, alpha_aux)
}

fn loss_given_pre<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
    pre: &Array2<S>,
    selected: Vec<(usize, usize)>,
    aux: Option<AuxTrace<S>>,
    alpha_aux: f64,
) -> LossOutput<S> {
    let (c_a, c_b) = model.encoder_coefficients();
    let rows = x_a.nrows();
    let two = S::of(2.0);

    let mut recon_a = Array2::zeros((rows, model.d_a()));
    let mut recon_b = Array2::zeros((rows, model.d_b()));
    for mut r in recon_a.rows_mut() {
        r.assign(&model.b_dec_a);
    }
    for mut r in recon_b.rows_mut() {
        r.assign(&model.b_dec_b);
    }
    for &(r, j) in &selected {
        let v = pre[[r, j]];
        recon_a.row_mut(r).scaled_add(v, &model.w_dec_a.row(j));
        recon_b.row_mut(r).scaled_add(v, &model.w_dec_b.row(j));
    }
    let diff_a = &recon_a - &x_a;
    let diff_b = &recon_b - &x_b;
    let loss_a: f64 = diff_a.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    let loss_b: f64 = diff_b.iter().map(|v| v.as_f64() * v.as_f64()).sum();

    let mut g = Gradients::zeros_like(model);
    let g_a = diff_a.mapv(|v| two * v);
    let g_b = diff_b.mapv(|v| two * v);
    g.b_dec_a = g_a.sum_axis(Axis(0));
    g.b_dec_b = g_b.sum_axis(Axis(0));
    let acts: Vec<S> = selected.iter().map(|&(r, j)| pre[[r, j]]).collect();
    backprop_features(
        model,
        &selected,
        &acts,
        g_a.view(),
        g_b.view(),
        x_a,
        x_b,
        (&c_a, &c_b),
        S::one(),
        &mut g,
        true,
    );

    let mut aux_loss = 0.0;
    if let Some(trace) = &aux {
        let alpha = S::of(alpha_aux);
        let z = aux_activations(model, trace, &c_a, &c_b);
        let mut e_hat_a = Array2::<S>::zeros(trace.residual_a.dim());
        let mut e_hat_b = Array2::<S>::zeros(trace.residual_b.dim());
        for (&(r, j), &v) in trace.selected.iter().zip(&z) {
            e_hat_a.row_mut(r).scaled_add(v, &model.w_dec_a.row(j));
            e_hat_b.row_mut(r).scaled_add(v, &model.w_dec_b.row(j));
        }
        let da = &e_hat_a - &trace.residual_a;
        let db = &e_hat_b - &trace.residual_b;
        let l: f64 = da
            .iter()
            .chain(db.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        if l.is_finite() {
            aux_loss = l;
            let ga = da.mapv(|v| two * v);
            let gb = db.mapv(|v| two * v);
            backprop_features(
                model,
                &trace.selected,
                &z,
                ga.view(),
                gb.view(),
                trace.residual_a.view(),
                trace.residual_b.view(),
                (&c_a, &c_b),
                alpha,
                &mut g,
                false,
            );
        }
    }
    g.apply_structure(model);

    LossOutput {
        parts: LossParts {
            recon_a: loss_a,
            recon_b: loss_b,
            aux: aux_loss,
            total: loss_a + loss_b + alpha_aux * aux_loss,
        },
        grads: g,
        selected,
        aux,
        recon_a,
        recon_b,
    }
}

// Accumulates `scale *` gradients through `out_a = sum_j act[r, j] * d_j^A`
// (likewise B) and through the linear encoder that produced `act`.
#[allow(clippy::too_many_arguments)]
fn backprop_features<S: Scalar>(
    model: &CrosscoderModel<S>,
    selected: &[(usize, usize)],
    acts: &[S],
    g_out_a: ArrayView2<'_, S>,
    g_out_b: ArrayView2<'_, S>,
    in_a: ArrayView2<'_, S>,
    in_b: ArrayView2<'_, S>,
    (c_a, c_b): (&Array1<S>, &Array1<S>),
    scale: S,
    g: &mut Gradients<S>,
    with_bias: bool,
) {
    let m = model.dict_size();
    let mut dpre = Vec::with_capacity(selected.len());
    for (&(r, j), &a) in selected.iter().zip(acts) {
        let v = a * scale;
        g.w_dec_a.row_mut(j).scaled_add(v, &g_out_a.row(r));
        g.w_dec_b.row_mut(j).scaled_add(v, &g_out_b.row(r));
        let d = scale
            * (g_out_a.row(r).dot(&model.w_dec_a.row(j))
                + g_out_b.row(r).dot(&model.w_dec_b.row(j)));
        if with_bias {
            g.b_enc[j] += d;
        }
        dpre.push(d);
    }
    for (w, input, coef) in [
        (&mut g.w_enc_a, in_a.view(), c_a),
        (&mut g.w_enc_b, in_b.view(), c_b),
    ] {
        let width = input.ncols();
        let flat = w.as_slice_mut().expect("standard layout");
        for (&(r, j), &d) in selected.iter().zip(&dpre) {
            if coef[j] == S::zero() {
                continue;
            }
            let c = d * coef[j];
            for t in 0..width {
                flat[t * m + j] += c * input[[r, t]];
            }
        }
    }
}

fn aux_response<S: Scalar>(
    model: &CrosscoderModel<S>,
    e_a: ArrayView2<'_, S>,
    e_b: ArrayView2<'_, S>,
    r: usize,
    j: usize,
    c_a: &Array1<S>,
    c_b: &Array1<S>,
) -> S {
    let mut v = S::zero();
    if c_a[j] != S::zero() {
        v += c_a[j] * e_a.row(r).dot(&model.w_enc_a.column(j));
    }
    if c_b[j] != S::zero() {
        v += c_b[j] * e_b.row(r).dot(&model.w_enc_b.column(j));
    }
    v
}

fn aux_activations<S: Scalar>(
    model: &CrosscoderModel<S>,
    trace: &AuxTrace<S>,
    c_a: &Array1<S>,
    c_b: &Array1<S>,
) -> Vec<S> {
    trace
        .selected
        .iter()
        .map(|&(r, j)| {
            aux_response(
                model,
                trace.residual_a.view(),
                trace.residual_b.view(),
                r,
                j,
                c_a,
                c_b,
            )
        })
        .collect()
}

// Per row, the `k_aux` dead features with the largest positive response
// (ties by feature index).
fn aux_select<S: Scalar>(
    model: &CrosscoderModel<S>,
    e_a: ArrayView2<'_, S>,
    e_b: ArrayView2<'_, S>,
    dead: &[usize],
    k_aux: usize,
) -> Vec<(usize, usize)> {
    let (c_a, c_b) = model.encoder_coefficients();
    let ca = Array1::from_iter(dead.iter().map(|&j| c_a[j]));
    let cb = Array1::from_iter(dead.iter().map(|&j| c_b[j]));
    let resp = e_a.dot(&model.w_enc_a.select(Axis(1), dead)) * &ca
        + e_b.dot(&model.w_enc_b.select(Axis(1), dead)) * &cb;
    let k = k_aux.min(dead.len());
    let mut out = Vec::new();
    let mut cand: Vec<(S, usize)> = Vec::with_capacity(dead.len());
    for (r, row) in resp.rows().into_iter().enumerate() {
        cand.clear();
        cand.extend(
            row.iter()
                .zip(dead)
                .filter(|(v, _)| **v > S::zero())
                .map(|(&v, &j)| (v, j)),
        );
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, |a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            cand.truncate(k);
        }
        let mut feats: Vec<usize> = cand.iter().map(|c| c.1).collect();
        feats.sort_unstable();
        out.extend(feats.into_iter().map(|j| (r, j)));
    }
    out
}

// SPDX-License-Identifier: Apache-2.0

use ndarray::{Array2, ArrayView2};

use super::{Mode, Network, NnError};

fn check_step(h: f64) -> Result<(), NnError> {
    if (1e-6..=1e-3).contains(&h) {
        Ok(())
    } else {
        Err(NnError::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Largest `|analytic - central| / max(1, |central|)` over every parameter of
/// `net`, for the scalar `loss_fn(forward_train(batch))`.
///
/// `loss_fn` returns the loss and its gradient with respect to the network
/// output.
pub fn finite_diff_check<F>(
    net: &Network,
    batch: ArrayView2<f64>,
    loss_fn: F,
    h: f64,
) -> Result<f64, NnError>
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    check_step(h)?;
    let (out, cache) = net.forward(batch, Mode::Train)?;
    let (_, grad_out) = loss_fn(out.view());
    let (grads, _) = net.backward(&cache, grad_out.view())?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut probe = net.clone();
    let eval = |probe: &Network| -> Result<f64, NnError> {
        let (y, _) = probe.forward(batch, Mode::Train)?;
        Ok(loss_fn(y.view()).0)
    };
    let mut worst = 0.0f64;
    for (t, tensor) in analytic.iter().enumerate() {
        for (j, &a) in tensor.iter().enumerate() {
            let orig = probe.params()[t][j];
            probe.params_mut()[t][j] = orig + h;
            let plus = eval(&probe)?;
            probe.params_mut()[t][j] = orig - h;
            let minus = eval(&probe)?;
            probe.params_mut()[t][j] = orig;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Same as [`finite_diff_check`] but over the input batch entries.
pub fn finite_diff_check_input<F>(
    net: &Network,
    batch: ArrayView2<f64>,
    loss_fn: F,
    h: f64,
) -> Result<f64, NnError>
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    check_step(h)?;
    let (out, cache) = net.forward(batch, Mode::Train)?;
    let (_, grad_out) = loss_fn(out.view());
    let (_, grad_in) = net.backward(&cache, grad_out.view())?;
    let mut x = batch.to_owned();
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + h;
        let plus = loss_fn(net.forward(x.view(), Mode::Train)?.0.view()).0;
        x[[r, c]] = orig - h;
        let minus = loss_fn(net.forward(x.view(), Mode::Train)?.0.view()).0;
        x[[r, c]] = orig;
        worst = worst.max(rel_err(grad_in[[r, c]], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

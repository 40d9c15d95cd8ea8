use std::sync::Arc;

use super::{check_divisible, lowres_operators, stripe_offsets, stripe_seed, DegradeError, Operator, SeverityBank};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Checks that every `[.., K]` row of a weight tensor is a distribution.
pub fn validate_rows<T: Real>(w: &[T], k: usize, tol: f64) -> Result<(), DegradeError> {
    for (row, r) in w.chunks(k).enumerate() {
        let sum: f64 = r.iter().map(|v| v.f64()).sum();
        if (sum - 1.0).abs() > tol || r.iter().any(|v| v.f64() < -tol) {
            return Err(DegradeError::RowSum { row, sum });
        }
    }
    Ok(())
}

/// One bank operator applied to an `[N, 1, H, W]` batch, clamped to `[0, 1]`.
/// Stripe patterns are drawn per image from `stripe_seed(batch_seed, n, step)`
/// and enter as constants.
pub fn operator_on_batch<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    op: &Operator,
    batch_seed: u64,
    step: usize,
) -> Result<Var, DegradeError> {
    op.validate()?;
    let shape = g.shape(x).to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let y = match *op {
        Operator::Identity => return Ok(x),
        Operator::Stripe { amplitude } => {
            let mut pattern = Vec::with_capacity(g.data(x).len());
            for i in 0..n {
                let offsets = stripe_offsets::<T>(w, amplitude, stripe_seed(batch_seed, i, step));
                for _ in 0..shape[1] * h {
                    pattern.extend_from_slice(&offsets);
                }
            }
            let p = g.constant(Tensor::new(shape, pattern)?);
            g.add(x, p)?
        }
        Operator::LowRes { scale } => {
            check_divisible(h, w, scale)?;
            let (a, b) = lowres_operators::<T>(h, w, scale);
            g.separable(x, Arc::new(a), Arc::new(b))?
        }
        Operator::Contrast { factor, gamma } => g.contrast(x, factor, gamma)?,
    };
    Ok(g.clamp01(y))
}

/// Multi-step soft composition. `weights` is `[N, steps, K]` with
/// `K = bank.n_ops()`; step `i` replaces the running image by the
/// `weights[:, i, :]`-weighted mixture of every bank operator applied to it.
pub fn compose<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weights: Var,
    bank: &SeverityBank,
    batch_seed: u64,
) -> Result<Var, DegradeError> {
    let ops = bank.operators();
    let ws = g.shape(weights).to_vec();
    if ws.len() != 3 || ws[2] != ops.len() {
        return Err(DegradeError::OperatorCount {
            got: ws.last().copied().unwrap_or(0),
            expected: ops.len(),
        });
    }
    validate_rows(g.data(weights), ops.len(), 1e-5)?;
    let mut cur = x;
    for step in 0..ws[1] {
        let branches = ops
            .iter()
            .map(|op| operator_on_batch(g, cur, op, batch_seed, step))
            .collect::<Result<Vec<_>, _>>()?;
        cur = g.mix(weights, step, &branches)?;
    }
    Ok(cur)
}

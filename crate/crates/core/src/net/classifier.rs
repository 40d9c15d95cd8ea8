use super::{check_finite, conv, zeros, Init, ModelConfig, NetError};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Three stride-2 convolutions, global pooling and a zero-initialised linear
/// head emitting `steps * n_ops` logits, so the initial mixture is uniform.
pub fn init_classifier(cfg: &ModelConfig, steps: usize, n_ops: usize, seed: u64) -> ParamStore<f32> {
    let mut init = Init::new(seed);
    let mut p = ParamStore::new();
    let mut c_in = 1;
    for (i, &c) in cfg.classifier_widths.iter().enumerate() {
        p.insert(format!("cls.conv{i}.w"), init.conv(c, c_in, 3, cfg.slope));
        p.insert(format!("cls.conv{i}.b"), zeros(&[c]));
        c_in = c;
    }
    p.insert("cls.head.w", zeros(&[c_in, steps * n_ops]));
    p.insert("cls.head.b", zeros(&[steps * n_ops]));
    p
}

/// Per-image mixture weights `[N, steps, n_ops]`, softmax-normalised per step.
pub fn classifier_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &ModelConfig,
    steps: usize,
    n_ops: usize,
    trainable: bool,
) -> Result<Var, NetError> {
    let n = g.shape(x)[0];
    let mut h = x;
    for i in 0..cfg.classifier_widths.len() {
        h = conv(g, store, &format!("cls.conv{i}"), h, 2, 1, trainable)?;
        h = g.leaky_relu(h, T::of(cfg.slope));
    }
    let pooled = g.global_avg_pool(h)?;
    let w = g.param(store, "cls.head.w", trainable)?;
    let b = g.param(store, "cls.head.b", trainable)?;
    let logits = g.matmul(pooled, w)?;
    let logits = g.add_row_bias(logits, b)?;
    if g.shape(logits)[1] != steps * n_ops {
        return Err(NetError::Config(format!(
            "classifier head emits {} logits, expected {steps} x {n_ops}",
            g.shape(logits)[1]
        )));
    }
    check_finite(g, logits, "classifier logits")?;
    let rows = g.reshape(logits, &[n * steps, n_ops])?;
    let probs = g.softmax(rows)?;
    Ok(g.reshape(probs, &[n, steps, n_ops])?)
}

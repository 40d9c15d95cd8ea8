use super::{check_finite, conv, zeros, Init, ModelConfig, NetError, Pass};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Output of [`enhancer_forward`]; `norms` lists the batch-norm nodes by
/// parameter prefix so the caller can fold their statistics into the store.
pub struct Enhanced {
    pub output: Var,
    pub norms: Vec<(String, Var)>,
}

pub fn init_enhancer(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let c = cfg.width;
    let mut init = Init::new(seed);
    let mut p = ParamStore::new();
    let mut conv = |p: &mut ParamStore<f32>, name: &str, o: usize, i: usize, k: usize, bias: bool| {
        p.insert(format!("{name}.w"), init.conv(o, i, k, cfg.slope));
        if bias {
            p.insert(format!("{name}.b"), zeros(&[o]));
        }
    };
    conv(&mut p, "enh.stem", c, 1, 3, true);
    for pair in 0..2 {
        let pre = format!("enh.pair{pair}");
        conv(&mut p, &format!("{pre}.stm.down"), c, c, 3, true);
        conv(&mut p, &format!("{pre}.stm.full"), c, c, 3, true);
        conv(&mut p, &format!("{pre}.stm.fuse"), c, 3 * c, 1, true);
        conv(&mut p, &format!("{pre}.ssm.conv"), c, c, 3, false);
        p.insert(format!("{pre}.ssm.bn.gamma"), Tensor::full(&[c], 1.0).trainable());
        p.insert(format!("{pre}.ssm.bn.beta"), zeros(&[c]));
        p.insert(format!("{pre}.ssm.bn.mean"), Tensor::zeros(&[c]));
        p.insert(format!("{pre}.ssm.bn.var"), Tensor::full(&[c], 1.0));
    }
    conv(&mut p, "enh.dense1", c, 2 * c, 1, true);
    conv(&mut p, "enh.fuse", c, 3 * c, 1, true);
    // Zero output head: the untrained enhancer is the identity.
    p.insert("enh.out.w", zeros(&[1, c, 3, 3]));
    p.insert("enh.out.b", zeros(&[1]));
    p
}

/// Scale transform: a half-resolution branch and a full-resolution branch,
/// densely concatenated with the input and fused by a 1x1 convolution.
pub fn stm_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    f: Var,
    cfg: &ModelConfig,
    trainable: bool,
) -> Result<Var, NetError> {
    let slope = T::of(cfg.slope);
    let d = g.down2(f)?;
    let d = conv(g, store, &format!("{prefix}.down"), d, 1, 1, trainable)?;
    let d = g.leaky_relu(d, slope);
    let d = g.up2(d)?;
    let r = conv(g, store, &format!("{prefix}.full"), f, 1, 1, trainable)?;
    let r = g.leaky_relu(r, slope);
    let cat = g.concat_channels(&[f, d, r])?;
    conv(g, store, &format!("{prefix}.fuse"), cat, 1, 0, trainable)
}

/// Spiking separation: rate-coded LIF spikes, convolution, threshold-scaled
/// batch norm, temporal mean, added back onto the input. Returns the output
/// and the batch-norm node.
pub fn ssm_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    f: Var,
    cfg: &ModelConfig,
    pass: Pass,
) -> Result<(Var, Var), NetError> {
    let spikes = g.lif(f, cfg.lif())?;
    let c = conv(g, store, &format!("{prefix}.conv"), spikes, 1, 1, pass.trainable)?;
    let bn_prefix = format!("{prefix}.bn");
    let norm = if pass.train_bn {
        g.batch_norm(c, None, cfg.bn_eps)?
    } else {
        let buffer = |name: &str| {
            store
                .get(&format!("{bn_prefix}.{name}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| NetError::Config(format!("missing buffer {bn_prefix}.{name}")))
        };
        let (mean, var) = (buffer("mean")?, buffer("var")?);
        g.batch_norm(c, Some((&mean, &var)), cfg.bn_eps)?
    };
    let scaled = g.scale(norm, T::of(cfg.v_th));
    let gamma = g.param(store, &format!("{bn_prefix}.gamma"), pass.trainable)?;
    let beta = g.param(store, &format!("{bn_prefix}.beta"), pass.trainable)?;
    let a = g.channel_affine(scaled, gamma, beta)?;
    let m = g.group_mean(a, cfg.time_steps)?;
    Ok((g.add(f, m)?, norm))
}

/// Stem, two densely connected STM -> SSM pairs, fusion, output convolution
/// and a global residual, clamped to `[0, 1]`.
pub fn enhancer_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &ModelConfig,
    pass: Pass,
) -> Result<Enhanced, NetError> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(NetError::Config(format!(
            "enhancer input must be [N, 1, H, W] with H, W divisible by 4, got {s:?}"
        )));
    }
    let slope = T::of(cfg.slope);
    let tr = pass.trainable;
    let mut norms = Vec::new();

    let h0 = conv(g, store, "enh.stem", x, 1, 1, tr)?;
    let h0 = g.leaky_relu(h0, slope);
    let mut pair = |g: &mut Graph<T>, i: usize, input: Var| -> Result<Var, NetError> {
        let pre = format!("enh.pair{i}");
        let t = stm_forward(g, store, &format!("{pre}.stm"), input, cfg, tr)?;
        let (out, norm) = ssm_forward(g, store, &format!("{pre}.ssm"), t, cfg, pass)?;
        norms.push((format!("{pre}.ssm.bn"), norm));
        Ok(out)
    };
    let h1 = pair(g, 0, h0)?;
    let cat = g.concat_channels(&[h0, h1])?;
    let in2 = conv(g, store, "enh.dense1", cat, 1, 0, tr)?;
    let h2 = pair(g, 1, in2)?;
    let cat = g.concat_channels(&[h0, h1, h2])?;
    let f = conv(g, store, "enh.fuse", cat, 1, 0, tr)?;
    let f = g.leaky_relu(f, slope);
    let r = conv(g, store, "enh.out", f, 1, 1, tr)?;
    check_finite(g, r, "enhancer residual")?;
    let y = g.add(x, r)?;
    Ok(Enhanced {
        output: g.clamp01(y),
        norms,
    })
}

/// Folds the batch statistics of training-mode batch norms into the running
/// buffers (unbiased variance).
pub fn update_running_stats<T: Real>(
    store: &mut ParamStore<T>,
    g: &Graph<T>,
    norms: &[(String, Var)],
    momentum: f64,
) {
    let m = T::of(momentum);
    for (prefix, v) in norms {
        let Some((mean, var)) = g.batch_stats(*v) else { continue };
        let s = g.shape(*v);
        let count = (s[0] * s[2] * s[3]) as f64;
        let unbias = T::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
        if let Some(t) = store.get_mut(&format!("{prefix}.mean")) {
            for (r, b) in t.data_mut().iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
        if let Some(t) = store.get_mut(&format!("{prefix}.var")) {
            for (r, b) in t.data_mut().iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * *b * unbias;
            }
        }
    }
}

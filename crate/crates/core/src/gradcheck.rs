//! Finite-difference verification of every differentiable operation, run in
//! `f64` on seeded random instances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{self, mix_seed, SeverityBank};
use crate::loss::{self, LossWeights};
use crate::net::{self, ModelConfig};
use crate::tensor::{Graph, LifParams, ParamStore, Result, Tensor, Var};

/// Largest accepted `|analytic - numeric|_inf / max(|analytic|_inf, |numeric|_inf)`.
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub instance: usize,
    pub rel_error: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    pub fn worst(&self) -> Option<&Check> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a;
type Oracle<'a> = dyn Fn(&ParamStore<f64>) -> Vec<f64> + 'a;

fn step(x: f64) -> f64 {
    1e-3 * x.abs().max(1.0)
}

/// Relative error between the reverse-mode gradient of
/// `sum(build(store) * proj)` and central differences of the same
/// projection. With an `oracle`, the differences are taken of the oracle's
/// output instead of the graph's forward pass.
pub fn check_store(store: &ParamStore<f64>, build: &Build, oracle: Option<&Oracle>, proj_seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let proj: Vec<f64> = (0..g.data(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = g.constant(Tensor::new(g.shape(out).to_vec(), proj.clone())?);
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod);
    g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    g.write_grads(&mut analytic);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let values = match oracle {
            Some(f) => f(s),
            None => {
                let mut g = Graph::new();
                let out = build(&mut g, s)?;
                g.data(out).to_vec()
            }
        };
        Ok(values.iter().zip(&proj).map(|(a, b)| a * b).sum())
    };

    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    let mut probe = store.clone();
    for name in store.trainable_names() {
        let grad = analytic
            .get(&name)
            .and_then(|t| t.grad.clone())
            .unwrap_or_else(|| vec![0.0; store.get(&name).map_or(0, |t| t.numel())]);
        for (i, a) in grad.iter().enumerate() {
            let x0 = store.get(&name).expect("listed").data()[i];
            let h = step(x0);
            probe.get_mut(&name).expect("listed").data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("listed").data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("listed").data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
    }
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("sized")
    }

    /// Values of magnitude in `[margin, 1]` with random sign, away from kinks at 0.
    fn away_from_zero(&mut self, shape: &[usize], margin: f64) -> Tensor<f64> {
        let mut t = self.uniform(shape, margin, 1.0);
        for v in t.data_mut() {
            if self.rng.gen_bool(0.5) {
                *v = -*v;
            }
        }
        t
    }
}

fn inputs(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.insert(format!("in{i}"), t.trainable());
    }
    s
}

fn arg(g: &mut Graph<f64>, s: &ParamStore<f64>, i: usize) -> Result<Var> {
    g.param(s, &format!("in{i}"), true)
}

/// Relaxed LIF: spikes replaced by a ramp whose slope is the surrogate, with
/// the reset gates frozen at their hard values for the unperturbed input.
fn relaxed_lif(input: &[f64], reset: &[f64], p: &LifParams) -> Vec<f64> {
    let n = input.len();
    let mut u = vec![0.0; n];
    let mut out = Vec::with_capacity(p.steps * n);
    for t in 0..p.steps {
        for i in 0..n {
            let gate = if t == 0 { 1.0 } else { 1.0 - reset[(t - 1) * n + i] };
            u[i] = p.tau * u[i] * gate + input[i];
            out.push(((u[i] - p.v_th + p.width) / (2.0 * p.width)).clamp(0.0, 1.0));
        }
    }
    out
}

/// Draws LIF inputs whose membranes stay clear of the threshold and of the
/// surrogate window edges by at least `margin`.
fn lif_input(gen: &mut Gen, shape: &[usize], p: &LifParams, margin: f64) -> Tensor<f64> {
    loop {
        let t = gen.uniform(shape, -0.5, 1.6);
        let (u, _) = crate::tensor::lif_forward(t.data(), p);
        let ok = u.iter().all(|v| {
            [p.v_th, p.v_th - p.width, p.v_th + p.width]
                .iter()
                .all(|k| (v - k).abs() > margin)
        });
        if ok {
            return t;
        }
    }
}

/// Runs every check on `INSTANCES` seeded instances.
pub fn run_suite(seed: u64) -> Result<Report> {
    let mut report = Report::default();
    for inst in 0..INSTANCES {
        let s = mix_seed(seed, inst as u64);
        let mut gen = Gen::new(s);
        let mut run = |name: &str, store: ParamStore<f64>, build: &Build, oracle: Option<&Oracle>| -> Result<()> {
            let rel_error = check_store(&store, build, oracle, mix_seed(s, report.checks.len() as u64))?;
            report.checks.push(Check {
                name: name.to_string(),
                instance: inst,
                rel_error,
            });
            Ok(())
        };

        // elementwise
        let sh = [2, 3, 4];
        let pair = inputs(vec![gen.uniform(&sh, -1.0, 1.0), gen.uniform(&sh, -1.0, 1.0)]);
        run("add", pair.clone(), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.add(a, b)
        }, None)?;
        run("sub", pair.clone(), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.sub(a, b)
        }, None)?;
        run("mul", pair.clone(), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.mul(a, b)
        }, None)?;
        let div = inputs(vec![gen.uniform(&sh, -1.0, 1.0), gen.uniform(&sh, 0.5, 1.5)]);
        run("div", div, &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.div(a, b)
        }, None)?;
        let one = inputs(vec![gen.uniform(&sh, -2.0, 2.0)]);
        run("scale", one.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.scale(a, -1.7))
        }, None)?;
        run("add_scalar", one.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.add_scalar(a, 0.3))
        }, None)?;
        run("sigmoid", one, &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.sigmoid(a))
        }, None)?;
        let kinked = inputs(vec![gen.away_from_zero(&sh, 0.05)]);
        run("relu", kinked.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.relu(a))
        }, None)?;
        run("leaky_relu", kinked.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.leaky_relu(a, 0.1))
        }, None)?;
        run("abs", kinked, &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.abs(a))
        }, None)?;
        let mut c = gen.uniform(&sh, -0.4, 1.4);
        for v in c.data_mut() {
            // keep clear of the clamp corners
            if (*v).abs() < 0.05 || (*v - 1.0).abs() < 0.05 {
                *v += 0.1;
            }
        }
        run("clamp01", inputs(vec![c]), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.clamp01(a))
        }, None)?;

        // convolution
        let conv_in = inputs(vec![gen.uniform(&[1, 2, 5, 5], -1.0, 1.0), gen.uniform(&[3, 2, 3, 3], -1.0, 1.0), gen.uniform(&[3], -1.0, 1.0)]);
        run("conv2d stride1 pad0", conv_in.clone(), &|g, s| {
            let (x, k, b) = (arg(g, s, 0)?, arg(g, s, 1)?, arg(g, s, 2)?);
            g.conv2d(x, k, Some(b), 1, 0)
        }, None)?;
        run("conv2d stride1 pad1", conv_in.clone(), &|g, s| {
            let (x, k, b) = (arg(g, s, 0)?, arg(g, s, 1)?, arg(g, s, 2)?);
            g.conv2d(x, k, Some(b), 1, 1)
        }, None)?;
        run("conv2d stride2 pad1", conv_in, &|g, s| {
            let (x, k, b) = (arg(g, s, 0)?, arg(g, s, 1)?, arg(g, s, 2)?);
            g.conv2d(x, k, Some(b), 2, 1)
        }, None)?;

        // resampling
        run("down2", inputs(vec![gen.uniform(&[1, 2, 4, 6], -1.0, 1.0)]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.down2(a)
        }, None)?;
        run("up2", inputs(vec![gen.uniform(&[1, 1, 3, 3], -1.0, 1.0)]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.up2(a)
        }, None)?;
        let (ra, rb) = degrade::lowres_operators::<f64>(8, 12, 2);
        let (ra, rb) = (Arc::new(ra), Arc::new(rb));
        run("bicubic down-up", inputs(vec![gen.uniform(&[2, 1, 8, 12], 0.0, 1.0)]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.separable(a, ra.clone(), rb.clone())
        }, None)?;

        // dense
        run("matmul", inputs(vec![gen.uniform(&[2, 3], -1.0, 1.0), gen.uniform(&[3, 2], -1.0, 1.0)]), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.matmul(a, b)
        }, None)?;
        run("add_row_bias", inputs(vec![gen.uniform(&[3, 4], -1.0, 1.0), gen.uniform(&[4], -1.0, 1.0)]), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.add_row_bias(a, b)
        }, None)?;
        let plain = inputs(vec![gen.uniform(&[2, 3, 2, 2], -1.0, 1.0)]);
        run("reduce_sum", plain.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.sum(a))
        }, None)?;
        run("reduce_mean", plain.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            Ok(g.mean(a))
        }, None)?;
        run("softmax", inputs(vec![gen.uniform(&[3, 5], -2.0, 2.0)]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.softmax(a)
        }, None)?;
        run("reshape", plain.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            let r = g.reshape(a, &[6, 4])?;
            g.softmax(r)
        }, None)?;
        run("concat_channels", inputs(vec![gen.uniform(&[2, 1, 2, 3], -1.0, 1.0), gen.uniform(&[2, 2, 2, 3], -1.0, 1.0)]), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.concat_channels(&[a, b, a])
        }, None)?;
        run("concat_batch", inputs(vec![gen.uniform(&[1, 2, 2, 2], -1.0, 1.0), gen.uniform(&[2, 2, 2, 2], -1.0, 1.0)]), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            g.concat_batch(&[a, b])
        }, None)?;
        run("global_avg_pool", plain.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            g.global_avg_pool(a)
        }, None)?;
        run("batch_norm train", inputs(vec![gen.uniform(&[3, 2, 3, 3], -1.0, 1.0)]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.batch_norm(a, None, 1e-5)
        }, None)?;
        let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        run("batch_norm eval", plain.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            g.batch_norm(a, Some((&rm, &rv)), 1e-5)
        }, None)?;
        run("channel_affine", inputs(vec![gen.uniform(&[2, 3, 2, 2], -1.0, 1.0), gen.uniform(&[3], 0.5, 1.5), gen.uniform(&[3], -1.0, 1.0)]), &|g, s| {
            let (a, b, c) = (arg(g, s, 0)?, arg(g, s, 1)?, arg(g, s, 2)?);
            g.channel_affine(a, b, c)
        }, None)?;
        run("group_mean", inputs(vec![gen.uniform(&[6, 2, 2, 2], -1.0, 1.0)]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.group_mean(a, 3)
        }, None)?;

        // spiking surrogate path, against the relaxed oracle
        let lif = LifParams {
            tau: 0.5,
            v_th: 1.0,
            width: 0.5,
            steps: 4,
        };
        let x = lif_input(&mut gen, &[1, 2, 3, 3], &lif, 0.01);
        let (_, reset) = crate::tensor::lif_forward(x.data(), &lif);
        let oracle = move |s: &ParamStore<f64>| relaxed_lif(s.get("in0").expect("input").data(), &reset, &lif);
        run("lif surrogate", inputs(vec![x]), &|g, s| {
            let a = arg(g, s, 0)?;
            g.lif(a, lif)
        }, Some(&oracle))?;

        // degradation mixing
        let mut w = gen.uniform(&[2, 2, 3], 0.1, 1.0);
        let k = 3;
        for row in w.data_mut().chunks_mut(k) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        run("mix", inputs(vec![w, gen.uniform(&[2, 1, 3, 3], 0.0, 1.0), gen.uniform(&[2, 1, 3, 3], 0.0, 1.0), gen.uniform(&[2, 1, 3, 3], 0.0, 1.0)]), &|g, s| {
            let w = arg(g, s, 0)?;
            let b = [arg(g, s, 1)?, arg(g, s, 2)?, arg(g, s, 3)?];
            g.mix(w, 1, &b)
        }, None)?;
        let cx = inputs(vec![gen.uniform(&[2, 1, 4, 4], 0.1, 0.9)]);
        run("contrast", cx.clone(), &|g, s| {
            let a = arg(g, s, 0)?;
            g.contrast(a, 0.5, 1.2)
        }, None)?;
        run("contrast linear", cx, &|g, s| {
            let a = arg(g, s, 0)?;
            g.contrast(a, 0.3, 1.0)
        }, None)?;
        let bank = SeverityBank {
            stripe: vec![0.1],
            lowres: vec![2],
            contrast: vec![(0.5, 1.2)],
        };
        let logits = gen.uniform(&[4, bank.n_ops()], -1.0, 1.0);
        let x = g_const(gen.uniform(&[2, 1, 8, 8], 0.2, 0.8));
        run("compose weights", inputs(vec![logits]), &|g, s| {
            let l = arg(g, s, 0)?;
            let w = g.softmax(l)?;
            let w = g.reshape(w, &[2, 2, bank.n_ops()])?;
            let x = g.constant(x.clone());
            degrade::compose(g, x, w, &bank, 7).map_err(to_tensor_err)
        }, None)?;

        // losses
        // pairs differ by at least 0.02 per pixel so |a - b| stays off its kink
        let apart = |gen: &mut Gen| {
            let a = gen.uniform(&[1, 1, 12, 12], 0.1, 0.9);
            let d = gen.away_from_zero(&[1, 1, 12, 12], 0.2);
            let b: Vec<f64> = a.data().iter().zip(d.data()).map(|(x, e)| x + 0.1 * e).collect();
            [a, Tensor::new(vec![1, 1, 12, 12], b).expect("sized")]
        };
        let pair = inputs(apart(&mut gen).to_vec());
        run("ssim", pair.clone(), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            loss::ssim(g, a, b)
        }, None)?;
        run("loss_total", pair.clone(), &|g, s| {
            let (a, b) = (arg(g, s, 0)?, arg(g, s, 1)?);
            loss::loss_total(g, a, b, LossWeights::default())
        }, None)?;
        let [a, b] = apart(&mut gen);
        let [c, d] = apart(&mut gen);
        let quad = inputs(vec![a, b, c, d]);
        run("loss_generator", quad, &|g, s| {
            let v: Vec<Var> = (0..4).map(|i| arg(g, s, i)).collect::<Result<_>>()?;
            loss::loss_generator(g, v[0], v[1], v[2], v[3], LossWeights::default(), 0.1)
        }, None)?;

        // composites
        let composite = loop {
            let st = inputs(vec![gen.uniform(&[1, 2, 5, 5], -1.0, 1.0), gen.uniform(&[2, 2, 3, 3], -1.0, 1.0), gen.uniform(&[2], -0.5, 0.5)]);
            let mut g = Graph::new();
            let (x, k, b) = (arg(&mut g, &st, 0)?, arg(&mut g, &st, 1)?, arg(&mut g, &st, 2)?);
            let y = g.conv2d(x, k, Some(b), 1, 1)?;
            if g.data(y).iter().all(|v| v.abs() > 0.05) {
                break st;
            }
        };
        run("conv-relu-mean", composite, &|g, s| {
            let (x, k, b) = (arg(g, s, 0)?, arg(g, s, 1)?, arg(g, s, 2)?);
            let y = g.conv2d(x, k, Some(b), 1, 1)?;
            let y = g.relu(y);
            Ok(g.mean(y))
        }, None)?;

        let cfg = ModelConfig {
            width: 3,
            classifier_widths: [2, 3, 3],
            ..ModelConfig::default()
        };
        // Linear activations in the stacks below: leaky-ReLU kinks are covered
        // on their own and would otherwise make finite differences flaky.
        let linear = ModelConfig { slope: 1.0, ..cfg.clone() };
        let mut stm: ParamStore<f64> = net::init_enhancer(&cfg, s).cast::<f64>();
        stm.retain(|name| name.starts_with("enh.pair0.stm"));
        let mut x = gen.uniform(&[1, 3, 4, 4], -1.0, 1.0);
        x.requires_grad = false;
        stm.insert("x", x);
        run("stm block", stm, &|g, s| {
            let x = g.param(s, "x", false)?;
            net::stm_forward(g, s, "enh.pair0.stm", x, &linear, true).map_err(net_err)
        }, None)?;

        let mut cls = net::init_classifier(&linear, 2, 4, s).cast::<f64>();
        // a non-zero head so the convolution stack sees gradient
        let head = gen.uniform(&[3, 8], -1.0, 1.0).trainable();
        cls.insert("cls.head.w", head);
        let x = g_const(gen.uniform(&[2, 1, 8, 8], 0.0, 1.0));
        run("classifier", cls, &|g, s| {
            let x = g.constant(x.clone());
            net::classifier_forward(g, s, x, &linear, 2, 4, true).map_err(net_err)
        }, None)?;
    }
    Ok(report)
}

fn g_const(mut t: Tensor<f64>) -> Tensor<f64> {
    t.requires_grad = false;
    t
}

fn to_tensor_err(e: degrade::DegradeError) -> crate::tensor::TensorError {
    match e {
        degrade::DegradeError::Tensor(t) => t,
        other => crate::tensor::TensorError::InvalidArgument {
            op: "compose",
            msg: other.to_string(),
        },
    }
}

fn net_err(e: net::NetError) -> crate::tensor::TensorError {
    match e {
        net::NetError::Tensor(t) => t,
        other => crate::tensor::TensorError::InvalidArgument {
            op: "network",
            msg: other.to_string(),
        },
    }
}

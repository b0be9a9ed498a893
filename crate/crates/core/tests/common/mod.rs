//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use nfbeam::config::{Preset, SystemConfig};
use nfbeam::nn::gradcheck::{check, GradReport};
use nfbeam::nn::{
    AdaptiveAvgPool2d, BatchNorm2d, Conv2d, LayerNorm, Linear, Mode, Model, ModelConfig, ModelDims, Module,
    MultiHeadAttention, Param, Relu, ResBlock, TransformerBlock,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const PROBES: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A layer, its input as a parameter and a fixed readout `L = sum(y * r)`.
struct Rig<L> {
    layer: L,
    x: Param<f64>,
    r: Vec<f64>,
}

type Fwd<L> = fn(&mut L, &[f64]) -> Vec<f64>;
type Bwd<L> = fn(&mut L, &[f64]) -> Vec<f64>;
type Params<L> = fn(&mut L) -> Vec<&mut Param<f64>>;

/// Checks every parameter of `layer` and the gradient with respect to its
/// input against central differences of a random linear readout.
fn run<L>(
    name: &str,
    layer: L,
    x: Vec<f64>,
    fwd: Fwd<L>,
    bwd: Bwd<L>,
    params: Params<L>,
    seed: u64,
) -> Vec<GradReport> {
    let mut g = rng(seed);
    let mut layer = layer;
    let out_len = fwd(&mut layer, &x).len();
    let mut rig = Rig {
        layer,
        x: Param::new(format!("{name}.input"), &[x.len()], x),
        r: randn(out_len, &mut g),
    };
    let mut reports = check(
        &mut rig,
        &mut |s: &mut Rig<L>| {
            let mut v = params(&mut s.layer);
            v.push(&mut s.x);
            v
        },
        &mut |s: &mut Rig<L>| {
            let y = fwd(&mut s.layer, &s.x.value);
            y.iter().zip(&s.r).map(|(a, b)| a * b).sum()
        },
        &mut |s: &mut Rig<L>| {
            fwd(&mut s.layer, &s.x.value);
            let dx = bwd(&mut s.layer, &s.r);
            for (g, d) in s.x.grad.iter_mut().zip(dx) {
                *g += d;
            }
        },
        EPS,
        PROBES,
    );
    for r in &mut reports {
        r.name = format!("{name}: {}", r.name);
    }
    reports
}

fn none<L>(_: &mut L) -> Vec<&mut Param<f64>> {
    Vec::new()
}

pub fn check_linear() -> Vec<GradReport> {
    let mut g = rng(1);
    let l = Linear::<f64>::new("head", 6, 5, true, 0.5, &mut g);
    run(
        "head",
        l,
        randn(4 * 6, &mut g),
        |l, x| l.forward(x, 4, Mode::Train),
        |l, d| l.backward(d).unwrap(),
        |l| l.params_mut(),
        2,
    )
}

pub fn check_conv() -> Vec<GradReport> {
    let mut g = rng(3);
    let c = Conv2d::<f64>::new("conv", 2, 3, 3, 2, 1, &mut g);
    run(
        "conv",
        c,
        randn(2 * 2 * 5 * 6, &mut g),
        |c, x| c.forward(x, 2, 5, 6, Mode::Train).0,
        |c, d| c.backward(d).unwrap(),
        |c| c.params_mut(),
        4,
    )
}

pub fn check_batchnorm() -> Vec<GradReport> {
    let mut g = rng(5);
    let mut bn = BatchNorm2d::<f64>::new("bn", 3);
    bn.gamma.value = randn(3, &mut g).iter().map(|v| 1.0 + v).collect();
    bn.beta.value = randn(3, &mut g);
    run(
        "batch-norm",
        bn,
        randn(4 * 3 * 6, &mut g),
        |b, x| b.forward(x, 4, 6, Mode::Train),
        |b, d| b.backward(d).unwrap(),
        |b| b.params_mut(),
        6,
    )
}

pub fn check_resblock(projection: bool) -> Vec<GradReport> {
    let mut g = rng(7);
    let (cin, stride) = if projection { (2, 2) } else { (3, 1) };
    let rb = ResBlock::<f64>::new("res", cin, 3, stride, 0.0, &mut g);
    let name = if projection {
        "resblock (projection skip)"
    } else {
        "resblock (identity skip)"
    };
    run(
        name,
        rb,
        randn(3 * cin * 4 * 4, &mut g),
        |b, x| b.forward(x, 3, 4, 4, Mode::Train, &mut rng(0)).0,
        |b, d| b.backward(d.to_vec()).unwrap(),
        |b| b.params_mut(),
        8,
    )
}

pub fn check_attention(causal: bool) -> Vec<GradReport> {
    let mut g = rng(9);
    let a = MultiHeadAttention::<f64>::new("attn", 8, 2, causal, 0.5, &mut g);
    let name = if causal {
        "attention (causal)"
    } else {
        "attention (bidirectional)"
    };
    run(
        name,
        a,
        randn(2 * 4 * 8, &mut g),
        |a, x| a.forward(x, 2, 4, Mode::Train),
        |a, d| a.backward(d).unwrap(),
        |a| a.params_mut(),
        10,
    )
}

pub fn check_transformer_block() -> Vec<GradReport> {
    let mut g = rng(11);
    let b = TransformerBlock::<f64>::new("block", 8, 2, 12, 0.0, true, 0.5, &mut g);
    run(
        "transformer block",
        b,
        randn(2 * 3 * 8, &mut g),
        |b, x| b.forward(x, 2, 3, Mode::Train, &mut rng(0)),
        |b, d| b.backward(d).unwrap(),
        |b| b.params_mut(),
        12,
    )
}

/// Position-wise feed-forward network `ReLU(x W1 + b1) W2 + b2`.
pub struct Ffn {
    fc1: Linear<f64>,
    relu: Relu,
    fc2: Linear<f64>,
    rows: usize,
}

pub fn check_ffn() -> Vec<GradReport> {
    let mut g = rng(13);
    let f = Ffn {
        fc1: Linear::new("ffn.w1", 6, 10, true, 0.5, &mut g),
        relu: Relu::new(),
        fc2: Linear::new("ffn.w2", 10, 6, true, 0.5, &mut g),
        rows: 5,
    };
    run(
        "ffn",
        f,
        randn(5 * 6, &mut g),
        |f, x| {
            let h = f.fc1.forward(x, f.rows, Mode::Train);
            let h = f.relu.forward(h, Mode::Train);
            f.fc2.forward(&h, f.rows, Mode::Train)
        },
        |f, d| {
            let g = f.fc2.backward(d).unwrap();
            let g = f.relu.backward(g).unwrap();
            f.fc1.backward(&g).unwrap()
        },
        |f| {
            let mut v = f.fc1.params_mut();
            v.extend(f.fc2.params_mut());
            v
        },
        14,
    )
}

pub fn check_layernorm() -> Vec<GradReport> {
    let mut g = rng(15);
    let mut ln = LayerNorm::<f64>::new("ln", 7);
    ln.gamma.value = randn(7, &mut g).iter().map(|v| 1.0 + v).collect();
    ln.beta.value = randn(7, &mut g);
    run(
        "layer-norm",
        ln,
        randn(3 * 7, &mut g),
        |l, x| l.forward(x, Mode::Train),
        |l, d| l.backward(d).unwrap(),
        |l| l.params_mut(),
        16,
    )
}

pub fn check_pool() -> Vec<GradReport> {
    let mut g = rng(17);
    run(
        "adaptive pool",
        AdaptiveAvgPool2d::new(2, 3),
        randn(3 * 5 * 7, &mut g),
        |p, x| p.forward(x, 3, 5, 7, Mode::Train).unwrap(),
        |p, d| p.backward(d).unwrap(),
        none,
        18,
    )
}

/// Desk-preset model in `f64` with dropout disabled.
pub fn desk_model_f64(seed: u64) -> Model<f64> {
    let mut cfg = ModelConfig::preset(Preset::Desk);
    cfg.dropout = 0.0;
    let dims = ModelDims::new(&SystemConfig::preset(Preset::Desk), &cfg);
    Model::new(&dims, &mut rng(seed)).unwrap()
}

pub fn check_full_model() -> Vec<GradReport> {
    let (batch, seq) = (2, 5);
    let mut model = desk_model_f64(19);
    let mut g = rng(20);
    let x = randn(batch * seq * model.dims.frame_len(), &mut g);
    // A larger init scale keeps the readout well above rounding noise.
    model.visit_params(&mut |p| {
        if p.name.ends_with(".weight") && (p.name.starts_with("gpt") || p.name.starts_with("head")) {
            p.value.iter_mut().for_each(|v| *v *= 10.0);
        }
    });
    run(
        "full model",
        (model, batch, seq),
        x,
        |(m, b, s), x| m.forward(x, *b, *s, Mode::Train, &mut rng(0)).unwrap(),
        |(m, _, _), d| m.backward(d).unwrap().unwrap(),
        |(m, _, _)| m.params_mut(),
        21,
    )
}

/// Every layer check followed by the full-model check.
pub fn gradient_suite() -> Vec<GradReport> {
    let mut all = Vec::new();
    all.extend(check_conv());
    all.extend(check_batchnorm());
    all.extend(check_resblock(false));
    all.extend(check_resblock(true));
    all.extend(check_attention(true));
    all.extend(check_attention(false));
    all.extend(check_ffn());
    all.extend(check_transformer_block());
    all.extend(check_layernorm());
    all.extend(check_linear());
    all.extend(check_pool());
    all.extend(check_full_model());
    all
}

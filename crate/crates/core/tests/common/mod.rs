//! Shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;

use ttd_beam::autodiff::{check_gradient, CVar, DiffGraph, Var};
use ttd_beam::beamformer::{ConfigMode, DelayLimit};
use ttd_beam::channel::{generate_channel, sample_scenario, ChannelInstance, SamplingRegion};
use ttd_beam::objective::{check_loss_gradient, DigitalDecoding, LossConfig, LossEvaluator};
use ttd_beam::{ArrayGeometry, SystemParams};

pub const FD_STEP: f64 = 1e-6;

/// One tape operation with the input box it is sampled from. With `signed`
/// the magnitude is drawn from `lo..hi` and the sign at random, which keeps
/// samples away from a kink at zero.
pub struct OpCase {
    pub name: &'static str,
    pub arity: usize,
    pub lo: f64,
    pub hi: f64,
    pub signed: bool,
    pub f: fn(&mut DiffGraph, &[Var]) -> Var,
}

fn real(g: &mut DiffGraph, z: CVar) -> Var {
    g.lin_comb(&[(z.re, 1.0), (z.im, 2.0)], 0.0)
}

fn cv(x: &[Var]) -> CVar {
    CVar { re: x[0], im: x[1] }
}

pub fn op_cases() -> Vec<OpCase> {
    let case = |name, arity, lo, hi, f| OpCase {
        name,
        arity,
        lo,
        hi,
        signed: false,
        f,
    };
    let mut v = vec![
        case("add", 2, -2.0, 2.0, |g, x| g.add(x[0], x[1])),
        case("sub", 2, -2.0, 2.0, |g, x| g.sub(x[0], x[1])),
        case("mul", 2, -2.0, 2.0, |g, x| g.mul(x[0], x[1])),
        case("div", 2, 0.5, 2.0, |g, x| g.div(x[0], x[1])),
        case("neg", 1, -2.0, 2.0, |g, x| g.neg(x[0])),
        case("scale", 1, -2.0, 2.0, |g, x| g.scale(x[0], 3.7)),
        case("add_const", 1, -2.0, 2.0, |g, x| g.add_const(x[0], -1.3)),
        case("square", 1, -2.0, 2.0, |g, x| g.square(x[0])),
        case("sqrt", 1, 0.1, 4.0, |g, x| g.sqrt(x[0])),
        case("exp", 1, -3.0, 3.0, |g, x| g.exp(x[0])),
        case("ln", 1, 0.1, 4.0, |g, x| g.ln(x[0])),
        case("sin", 1, -4.0, 4.0, |g, x| g.sin(x[0])),
        case("cos", 1, -4.0, 4.0, |g, x| g.cos(x[0])),
        case("tanh", 1, -3.0, 3.0, |g, x| g.tanh(x[0])),
        case("sigmoid", 1, -6.0, 6.0, |g, x| g.sigmoid(x[0])),
        case("softplus", 1, -6.0, 6.0, |g, x| g.softplus(x[0])),
        case("gelu", 1, -4.0, 4.0, |g, x| g.gelu(x[0])),
        case("range_penalty", 1, -2.0, 2.0, |g, x| {
            g.range_penalty(x[0], -0.5, 0.5)
        }),
        case("lin_comb", 3, -2.0, 2.0, |g, x| {
            g.lin_comb(&[(x[0], 0.3), (x[1], -1.1), (x[2], 2.0)], 0.7)
        }),
        case("sum", 4, -2.0, 2.0, |g, x| g.sum(x)),
        case("dot", 6, -2.0, 2.0, |g, x| g.dot(&x[..3], &x[3..])),
        case("c_expj", 1, -4.0, 4.0, |g, x| {
            let z = g.c_expj(x[0]);
            real(g, z)
        }),
        case("c_add", 4, -2.0, 2.0, |g, x| {
            let z = g.c_add(cv(&x[..2]), cv(&x[2..]));
            real(g, z)
        }),
        case("c_mul", 4, -2.0, 2.0, |g, x| {
            let z = g.c_mul(cv(&x[..2]), cv(&x[2..]));
            real(g, z)
        }),
        case("c_conj", 2, -2.0, 2.0, |g, x| {
            let z = g.c_conj(cv(x));
            real(g, z)
        }),
        case("c_scale", 2, -2.0, 2.0, |g, x| {
            let z = g.c_scale(cv(x), -0.6);
            real(g, z)
        }),
        case("c_abs2", 2, -2.0, 2.0, |g, x| g.c_abs2(cv(x))),
        case("c_lin_comb", 4, -2.0, 2.0, |g, x| {
            let z = g.c_lin_comb(
                &[
                    (cv(&x[..2]), Complex64::new(0.5, -1.5)),
                    (cv(&x[2..]), Complex64::new(-0.2, 0.9)),
                ],
                Complex64::new(0.1, 0.2),
            );
            real(g, z)
        }),
        case("c_dot", 8, -2.0, 2.0, |g, x| {
            let a = [cv(&x[0..2]), cv(&x[2..4])];
            let b = [cv(&x[4..6]), cv(&x[6..8])];
            let z = g.c_dot(&a, &b);
            real(g, z)
        }),
        case("c_sum", 6, -2.0, 2.0, |g, x| {
            let zs = [cv(&x[0..2]), cv(&x[2..4]), cv(&x[4..6])];
            let z = g.c_sum(&zs);
            real(g, z)
        }),
    ];
    v.push(OpCase {
        name: "relu",
        arity: 1,
        lo: 0.05,
        hi: 2.0,
        signed: true,
        f: |g, x| g.relu(x[0]),
    });
    v
}

pub fn sample_point(case: &OpCase, rng: &mut impl Rng) -> Vec<f64> {
    (0..case.arity)
        .map(|_| {
            let v = rng.gen_range(case.lo..case.hi);
            if case.signed && rng.gen::<bool>() {
                -v
            } else {
                v
            }
        })
        .collect()
}

/// Relative gradient error of one op at one random point.
pub fn op_error(case: &OpCase, rng: &mut impl Rng) -> f64 {
    let x = sample_point(case, rng);
    let f = case.f;
    check_gradient(|g, v| Ok(f(g, v)), &x, FD_STEP)
        .expect("finite op")
        .max_rel_error
}

pub fn small_params() -> SystemParams {
    SystemParams {
        num_antennas: 16,
        num_ttds_per_chain: 4,
        ..SystemParams::desk()
    }
}

pub fn channel(params: &SystemParams, geom: &ArrayGeometry, seed: u64) -> ChannelInstance {
    let s = sample_scenario(params, &SamplingRegion::default(), seed);
    generate_channel(params, geom, &s).expect("valid scenario")
}

/// Variants of the total loss covered by the gradient suite.
pub fn loss_variants() -> Vec<(ConfigMode, bool, DigitalDecoding)> {
    let mut v = Vec::new();
    for mode in ConfigMode::ALL {
        v.push((mode, false, DigitalDecoding::FullPower));
        v.push((mode, false, DigitalDecoding::Raw));
    }
    v.push((ConfigMode::Adaptive, true, DigitalDecoding::FullPower));
    v.push((ConfigMode::Adaptive, true, DigitalDecoding::Raw));
    v
}

/// Relative gradient error of the total loss at a random point.
pub fn loss_error(
    h: &ChannelInstance,
    params: &SystemParams,
    variant: (ConfigMode, bool, DigitalDecoding),
    rng: &mut impl Rng,
) -> f64 {
    let (mode, cartesian, digital) = variant;
    let cfg = LossConfig {
        digital,
        ..LossConfig::default()
    };
    let limit = DelayLimit::Bounded(params.max_delay_seconds);
    let mut ev = LossEvaluator::new(h, params, mode, limit, cfg).expect("evaluator");
    if cartesian {
        ev = ev.with_cartesian_phases();
    }
    let x: Vec<f64> = (0..ev.num_params())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    check_loss_gradient(&mut ev, &x, FD_STEP)
        .expect("finite loss")
        .max_rel_error
}

//! Scalar reverse-mode differentiation on a flat tape.
//!
//! Every operation computes its value and the local partials with respect to
//! its parents at record time, so the backward pass is a single reverse sweep
//! accumulating `adjoint(parent) += partial · adjoint(child)`. Insertion order
//! is a topological order by construction.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Handle to a node on a [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddConst,
    Square,
    Sqrt,
    Exp,
    Ln,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Gelu,
    RangePenalty,
    LinComb,
    Sum,
    Dot,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale => "scale",
            Op::AddConst => "add_const",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::RangePenalty => "range_penalty",
            Op::LinComb => "lin_comb",
            Op::Sum => "sum",
            Op::Dot => "dot",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    op: Op,
    edge_start: u32,
    edge_end: u32,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Quadratic penalty for leaving `[lo, hi]`.
pub fn range_penalty(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        (x - lo).powi(2)
    } else if x > hi {
        (x - hi).powi(2)
    } else {
        0.0
    }
}

fn range_penalty_grad(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        2.0 * (x - lo)
    } else if x > hi {
        2.0 * (x - hi)
    } else {
        0.0
    }
}

#[derive(Debug, Default, Clone)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
    first_non_finite: Option<usize>,
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocations for the next evaluation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.edges.clear();
        self.first_non_finite = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    pub fn op(&self, v: Var) -> Op {
        self.nodes[v.index()].op
    }

    /// Every node on the tape, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len() as u32).map(Var)
    }

    /// Parents of `v` with their local partial derivatives.
    pub fn parents(&self, v: Var) -> impl Iterator<Item = (Var, f64)> + '_ {
        let n = &self.nodes[v.index()];
        self.edges[n.edge_start as usize..n.edge_end as usize]
            .iter()
            .map(|&(p, d)| (Var(p), d))
    }

    fn push(&mut self, value: f64, op: Op, parents: &[(Var, f64)]) -> Var {
        let start = self.edges.len() as u32;
        self.edges.extend(parents.iter().map(|&(p, d)| (p.0, d)));
        let id = self.nodes.len();
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            edge_start: start,
            edge_end: self.edges.len() as u32,
        });
        Var(id as u32)
    }

    /// Errors with the first node whose forward value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(Error::NonFinite {
                node,
                op: self.nodes[node].op.name(),
            }),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, value: f64) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn inputs(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, Op::Mul, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x / y, Op::Div, &[(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, Op::Neg, &[(a, -1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(v, Op::Scale, &[(a, c)])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst, &[(a, 1.0)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, Op::Square, &[(a, 2.0 * x)])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let y = self.value(a).sqrt();
        self.push(y, Op::Sqrt, &[(a, 0.5 / y)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).exp();
        self.push(y, Op::Exp, &[(a, y)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.ln(), Op::Ln, &[(a, 1.0 / x)])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.sin(), Op::Sin, &[(a, x.cos())])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.cos(), Op::Cos, &[(a, -x.sin())])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).tanh();
        self.push(y, Op::Tanh, &[(a, 1.0 - y * y)])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = sigmoid(self.value(a));
        self.push(y, Op::Sigmoid, &[(a, y * (1.0 - y))])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(softplus(x), Op::Softplus, &[(a, sigmoid(x))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (y, d) = if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) };
        self.push(y, Op::Relu, &[(a, d)])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(gelu(x), Op::Gelu, &[(a, gelu_grad(x))])
    }

    pub fn range_penalty(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        self.push(
            range_penalty(x, lo, hi),
            Op::RangePenalty,
            &[(a, range_penalty_grad(x, lo, hi))],
        )
    }

    /// `c0 + Σ c_i x_i`.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)], c0: f64) -> Var {
        let v = terms
            .iter()
            .fold(c0, |acc, &(x, c)| acc + c * self.value(x));
        self.push(v, Op::LinComb, terms)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        let start = self.edges.len() as u32;
        self.edges.extend(xs.iter().map(|&x| (x.0, 1.0)));
        self.finish(v, Op::Sum, start)
    }

    pub fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        assert_eq!(xs.len(), ys.len(), "dot of unequal lengths");
        let mut v = 0.0;
        let start = self.edges.len() as u32;
        for (&x, &y) in xs.iter().zip(ys) {
            let (a, b) = (self.value(x), self.value(y));
            v += a * b;
            self.edges.push((x.0, b));
            self.edges.push((y.0, a));
        }
        self.finish(v, Op::Dot, start)
    }

    fn finish(&mut self, value: f64, op: Op, edge_start: u32) -> Var {
        let id = self.nodes.len();
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            edge_start,
            edge_end: self.edges.len() as u32,
        });
        Var(id as u32)
    }

    /// Adjoints of `output` with respect to every node on the tape.
    pub fn backward(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        self.backward_into(output, &mut adj);
        adj
    }

    pub fn backward_into(&self, output: Var, adj: &mut Vec<f64>) {
        adj.clear();
        adj.resize(self.nodes.len(), 0.0);
        adj[output.index()] = 1.0;
        for i in (0..=output.index()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            for &(p, d) in &self.edges[node.edge_start as usize..node.edge_end as usize] {
                adj[p as usize] += d * g;
            }
        }
    }

    // complex helpers

    pub fn c_input(&mut self, z: Complex64) -> CVar {
        CVar {
            re: self.input(z.re),
            im: self.input(z.im),
        }
    }

    pub fn c_constant(&mut self, z: Complex64) -> CVar {
        CVar {
            re: self.constant(z.re),
            im: self.constant(z.im),
        }
    }

    pub fn c_value(&self, z: CVar) -> Complex64 {
        Complex64::new(self.value(z.re), self.value(z.im))
    }

    /// `e^{jθ}`.
    pub fn c_expj(&mut self, theta: Var) -> CVar {
        CVar {
            re: self.cos(theta),
            im: self.sin(theta),
        }
    }

    pub fn c_add(&mut self, a: CVar, b: CVar) -> CVar {
        CVar {
            re: self.add(a.re, b.re),
            im: self.add(a.im, b.im),
        }
    }

    pub fn c_mul(&mut self, a: CVar, b: CVar) -> CVar {
        let (ar, ai, br, bi) = (
            self.value(a.re),
            self.value(a.im),
            self.value(b.re),
            self.value(b.im),
        );
        let re = self.push(
            ar * br - ai * bi,
            Op::LinComb,
            &[(a.re, br), (a.im, -bi), (b.re, ar), (b.im, -ai)],
        );
        let im = self.push(
            ar * bi + ai * br,
            Op::LinComb,
            &[(a.re, bi), (a.im, br), (b.re, ai), (b.im, ar)],
        );
        CVar { re, im }
    }

    pub fn c_conj(&mut self, a: CVar) -> CVar {
        CVar {
            re: a.re,
            im: self.neg(a.im),
        }
    }

    pub fn c_scale(&mut self, a: CVar, c: f64) -> CVar {
        CVar {
            re: self.scale(a.re, c),
            im: self.scale(a.im, c),
        }
    }

    /// `|a|²`.
    pub fn c_abs2(&mut self, a: CVar) -> Var {
        let (x, y) = (self.value(a.re), self.value(a.im));
        self.push(x * x + y * y, Op::Dot, &[(a.re, 2.0 * x), (a.im, 2.0 * y)])
    }

    /// `c0 + Σ c_i z_i` with constant complex coefficients.
    pub fn c_lin_comb(&mut self, terms: &[(CVar, Complex64)], c0: Complex64) -> CVar {
        let mut re_terms = Vec::with_capacity(2 * terms.len());
        let mut im_terms = Vec::with_capacity(2 * terms.len());
        for &(z, c) in terms {
            re_terms.push((z.re, c.re));
            re_terms.push((z.im, -c.im));
            im_terms.push((z.re, c.im));
            im_terms.push((z.im, c.re));
        }
        CVar {
            re: self.lin_comb(&re_terms, c0.re),
            im: self.lin_comb(&im_terms, c0.im),
        }
    }

    /// `Σ a_i b_i` without conjugation.
    pub fn c_dot(&mut self, a: &[CVar], b: &[CVar]) -> CVar {
        assert_eq!(a.len(), b.len(), "c_dot of unequal lengths");
        let (mut re, mut im) = (0.0, 0.0);
        let start = self.edges.len() as u32;
        for (&x, &y) in a.iter().zip(b) {
            let (xr, xi, yr, yi) = (
                self.value(x.re),
                self.value(x.im),
                self.value(y.re),
                self.value(y.im),
            );
            re += xr * yr - xi * yi;
            self.edges
                .extend([(x.re.0, yr), (x.im.0, -yi), (y.re.0, xr), (y.im.0, -xi)]);
        }
        let re_var = self.finish(re, Op::Dot, start);
        let start = self.edges.len() as u32;
        for (&x, &y) in a.iter().zip(b) {
            let (xr, xi, yr, yi) = (
                self.value(x.re),
                self.value(x.im),
                self.value(y.re),
                self.value(y.im),
            );
            im += xr * yi + xi * yr;
            self.edges
                .extend([(x.re.0, yi), (x.im.0, yr), (y.re.0, xi), (y.im.0, xr)]);
        }
        let im_var = self.finish(im, Op::Dot, start);
        CVar {
            re: re_var,
            im: im_var,
        }
    }

    pub fn c_sum(&mut self, zs: &[CVar]) -> CVar {
        let re: Vec<Var> = zs.iter().map(|z| z.re).collect();
        let im: Vec<Var> = zs.iter().map(|z| z.im).collect();
        CVar {
            re: self.sum(&re),
            im: self.sum(&im),
        }
    }
}

/// Complex value as a pair of real tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖_∞ / max(‖analytic‖_∞, ‖numeric‖_∞)`.
    pub max_rel_error: f64,
}

/// Compares reverse-mode gradients of `f` at `x` with central differences
/// using step `h · max(1, |x_i|)`.
pub fn check_gradient<F>(f: F, x: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut DiffGraph, &[Var]) -> Result<Var>,
{
    let mut g = DiffGraph::new();
    let vars = g.inputs(x);
    let out = f(&mut g, &vars)?;
    g.check_finite()?;
    let adj = g.backward(out);
    let analytic: Vec<f64> = vars.iter().map(|v| adj[v.index()]).collect();

    let mut eval = |pt: &[f64]| -> Result<f64> {
        g.clear();
        let vs = g.inputs(pt);
        let o = f(&mut g, &vs)?;
        g.check_finite()?;
        Ok(g.value(o))
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        pt[i] = x[i] + step;
        let fp = eval(&pt)?;
        pt[i] = x[i] - step;
        let fm = eval(&pt)?;
        pt[i] = x[i];
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(GradCheck::new(analytic, numeric))
}

impl GradCheck {
    pub fn new(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let denom = inf(&analytic).max(inf(&numeric));
        let max_rel_error = if denom == 0.0 { diff } else { diff / denom };
        Self {
            analytic,
            numeric,
            max_rel_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_exposes_parents() {
        let mut g = DiffGraph::new();
        let x = g.input(-0.5);
        let y = g.relu(x);
        let z = g.scale(y, 3.0);
        assert_eq!(g.vars().count(), 3);
        let p: Vec<_> = g.parents(y).collect();
        assert_eq!(p, vec![(x, 0.0)]);
        assert_eq!(g.parents(z).next(), Some((y, 3.0)));
        assert_eq!(g.parents(x).count(), 0);
    }

    #[test]
    fn product_rule() {
        let mut g = DiffGraph::new();
        let x = g.input(3.0);
        let y = g.input(-2.0);
        let xy = g.mul(x, y);
        let z = g.add(xy, x);
        let adj = g.backward(z);
        assert_eq!(g.value(z), -3.0);
        assert_eq!(adj[x.index()], -1.0);
        assert_eq!(adj[y.index()], 3.0);
    }

    #[test]
    fn unused_nodes_get_zero_adjoint() {
        let mut g = DiffGraph::new();
        let x = g.input(1.0);
        let unused = g.input(5.0);
        let _dead = g.exp(unused);
        let y = g.square(x);
        let adj = g.backward(y);
        assert_eq!(adj[unused.index()], 0.0);
        assert_eq!(adj[x.index()], 2.0);
    }

    #[test]
    fn non_finite_value_is_reported_with_its_node() {
        let mut g = DiffGraph::new();
        let x = g.input(-1.0);
        let _ok = g.square(x);
        let bad = g.ln(x);
        match g.check_finite() {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, bad.index());
                assert_eq!(op, "ln");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn clear_reuses_the_tape() {
        let mut g = DiffGraph::new();
        let x = g.input(2.0);
        let _ = g.exp(x);
        g.clear();
        assert!(g.is_empty());
        let x = g.input(0.5);
        assert_eq!(x.index(), 0);
    }

    #[test]
    fn complex_product_matches_num_complex() {
        let a = Complex64::new(0.3, -1.2);
        let b = Complex64::new(-0.7, 0.4);
        let mut g = DiffGraph::new();
        let (za, zb) = (g.c_input(a), g.c_input(b));
        let p = g.c_mul(za, zb);
        assert!((g.c_value(p) - a * b).norm() < 1e-15);
        let q = g.c_lin_comb(&[(za, b), (zb, a)], Complex64::new(1.0, 1.0));
        assert!((g.c_value(q) - (2.0 * a * b + Complex64::new(1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(range_penalty(0.5, 0.0, 1.0), 0.0);
        assert!((range_penalty(1.25, 0.0, 1.0) - 0.0625).abs() < 1e-15);
        assert!((range_penalty(-0.5, 0.0, 1.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_of_composite_expression() {
        let r = check_gradient(
            |g, x| {
                let a = g.mul(x[0], x[1]);
                let b = g.sin(a);
                let c = g.softplus(x[2]);
                let d = g.div(b, c);
                let e = g.gelu(d);
                let z = g.c_expj(x[0]);
                let w = g.c_abs2(z);
                let zz = g.c_expj(x[2]);
                let dz = g.c_dot(&[z, zz], &[zz, z]);
                let s = g.add(e, w);
                let t = g.add(s, dz.re);
                Ok(g.add(t, dz.im))
            },
            &[0.4, -1.3, 0.7],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }
}

//! Reverse-mode differentiation over a tape of field-level primitives.
//!
//! Every node stores its forward value; pullbacks are analytic. The Poisson
//! solve and the projection are single primitives whose adjoints reuse the
//! forward solver, so a rollout stores one value per stage quantity rather
//! than solver internals.

use crate::closure::{collocate_values, conv_backward, conv_forward, decollocate_values, Activation, CnnArchitecture, LayerSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::operators::{convection, convection_vjp, diffusion, divergence, pressure_gradient, project, solver_for};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Axpy(Var, f64, Var),
    Convection(Var),
    Diffusion(Var, f64),
    Project(Var),
    Poisson(Var),
    Divergence(Var),
    Gradient(Var),
    Collocate(Var),
    Decollocate(Var),
    Conv { x: Var, theta: Var, spec: LayerSpec, offset: usize },
    Tanh(Var),
    SqNorm(Var),
    Sum(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Axpy(..) => "axpy",
            Op::Convection(_) => "convection",
            Op::Diffusion(..) => "diffusion",
            Op::Project(_) => "project",
            Op::Poisson(_) => "poisson",
            Op::Divergence(_) => "divergence",
            Op::Gradient(_) => "gradient",
            Op::Collocate(_) => "collocate",
            Op::Decollocate(_) => "decollocate",
            Op::Conv { .. } => "conv",
            Op::Tanh(_) => "tanh",
            Op::SqNorm(_) => "sqnorm",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    grid: Option<Grid>,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn vf(g: &Grid, v: Vec<f64>) -> VectorField {
    VectorField::from_vec(g, v).expect("tape value has field shape")
}

fn sf(g: &Grid, v: Vec<f64>) -> ScalarField {
    ScalarField::from_vec(g, v).expect("tape value has field shape")
}

fn poisson_values(g: &Grid, rhs: &[f64]) -> Vec<f64> {
    solver_for(g).solve_values(rhs).0
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, grid: Option<Grid>) -> Var {
        self.nodes.push(Node { op, value, grid });
        Var(self.nodes.len() - 1)
    }

    fn grid_of(&self, v: Var) -> Result<Grid> {
        self.nodes[v.0].grid.ok_or_else(|| Error::Autodiff(format!("node {} is not a field", v.0)))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn vector_field(&self, v: Var) -> Result<VectorField> {
        VectorField::from_vec(&self.grid_of(v)?, self.value(v).to_vec())
    }

    pub fn constant(&mut self, value: Vec<f64>, grid: Option<Grid>) -> Var {
        self.push(Op::Constant, value, grid)
    }

    pub fn field(&mut self, u: &VectorField) -> Var {
        self.push(Op::Constant, u.data().to_vec(), Some(*u.grid()))
    }

    pub fn param(&mut self, theta: &[f64]) -> Var {
        self.push(Op::Param, theta.to_vec(), None)
    }

    fn check_len(&self, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a).len(), self.value(b).len());
        if x != y {
            return Err(Error::Shape(format!("tape operands of length {x} and {y}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_len(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let g = self.nodes[a.0].grid.or(self.nodes[b.0].grid);
        Ok(self.push(Op::Add(a, b), v, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_len(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let g = self.nodes[a.0].grid.or(self.nodes[b.0].grid);
        Ok(self.push(Op::Sub(a, b), v, g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| s * x).collect();
        let g = self.nodes[a.0].grid;
        self.push(Op::Scale(a, s), v, g)
    }

    /// `a + s b`.
    pub fn axpy(&mut self, a: Var, s: f64, b: Var) -> Result<Var> {
        self.check_len(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + s * y).collect();
        let g = self.nodes[a.0].grid.or(self.nodes[b.0].grid);
        Ok(self.push(Op::Axpy(a, s, b), v, g))
    }

    pub fn convection(&mut self, u: Var) -> Result<Var> {
        let g = self.grid_of(u)?;
        let v = convection(&vf(&g, self.value(u).to_vec())).into_vec();
        Ok(self.push(Op::Convection(u), v, Some(g)))
    }

    pub fn diffusion(&mut self, u: Var, viscosity: f64) -> Result<Var> {
        let g = self.grid_of(u)?;
        let v = diffusion(&vf(&g, self.value(u).to_vec()), viscosity).into_vec();
        Ok(self.push(Op::Diffusion(u, viscosity), v, Some(g)))
    }

    pub fn project(&mut self, u: Var) -> Result<Var> {
        let g = self.grid_of(u)?;
        let v = project(&vf(&g, self.value(u).to_vec())).into_vec();
        Ok(self.push(Op::Project(u), v, Some(g)))
    }

    /// `L^+ r` for a cell-centered right-hand side, mean mode dropped.
    pub fn poisson(&mut self, r: Var) -> Result<Var> {
        let g = self.grid_of(r)?;
        let v = poisson_values(&g, self.value(r));
        Ok(self.push(Op::Poisson(r), v, Some(g)))
    }

    pub fn divergence(&mut self, u: Var) -> Result<Var> {
        let g = self.grid_of(u)?;
        let v = divergence(&vf(&g, self.value(u).to_vec())).into_vec();
        Ok(self.push(Op::Divergence(u), v, Some(g)))
    }

    pub fn gradient(&mut self, p: Var) -> Result<Var> {
        let g = self.grid_of(p)?;
        let v = pressure_gradient(&sf(&g, self.value(p).to_vec())).into_vec();
        Ok(self.push(Op::Gradient(p), v, Some(g)))
    }

    pub fn collocate(&mut self, u: Var) -> Result<Var> {
        let g = self.grid_of(u)?;
        let v = collocate_values(&g, self.value(u));
        Ok(self.push(Op::Collocate(u), v, Some(g)))
    }

    pub fn decollocate(&mut self, c: Var) -> Result<Var> {
        let g = self.grid_of(c)?;
        let v = decollocate_values(&g, self.value(c));
        Ok(self.push(Op::Decollocate(c), v, Some(g)))
    }

    /// Pre-activation convolution with the layer block starting at `offset` in `theta`.
    pub fn conv(&mut self, x: Var, theta: Var, spec: LayerSpec, offset: usize) -> Result<Var> {
        let g = self.grid_of(x)?;
        let d = g.dim();
        if self.value(x).len() != spec.cin * g.ncell() {
            return Err(Error::Shape(format!("conv input has {} values, expected {}", self.value(x).len(), spec.cin * g.ncell())));
        }
        let p = self.value(theta);
        if offset + spec.param_count(d) > p.len() {
            return Err(Error::Shape("conv parameter block out of range".into()));
        }
        let v = conv_forward(&g, &spec, &p[offset..offset + spec.param_count(d)], self.value(x));
        Ok(self.push(Op::Conv { x, theta, spec, offset }, v, Some(g)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|a| a.tanh()).collect();
        let g = self.nodes[x.0].grid;
        self.push(Op::Tanh(x), v, g)
    }

    /// `sum x^2` as a scalar node.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        let s = crate::grid::sq_norm(self.value(x));
        self.push(Op::SqNorm(x), vec![s], None)
    }

    /// Sum of scalar nodes, added in the given order.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for x in xs {
            if self.value(*x).len() != 1 {
                return Err(Error::Shape("sum expects scalar nodes".into()));
            }
            s += self.scalar(*x);
        }
        Ok(self.push(Op::Sum(xs.to_vec()), vec![s], None))
    }

    /// Adjoints of every node for the scalar output `out`, seeded with 1.
    pub fn backward(&self, out: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(out).len() != 1 {
            return Err(Error::Autodiff("backward expects a scalar output".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(vec![1.0]);
        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, x: &[f64], s: f64) {
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(x).for_each(|(a, b)| *a += s * b),
                slot @ None => *slot = Some(x.iter().map(|b| s * b).collect()),
            }
        }
        for i in (0..=out.0).rev() {
            let Some(w) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Autodiff(format!("non-finite adjoint at node {i} ({})", node.op.name())));
            }
            let g = node.grid;
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &w, 1.0);
                    acc(&mut adj, *b, &w, 1.0);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &w, 1.0);
                    acc(&mut adj, *b, &w, -1.0);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, &w, *s),
                Op::Axpy(a, s, b) => {
                    acc(&mut adj, *a, &w, 1.0);
                    acc(&mut adj, *b, &w, *s);
                }
                Op::Convection(u) => {
                    let g = g.unwrap();
                    let j = convection_vjp(&vf(&g, self.value(*u).to_vec()), &vf(&g, w.clone()));
                    acc(&mut adj, *u, j.data(), 1.0);
                }
                Op::Diffusion(u, nu) => {
                    let g = g.unwrap();
                    acc(&mut adj, *u, diffusion(&vf(&g, w.clone()), *nu).data(), 1.0);
                }
                Op::Project(u) => {
                    let g = g.unwrap();
                    acc(&mut adj, *u, project(&vf(&g, w.clone())).data(), 1.0);
                }
                Op::Poisson(r) => {
                    let g = g.unwrap();
                    // L^+ is symmetric on the mean-free subspace and kills the mean
                    acc(&mut adj, *r, &poisson_values(&g, &w), 1.0);
                }
                Op::Divergence(u) => {
                    // D^T = -G
                    let g = g.unwrap();
                    acc(&mut adj, *u, pressure_gradient(&sf(&g, w.clone())).data(), -1.0);
                }
                Op::Gradient(p) => {
                    let g = g.unwrap();
                    acc(&mut adj, *p, divergence(&vf(&g, w.clone())).data(), -1.0);
                }
                Op::Collocate(u) => acc(&mut adj, *u, &decollocate_values(&g.unwrap(), &w), 1.0),
                Op::Decollocate(c) => acc(&mut adj, *c, &collocate_values(&g.unwrap(), &w), 1.0),
                Op::Conv { x, theta, spec, offset } => {
                    let g = g.unwrap();
                    let n = spec.param_count(g.dim());
                    let p = &self.value(*theta)[*offset..*offset + n];
                    let (dx, dp) = conv_backward(&g, spec, p, self.value(*x), &w);
                    acc(&mut adj, *x, &dx, 1.0);
                    let total = self.value(*theta).len();
                    let slot = adj[theta.0].get_or_insert_with(|| vec![0.0; total]);
                    slot[*offset..*offset + n].iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
                }
                Op::Tanh(x) => {
                    let d: Vec<f64> = node.value.iter().zip(&w).map(|(y, w)| w * (1.0 - y * y)).collect();
                    acc(&mut adj, *x, &d, 1.0);
                }
                Op::SqNorm(x) => acc(&mut adj, *x, self.value(*x), 2.0 * w[0]),
                Op::Sum(xs) => {
                    for x in xs {
                        acc(&mut adj, *x, &w, 1.0);
                    }
                }
            }
            adj[i] = Some(w);
        }
        Ok(adj)
    }

    /// `d out / d wrt`, zeros if `out` does not depend on `wrt`.
    pub fn gradient_of(&self, out: Var, wrt: Var) -> Result<Vec<f64>> {
        let n = self.value(wrt).len();
        if wrt.0 > out.0 {
            return Ok(vec![0.0; n]);
        }
        let mut adj = self.backward(out)?;
        let g = adj[wrt.0].take().unwrap_or_else(|| vec![0.0; n]);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Autodiff("non-finite gradient".into()));
        }
        Ok(g)
    }
}

/// Loss value and gradient with respect to `theta` of a loss built on a fresh tape.
pub fn grad<F>(theta: &[f64], loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(theta);
    let out = loss_fn(&mut tape, p)?;
    let loss = tape.scalar(out);
    if !loss.is_finite() {
        return Err(Error::Autodiff(format!("non-finite loss {loss}")));
    }
    Ok((loss, tape.gradient_of(out, p)?))
}

/// CNN closure recorded on the tape; `u` is a staggered field node.
pub fn cnn_on_tape(tape: &mut Tape, u: Var, theta: Var, arch: &CnnArchitecture) -> Result<Var> {
    let mut x = tape.collocate(u)?;
    for (spec, off) in arch.layers.iter().zip(arch.layer_offsets()) {
        x = tape.conv(x, theta, *spec, off)?;
        if spec.activation == Activation::Tanh {
            x = tape.tanh(x);
        }
    }
    tape.decollocate(x)
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update, no weight decay.
pub fn adam_step(theta: &mut [f64], g: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if theta.len() != g.len() || g.len() != state.m.len() {
        return Err(Error::Shape(format!("adam: {} parameters, {} gradient entries, {} moments", theta.len(), g.len(), state.m.len())));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..theta.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// `lr_end + (lr_start - lr_end) (1 + cos(pi iter / total)) / 2`.
pub fn cosine_lr(iter: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let x = iter.min(total) as f64 / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = crate::grid::norm2(g);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}

//! Normalizing flows on the latent space.
//!
//! The continuous flow integrates the augmented state `(z, l)` with
//! `dz/dt = f(z, t)` and `dl/dt = -Tr(df/dz)` by explicit Euler steps. The
//! trace terms are built from ordinary graph operations (a batched
//! Jacobian-vector product for the exact trace, a vector-Jacobian product for
//! the Hutchinson estimate), so the log-density change is differentiable with
//! respect to both the latent and the network parameters through every
//! unrolled step.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Time-conditioned layer: `softplus(h W + b) * sigmoid(t g_w + g_b) + t c_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedLayer {
    pub linear: Linear,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    pub time_bias: ParamId,
}

/// Dynamics network `f(z, t)`: gated hidden layers then a plain linear map back to `R^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeNet {
    pub dim: usize,
    pub layers: Vec<GatedLayer>,
    pub output: Linear,
}

/// Forward evaluation plus the per-layer slopes `softplus'(pre) * gate` that
/// make up the Jacobian `J = W_1 S_1 W_2 S_2 ... W_out` (row convention).
pub struct OdeEval {
    pub out: Var,
    pub slopes: Vec<Var>,
}

fn uniform_row<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Tensor {
    Tensor::row(&(0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>())
}

impl OdeNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = dim;
        for (i, &h) in hidden.iter().enumerate() {
            let linear = Linear::new(store, &format!("{name}.layer{i}"), width, h, rng);
            // the time maps have fan-in 1
            let gate_weight = store.add(format!("{name}.layer{i}.gate_weight"), uniform_row(h, 1.0, rng));
            let gate_bias = store.add(format!("{name}.layer{i}.gate_bias"), uniform_row(h, 1.0, rng));
            let time_bias = store.add(format!("{name}.layer{i}.time_bias"), uniform_row(h, 1.0, rng));
            layers.push(GatedLayer {
                linear,
                gate_weight,
                gate_bias,
                time_bias,
            });
            width = h;
        }
        let output = Linear::new(store, &format!("{name}.out"), width, dim, rng);
        Self { dim, layers, output }
    }

    /// Set `f(z, t) = z A` (no hidden layers). Used for analytic checks.
    pub fn linear_dynamics(store: &mut ParamStore, a: Tensor) -> Result<Self> {
        let (r, c) = a.dims2()?;
        if r != c {
            return Err(Error::shape("linear_dynamics", &[r, c], &[c, c]));
        }
        let weight = store.add("ode.out.weight", a);
        let bias = store.add("ode.out.bias", Tensor::zeros(&[1, r]));
        Ok(Self {
            dim: r,
            layers: Vec::new(),
            output: Linear {
                weight,
                bias,
                in_dim: r,
                out_dim: r,
            },
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.linear.weight, l.linear.bias, l.gate_weight, l.gate_bias, l.time_bias]);
        }
        ids.extend([self.output.weight, self.output.bias]);
        ids
    }

    pub fn zero_params(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `f(z, t)` for a `[B, D]` batch.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, t: f64) -> Result<OdeEval> {
        let (_, d) = g.value(z).dims2()?;
        if d != self.dim {
            return Err(Error::shape("odenet", &[self.dim], g.shape(z)));
        }
        let mut h = z;
        let mut slopes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pre = layer.linear.forward(g, p, h)?;
            let act = g.softplus(pre);
            let gw = g.scale(p.var(layer.gate_weight), t);
            let gate_pre = g.add(gw, p.var(layer.gate_bias))?;
            let gate = g.sigmoid(gate_pre);
            let tb = g.scale(p.var(layer.time_bias), t);
            let gated = g.mul(act, gate)?;
            h = g.add(gated, tb)?;
            let dact = g.sigmoid(pre);
            slopes.push(g.mul(dact, gate)?);
        }
        let out = self.output.forward(g, p, h)?;
        Ok(OdeEval { out, slopes })
    }

    /// Exact `Tr(df/dz)` per row from `D` Jacobian-vector products against the
    /// basis vectors, stacked into one `[D*B, .]` batch. Shape `[B, 1]`.
    pub fn exact_trace(&self, g: &mut Graph, p: &Bound, eval: &OdeEval, rows: usize) -> Result<Var> {
        let d = self.dim;
        let mut basis = Tensor::zeros(&[d * rows, d]);
        for k in 0..d {
            for b in 0..rows {
                basis.data_mut()[(k * rows + b) * d + k] = 1.0;
            }
        }
        let diag_mask = g.constant(basis.clone());
        let mut tan = g.constant(basis);
        for (layer, &s) in self.layers.iter().zip(&eval.slopes) {
            tan = g.matmul(tan, p.var(layer.linear.weight))?;
            let s_rep = g.repeat_rows(s, d)?;
            tan = g.mul(tan, s_rep)?;
        }
        tan = g.matmul(tan, p.var(self.output.weight))?;
        let diag = g.mul(tan, diag_mask)?;
        let per = g.sum_rows(diag)?;
        g.sum_row_blocks(per, d)
    }

    /// Hutchinson estimate `e^T (df/dz) e` per row from one vector-Jacobian
    /// product with the probe `e` (`[B, D]`). Shape `[B, 1]`.
    pub fn hutchinson_trace(&self, g: &mut Graph, p: &Bound, eval: &OdeEval, probe: Var) -> Result<Var> {
        let wt = g.transpose(p.var(self.output.weight))?;
        let mut cot = g.matmul(probe, wt)?;
        for (layer, &s) in self.layers.iter().zip(&eval.slopes).rev() {
            cot = g.mul(cot, s)?;
            let wt = g.transpose(p.var(layer.linear.weight))?;
            cot = g.matmul(cot, wt)?;
        }
        let q = g.mul(cot, probe)?;
        g.sum_rows(q)
    }

    /// `f(z, t)` for a single point.
    pub fn eval(&self, store: &ParamStore, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let zv = g.constant(Tensor::row(z));
        let ev = self.forward(&mut g, &p, zv, t)?;
        Ok(g.value(ev.out).data().to_vec())
    }

    pub fn exact_trace_at(&self, store: &ParamStore, z: &[f64], t: f64) -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let zv = g.constant(Tensor::row(z));
        let ev = self.forward(&mut g, &p, zv, t)?;
        let tr = self.exact_trace(&mut g, &p, &ev, 1)?;
        g.item(tr)
    }

    pub fn hutchinson_trace_at(&self, store: &ParamStore, z: &[f64], t: f64, probe: &[f64]) -> Result<f64> {
        if probe.iter().any(|&e| e != 1.0 && e != -1.0) {
            return Err(Error::InvalidArgument("Rademacher probe entries must be +1 or -1".into()));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let zv = g.constant(Tensor::row(z));
        let ev = self.forward(&mut g, &p, zv, t)?;
        let e = g.constant(Tensor::row(probe));
        let tr = self.hutchinson_trace(&mut g, &p, &ev, e)?;
        g.item(tr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

impl std::str::FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "hutchinson" => Ok(Self::Hutchinson),
            _ => Err(Error::InvalidArgument(format!("unknown trace mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for TraceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Hutchinson => "hutchinson",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub num_steps: usize,
    pub t0: f64,
    pub t1: f64,
    pub trace_mode: TraceMode,
    pub hutchinson_probes: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            num_steps: 40,
            t0: 0.0,
            t1: 1.0,
            trace_mode: TraceMode::Exact,
            hutchinson_probes: 1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("flow num_steps must be at least 1".into()));
        }
        if !(self.t1 > self.t0) {
            return Err(Error::InvalidArgument(format!("flow interval [{}, {}] is empty", self.t0, self.t1)));
        }
        if self.hutchinson_probes == 0 {
            return Err(Error::InvalidArgument("hutchinson_probes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of [`cnf_transform`]: the transported latent and `log q_T - log q_0` per row.
#[derive(Clone, Copy, Debug)]
pub struct FlowVars {
    pub z: Var,
    pub delta_log_q: Var,
}

/// Single-example result with plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub z_out: Vec<f64>,
    pub delta_log_q: f64,
}

/// Euler-integrate `(z, l)` from `t0` to `t1`. In Hutchinson mode `probes`
/// holds `hutchinson_probes` Rademacher matrices of shape `[B, D]`, each reused
/// at every step; their estimates are averaged.
pub fn cnf_transform(g: &mut Graph, p: &Bound, net: &OdeNet, z0: Var, cfg: &FlowConfig, probes: &[Var]) -> Result<FlowVars> {
    cfg.validate()?;
    let (rows, _) = g.value(z0).dims2()?;
    if cfg.trace_mode == TraceMode::Hutchinson {
        if probes.is_empty() {
            return Err(Error::InvalidArgument("hutchinson trace mode needs probes".into()));
        }
        for &e in probes {
            if g.shape(e) != g.shape(z0) {
                return Err(Error::shape("cnf probe", g.shape(z0), g.shape(e)));
            }
        }
    }
    let dt = (cfg.t1 - cfg.t0) / cfg.num_steps as f64;
    let mut z = z0;
    let mut ell = g.constant(Tensor::zeros(&[rows, 1]));
    for step in 0..cfg.num_steps {
        let t = cfg.t0 + step as f64 * dt;
        let ev = net.forward(g, p, z, t)?;
        let tr = match cfg.trace_mode {
            TraceMode::Exact => net.exact_trace(g, p, &ev, rows)?,
            TraceMode::Hutchinson => {
                let mut acc: Option<Var> = None;
                for &e in probes {
                    let est = net.hutchinson_trace(g, p, &ev, e)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, est)?,
                        None => est,
                    });
                }
                g.scale(acc.expect("probes"), 1.0 / probes.len() as f64)
            }
        };
        let dz = g.scale(ev.out, dt);
        z = g.add(z, dz)?;
        let dl = g.scale(tr, dt);
        ell = g.sub(ell, dl)?;
        if !g.value(z).all_finite() || !g.value(ell).all_finite() {
            return Err(Error::FlowDiverged { step });
        }
    }
    Ok(FlowVars { z, delta_log_q: ell })
}

/// [`cnf_transform`] on a single point with plain values.
pub fn cnf_transform_point(
    store: &ParamStore,
    net: &OdeNet,
    z0: &[f64],
    cfg: &FlowConfig,
    probes: &[Vec<f64>],
) -> Result<FlowResult> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let z = g.constant(Tensor::row(z0));
    let probes: Vec<Var> = probes.iter().map(|e| g.constant(Tensor::row(e))).collect();
    let out = cnf_transform(&mut g, &p, net, z, cfg, &probes)?;
    Ok(FlowResult {
        z_out: g.value(out.z).data().to_vec(),
        delta_log_q: g.item(out.delta_log_q)?,
    })
}

/// Draw a `[rows, dim]` Rademacher matrix.
pub fn rademacher<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(vec![rows, dim], data).expect("shape")
}

// ------------------------------------------------------------------ discrete

/// An invertible map with tractable log-determinant.
pub trait DiscreteFlow {
    /// Returns `(z_out, log|det dz_out/dz|)` with the log-determinant as a `[B, 1]` column.
    fn apply(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<(Var, Var)>;
}

const PLANAR_MIN_UW: f64 = -1.0 + 1e-6;
const PLANAR_MIN_DET: f64 = 1e-8;

/// `z + u tanh(w^T z + b)` for a `[B, D]` batch with `u, w: [1, D]`, `b: [1]`.
///
/// `u` is moved along `w` when needed so that `u^T w >= -1 + 1e-6`, which keeps
/// the map invertible; otherwise it is used as given.
pub fn planar_apply(g: &mut Graph, z: Var, u: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let d = g.value(z).cols();
    if g.value(u).numel() != d || g.value(w).numel() != d {
        return Err(Error::shape("planar_apply", g.shape(z), g.shape(u)));
    }
    let uw_prod = g.mul(u, w)?;
    let uw = g.sum(uw_prod);
    let u_hat = if g.item(uw)? < PLANAR_MIN_UW {
        let w2 = g.square(w);
        let wn2 = g.sum(w2);
        let gap = g.neg(uw);
        let gap = g.add_scalar(gap, PLANAR_MIN_UW);
        let coef = g.div(gap, wn2)?;
        let shift = g.mul(w, coef)?;
        g.add(u, shift)?
    } else {
        u
    };
    let zw = g.mul(z, w)?;
    let lin = g.sum_rows(zw)?;
    let lin = g.add(lin, b)?;
    let h = g.tanh(lin);
    let step = g.mul(h, u_hat)?;
    let z_out = g.add(z, step)?;

    let uhw = g.mul(u_hat, w)?;
    let uhw = g.sum(uhw);
    let h2 = g.square(h);
    let dh = g.neg(h2);
    let dh = g.add_scalar(dh, 1.0);
    let det = g.mul(dh, uhw)?;
    let det = g.add_scalar(det, 1.0);
    if let Some(bad) = g.value(det).data().iter().find(|x| x.abs() < PLANAR_MIN_DET) {
        return Err(Error::DegenerateJacobian(bad.abs()));
    }
    let log_det = g.log(det);
    Ok((z_out, log_det))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarLayer {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// A composition `z_{k+1} = z_k + u_k tanh(w_k^T z_k + b_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFlow {
    pub layers: Vec<PlanarLayer>,
}

impl PlanarFlow {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, num_layers: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let layers = (0..num_layers)
            .map(|k| PlanarLayer {
                u: store.add(format!("{name}.{k}.u"), uniform_row(dim, bound, rng)),
                w: store.add(format!("{name}.{k}.w"), uniform_row(dim, bound, rng)),
                b: store.add(format!("{name}.{k}.b"), Tensor::scalar(0.0)),
            })
            .collect();
        Self { layers }
    }
}

impl DiscreteFlow for PlanarFlow {
    fn apply(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let rows = g.value(z).rows();
        let mut z = z;
        let mut total = g.constant(Tensor::zeros(&[rows, 1]));
        for l in &self.layers {
            let (zn, ld) = planar_apply(g, z, p.var(l.u), p.var(l.w), p.var(l.b))?;
            z = zn;
            total = g.add(total, ld)?;
        }
        Ok((z, total))
    }
}

//! Adapted coordinates near a whiskered torus, the graph-transform fixed
//! point for its stable/unstable manifolds, contraction diagnostics, and the
//! manifold-straightening coordinate change.
//!
//! Near a torus with activated sites `S` the chart uses hyperbolic
//! coordinates `u_k = q_k + p_k` (expanding), `s_k = p_k - q_k` (contracting)
//! at the non-activated sites of the three-site invariant block, and
//! action-angle coordinates `(theta_k, r_k)` at the activated sites, with
//! `r_k` measured relative to the torus energy so the torus sits at
//! `u = s = r = 0`.

use crate::decay::{Site, SiteWindow};
use crate::flow::{integrate, Scheme};
use crate::lattice::{LatticeModel, LatticeState, PathSpec};
use crate::pendulum::ActionAngleChart;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// Which invariant manifold of the torus a graph describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Stable,
    Unstable,
}

/// An invariant torus: activated sites with their rotation energies; all
/// other sites sit at the saddle `(q, p) = (0, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusSpec {
    pub sites: Vec<Site>,
    pub energies: Vec<f64>,
}

impl TorusSpec {
    pub fn periodic(site: Site, h: f64) -> Self {
        TorusSpec {
            sites: vec![site],
            energies: vec![h],
        }
    }

    pub fn two_torus(a: Site, ha: f64, b: Site, hb: f64) -> Self {
        TorusSpec {
            sites: vec![a, b],
            energies: vec![ha, hb],
        }
    }

    pub fn total_energy(&self) -> f64 {
        self.energies.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.sites.len()
    }
}

/// A point in the adapted chart: hyperbolic coordinates per non-activated
/// block site and angle-action coordinates per activated site.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub theta: Vec<f64>,
    pub r: Vec<f64>,
}

impl ChartPoint {
    pub fn origin(c: usize, d: usize) -> Self {
        ChartPoint {
            u: vec![0.0; c],
            s: vec![0.0; c],
            theta: vec![0.0; d],
            r: vec![0.0; d],
        }
    }
}

/// Adapted chart on the three-site invariant block containing the torus.
#[derive(Clone, Debug)]
pub struct AdaptedChart {
    pub torus: TorusSpec,
    /// The three consecutive block sites (superset of the torus sites).
    pub active: Vec<Site>,
    pub sub_window: Arc<SiteWindow>,
    /// Restriction of the full model to the block (identical dynamics on it).
    pub sub_model: LatticeModel,
    /// Block indices of the activated (rotating) sites.
    pub s_idx: Vec<usize>,
    /// Block indices of the hyperbolic (saddle) sites.
    pub off_idx: Vec<usize>,
    /// Per-activated-site action-angle charts centered at the torus energy.
    pub aa: Vec<ActionAngleChart>,
    /// Rotation frequencies at the torus energies.
    pub omegas: Vec<f64>,
}

impl AdaptedChart {
    /// Build the chart for `torus` on the block of three consecutive sites
    /// `active` (which must contain every torus site).
    pub fn new(model: &LatticeModel, torus: TorusSpec, active: [Site; 3]) -> Result<Self> {
        for s in &torus.sites {
            if !active.contains(s) {
                return Err(Error::ChartDomain(format!(
                    "torus site {s:?} not among the active block {active:?}"
                )));
            }
        }
        if torus.sites.len() != torus.energies.len()
            || torus.sites.is_empty()
            || torus.sites.len() > 2
        {
            return Err(Error::ChartDomain(
                "torus needs 1 or 2 activated sites with matching energies".into(),
            ));
        }
        if torus.energies.iter().any(|h| *h <= 0.0) {
            return Err(Error::ChartDomain("torus energies must be positive".into()));
        }
        let sub_window = Arc::new(SiteWindow::new(model.window.dim, active.to_vec()));
        let sub_model = LatticeModel::new(
            sub_window.clone(),
            model.gamma,
            model.eps,
            model.perturbation.clone(),
            PathSpec {
                sites: active.to_vec(),
            },
        )?;
        let mut s_idx = Vec::new();
        let mut aa = Vec::new();
        let mut omegas = Vec::new();
        for (site, h) in torus.sites.iter().zip(&torus.energies) {
            s_idx.push(sub_window.index_of(*site).unwrap());
            aa.push(ActionAngleChart::new(*h, 0.2 * h, 5.0 * h)?);
            omegas.push(2.0 * PI / crate::pendulum::period(*h)?);
        }
        let off_idx: Vec<usize> = (0..sub_window.len()).filter(|k| !s_idx.contains(k)).collect();
        Ok(AdaptedChart {
            torus,
            active: active.to_vec(),
            sub_window,
            sub_model,
            s_idx,
            off_idx,
            aa,
            omegas,
        })
    }

    /// Number of hyperbolic coordinate pairs.
    pub fn c_dims(&self) -> usize {
        self.off_idx.len()
    }

    /// Number of torus angles.
    pub fn d_dims(&self) -> usize {
        self.s_idx.len()
    }

    /// Chart point to block state.
    pub fn lift(&self, cp: &ChartPoint) -> Result<LatticeState> {
        let mut st = LatticeState::zeros(self.sub_window.len());
        for (a, &k) in self.off_idx.iter().enumerate() {
            st.q[k] = 0.5 * (cp.u[a] - cp.s[a]);
            st.p[k] = 0.5 * (cp.u[a] + cp.s[a]);
        }
        for (a, &k) in self.s_idx.iter().enumerate() {
            let ps = self.aa[a].from_angle_action(cp.theta[a], cp.r[a])?;
            st.q[k] = ps.q;
            st.p[k] = ps.p;
        }
        Ok(st)
    }

    /// Block state to chart point.
    pub fn project(&self, st: &LatticeState) -> Result<ChartPoint> {
        let c = self.c_dims();
        let d = self.d_dims();
        let mut cp = ChartPoint::origin(c, d);
        for (a, &k) in self.off_idx.iter().enumerate() {
            cp.u[a] = st.q[k] + st.p[k];
            cp.s[a] = st.p[k] - st.q[k];
        }
        for (a, &k) in self.s_idx.iter().enumerate() {
            let (theta, r) = self.aa[a].to_angle_action(&crate::pendulum::PendulumState {
                q: st.q[k],
                p: st.p[k],
            })?;
            cp.theta[a] = theta;
            cp.r[a] = r;
        }
        Ok(cp)
    }

    /// Embed a block state into a state over the full model window (all other
    /// sites at the saddle).
    pub fn embed(&self, st: &LatticeState, window: &SiteWindow) -> LatticeState {
        let mut full = LatticeState::zeros(window.len());
        for (k, site) in self.sub_window.sites().iter().enumerate() {
            let j = window.index_of(*site).expect("block inside window");
            full.q[j] = st.q[k];
            full.p[j] = st.p[k];
        }
        full
    }

    /// Verify the adapted-system structure on sampled torus angles: the torus
    /// is invariant (hyperbolic and action components of the short-time flow
    /// vanish) and the angles advance at the rotation frequencies.
    pub fn verify_structure(&self, n_samples: usize) -> Result<f64> {
        let dt = 1e-2;
        let mut worst = 0.0f64;
        for i in 0..n_samples {
            let d = self.d_dims();
            let mut cp = ChartPoint::origin(self.c_dims(), d);
            for a in 0..d {
                cp.theta[a] = (2.0 * PI * (i + a + 1) as f64 * 0.37).rem_euclid(2.0 * PI);
            }
            let st = self.lift(&cp)?;
            let img = integrate(&self.sub_model, &st, dt, Scheme::Adaptive { tol: 1e-13 })?;
            let out = self.project(&img)?;
            for a in 0..self.c_dims() {
                worst = worst.max(out.u[a].abs()).max(out.s[a].abs());
            }
            for a in 0..d {
                worst = worst.max(out.r[a].abs());
                let adv = (out.theta[a] - cp.theta[a]).rem_euclid(2.0 * PI);
                let expect = (self.omegas[a] * dt).rem_euclid(2.0 * PI);
                worst = worst.max((adv - expect).abs());
            }
        }
        if worst > 1e-10 {
            return Err(Error::ChartDomain(format!(
                "adapted-system structure violated: worst deviation {worst:.3e}"
            )));
        }
        Ok(worst)
    }

    /// Finite-difference Jacobian of the time-T chart map at a torus point,
    /// ordered (u.., s.., theta.., r..).
    pub fn chart_jacobian(&self, theta: &[f64], t_map: f64) -> Result<Vec<Vec<f64>>> {
        let c = self.c_dims();
        let d = self.d_dims();
        let n = 2 * c + 2 * d;
        let h = 1e-6;
        let mut base = ChartPoint::origin(c, d);
        base.theta.copy_from_slice(theta);
        let coord =
            |cp: &ChartPoint, i: usize| -> f64 {
                if i < c {
                    cp.u[i]
                } else if i < 2 * c {
                    cp.s[i - c]
                } else if i < 2 * c + d {
                    cp.theta[i - 2 * c]
                } else {
                    cp.r[i - 2 * c - d]
                }
            };
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut cp_p = base.clone();
            let mut cp_m = base.clone();
            *coord_mut(&mut cp_p, c, d, j) += h;
            *coord_mut(&mut cp_m, c, d, j) -= h;
            let ip = self.project(&integrate(
                &self.sub_model,
                &self.lift(&cp_p)?,
                t_map,
                Scheme::Adaptive { tol: 1e-13 },
            )?)?;
            let im = self.project(&integrate(
                &self.sub_model,
                &self.lift(&cp_m)?,
                t_map,
                Scheme::Adaptive { tol: 1e-13 },
            )?)?;
            for i in 0..n {
                let mut diff = coord(&ip, i) - coord(&im, i);
                if i >= 2 * c && i < 2 * c + d {
                    // angle difference modulo 2 pi
                    diff = wrap_pm_pi(diff);
                }
                jac[i][j] = diff / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

fn coord_mut<'a>(cp: &'a mut ChartPoint, c: usize, d: usize, i: usize) -> &'a mut f64 {
    if i < c {
        &mut cp.u[i]
    } else if i < 2 * c {
        &mut cp.s[i - c]
    } else if i < 2 * c + d {
        &mut cp.theta[i - 2 * c]
    } else {
        let _ = d;
        &mut cp.r[i - 2 * c - d]
    }
}

fn wrap_pm_pi(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Chebyshev–Lobatto nodes on `[-delta, delta]`, `n` odd so 0 is a node
/// (snapped to exactly zero so the torus node is pinned exactly).
fn cheb_nodes(n: usize, delta: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if 2 * i == n - 1 {
                0.0
            } else {
                delta * (PI * i as f64 / (n - 1) as f64).cos()
            }
        })
        .collect()
}

/// Barycentric interpolation weights for the Chebyshev–Lobatto grid.
fn cheb_eval_weights(nodes: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    for (i, &xi) in nodes.iter().enumerate() {
        if (x - xi).abs() < 1e-300 {
            let mut w = vec![0.0; n];
            w[i] = 1.0;
            return w;
        }
    }
    let mut w = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut sigma = if i % 2 == 0 { 1.0 } else { -1.0 };
        if i == 0 || i == n - 1 {
            sigma *= 0.5;
        }
        let wi = sigma / (x - nodes[i]);
        w[i] = wi;
        total += wi;
    }
    for wi in &mut w {
        *wi /= total;
    }
    w
}

/// Trigonometric (Dirichlet kernel) interpolation weights on the uniform
/// angle grid with an odd number of nodes.
fn trig_eval_weights(n: usize, theta: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for (j, wj) in w.iter_mut().enumerate() {
        let t = theta - 2.0 * PI * j as f64 / n as f64;
        let s = (0.5 * t).sin();
        *wj = if s.abs() < 1e-14 {
            1.0
        } else {
            (n as f64 * 0.5 * t).sin() / (n as f64 * s)
        };
    }
    w
}

/// A discretized invariant-manifold graph: fiber coordinates (complementary
/// hyperbolic coordinates and actions) as a function of the base (contracting
/// or expanding coordinates and torus angles).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphFunction {
    pub side: Side,
    pub delta: f64,
    /// Nodes per hyperbolic base dimension (Chebyshev–Lobatto, odd count).
    pub cheb_n: usize,
    /// Nodes per angle dimension (uniform, odd count).
    pub ang_n: usize,
    pub c_dims: usize,
    pub d_dims: usize,
    /// Grid values, node-major; per node `c_dims` fiber hyperbolic
    /// coordinates followed by `d_dims` actions.
    pub values: Vec<f64>,
}

impl GraphFunction {
    pub fn zeros(side: Side, delta: f64, cheb_n: usize, ang_n: usize, c: usize, d: usize) -> Self {
        assert!(cheb_n % 2 == 1 && ang_n % 2 == 1, "node counts must be odd");
        let nodes = cheb_n.pow(c as u32) * ang_n.pow(d as u32);
        GraphFunction {
            side,
            delta,
            cheb_n,
            ang_n,
            c_dims: c,
            d_dims: d,
            values: vec![0.0; nodes * (c + d)],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.cheb_n.pow(self.c_dims as u32) * self.ang_n.pow(self.d_dims as u32)
    }

    pub fn fiber_dim(&self) -> usize {
        self.c_dims + self.d_dims
    }

    /// Decode a flat node index into per-dimension indices
    /// (hyperbolic dims first, then angles).
    pub fn node_multi_index(&self, mut idx: usize) -> Vec<usize> {
        let dims = self.dims();
        let mut mi = vec![0; dims.len()];
        for (k, &n) in dims.iter().enumerate().rev() {
            mi[k] = idx % n;
            idx /= n;
        }
        mi
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.cheb_n; self.c_dims];
        d.extend(std::iter::repeat(self.ang_n).take(self.d_dims));
        d
    }

    /// Base coordinates of a grid node: hyperbolic values then angles.
    pub fn node_base(&self, idx: usize) -> Vec<f64> {
        let mi = self.node_multi_index(idx);
        let nodes = cheb_nodes(self.cheb_n, self.delta);
        let mut base = Vec::with_capacity(mi.len());
        for k in 0..self.c_dims {
            base.push(nodes[mi[k]]);
        }
        for k in 0..self.d_dims {
            base.push(2.0 * PI * mi[self.c_dims + k] as f64 / self.ang_n as f64);
        }
        base
    }

    pub fn node_value(&self, idx: usize) -> &[f64] {
        let f = self.fiber_dim();
        &self.values[idx * f..(idx + 1) * f]
    }

    pub fn node_value_mut(&mut self, idx: usize) -> &mut [f64] {
        let f = self.fiber_dim();
        &mut self.values[idx * f..(idx + 1) * f]
    }

    /// Evaluate the graph at an arbitrary base point by tensor-product
    /// barycentric (hyperbolic dims) and trigonometric (angle dims)
    /// interpolation.
    pub fn eval(&self, base: &[f64]) -> Vec<f64> {
        let nodes = cheb_nodes(self.cheb_n, self.delta);
        let mut wdims: Vec<Vec<f64>> = Vec::with_capacity(base.len());
        for k in 0..self.c_dims {
            wdims.push(cheb_eval_weights(&nodes, base[k]));
        }
        for k in 0..self.d_dims {
            wdims.push(trig_eval_weights(self.ang_n, base[self.c_dims + k]));
        }
        let f = self.fiber_dim();
        let mut out = vec![0.0; f];
        let dims = self.dims();
        let n_nodes = self.n_nodes();
        for idx in 0..n_nodes {
            let mut rem = idx;
            let mut w = 1.0;
            for k in (0..dims.len()).rev() {
                let i = rem % dims[k];
                rem /= dims[k];
                w *= wdims[k][i];
            }
            if w != 0.0 {
                let v = self.node_value(idx);
                for (o, val) in out.iter_mut().zip(v) {
                    *o += w * val;
                }
            }
        }
        out
    }

    /// Sup norm of the grid values.
    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Empirical Lipschitz constant over the grid (max fiber difference over
    /// base distance for neighboring nodes).
    pub fn lipschitz(&self) -> f64 {
        let mut worst = 0.0f64;
        let n = self.n_nodes();
        for i in 0..n {
            let bi = self.node_base(i);
            let vi = self.node_value(i);
            for j in (i + 1)..n {
                let bj = self.node_base(j);
                let mut dist = 0.0f64;
                for (k, (a, b)) in bi.iter().zip(&bj).enumerate() {
                    let d = if k < self.c_dims {
                        (a - b).abs()
                    } else {
                        wrap_pm_pi(a - b).abs()
                    };
                    dist = dist.max(d);
                }
                if dist < 1e-12 {
                    continue;
                }
                let dv = vi
                    .iter()
                    .zip(self.node_value(j))
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                worst = worst.max(dv / dist);
            }
        }
        worst
    }
}

/// Diagnostics of the graph-transform solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionDiagnostics {
    /// Measured expanding multiplier of the time-T map (per fiber hyperbolic
    /// coordinate, worst case taken).
    pub lambda: f64,
    /// Norm of the torus (angle-action) block of the time-T map.
    pub beta: f64,
    /// Coupling of the angle variables into the hyperbolic block.
    pub k_theta: f64,
    /// `lambda^{-1} * beta * (1 + k_theta)`, must be < 1.
    pub contraction_condition: f64,
    /// Measured per-sweep contraction factor of the transform.
    pub rho: f64,
    pub iterations: usize,
    pub residual: f64,
    pub sup: f64,
    pub lipschitz: f64,
}

/// Options for the graph solve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GraphSolveOptions {
    pub delta: f64,
    pub map_time: f64,
    pub cheb_n: usize,
    pub ang_n: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub integrator_tol: f64,
}

impl Default for GraphSolveOptions {
    fn default() -> Self {
        GraphSolveOptions {
            delta: 0.2,
            map_time: 2.0,
            cheb_n: 9,
            ang_n: 17,
            tol: 1e-10,
            max_iter: 60,
            integrator_tol: 1e-12,
        }
    }
}

/// Flow a chart point by the block dynamics for time `t` and project back.
fn chart_map(chart: &AdaptedChart, cp: &ChartPoint, t: f64, tol: f64) -> Result<ChartPoint> {
    let st = chart.lift(cp)?;
    let img = integrate(&chart.sub_model, &st, t, Scheme::Adaptive { tol })?;
    chart.project(&img)
}

/// Solve the graph-transform fixed point for the stable or unstable manifold
/// of the chart's torus.
///
/// The stable graph assigns `(u, r)` to base `(s, theta)` and is invariant
/// under the forward time-T map; the unstable graph assigns `(s, r)` to
/// `(u, theta)` using the backward map. Each sweep applies the
/// residual-correction form of the transform: the observed fiber mismatch at
/// the image point, pulled back through the expanding multiplier.
pub fn solve_graph(
    chart: &AdaptedChart,
    side: Side,
    opt: &GraphSolveOptions,
) -> Result<(GraphFunction, ContractionDiagnostics)> {
    let c = chart.c_dims();
    let d = chart.d_dims();
    let t_map = match side {
        Side::Stable => opt.map_time,
        Side::Unstable => -opt.map_time,
    };
    // measure the linear blocks of the time-T chart map at the torus
    let jac = chart.chart_jacobian(&vec![0.4; d], opt.map_time)?;
    let n = 2 * c + 2 * d;
    // expanding multipliers: du'_k/du_k for the forward map; for the backward
    // map the roles of u and s swap and the multiplier is ds'_k/ds_k of the
    // backward map, i.e. 1/(ds'_k/ds_k) of the forward one.
    let mut lambda = f64::INFINITY;
    for k in 0..c {
        let m = match side {
            Side::Stable => jac[k][k].abs(),
            Side::Unstable => 1.0 / jac[c + k][c + k].abs(),
        };
        lambda = lambda.min(m);
    }
    if lambda <= 1.0 {
        return Err(Error::Hyperbolicity(format!(
            "expanding multiplier {lambda:.3} <= 1 for the time-T map"
        )));
    }
    // torus block norm and angle coupling
    let mut beta = 0.0f64;
    for i in 2 * c..n {
        let mut row = 0.0;
        for j in 2 * c..n {
            row += jac[i][j].abs();
        }
        beta = beta.max(row);
    }
    let mut k_theta = 0.0f64;
    for i in 0..2 * c {
        let mut row = 0.0;
        for j in 2 * c..n {
            row += jac[i][j].abs();
        }
        k_theta = k_theta.max(row);
    }
    let condition = beta * (1.0 + k_theta) / lambda;

    let mut graph = GraphFunction::zeros(side, opt.delta, opt.cheb_n, opt.ang_n, c, d);
    let fiber_mult: Vec<f64> = match side {
        Side::Stable => (0..c).map(|k| jac[k][k]).collect(),
        Side::Unstable => (0..c).map(|k| 1.0 / jac[c + k][c + k]).collect(),
    };
    let n_nodes = graph.n_nodes();
    let mut rho = 0.0f64;
    let mut prev_change = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..opt.max_iter {
        iterations = it + 1;
        let snapshot = graph.clone();
        let results: Vec<Result<(Vec<f64>, f64)>> = (0..n_nodes)
            .into_par_iter()
            .map(|idx| {
                let base = snapshot.node_base(idx);
                // pin the torus node exactly
                if base[..c].iter().all(|b| *b == 0.0) {
                    return Ok((vec![0.0; c + d], 0.0));
                }
                let val = snapshot.node_value(idx);
                let mut cp = ChartPoint::origin(c, d);
                match side {
                    Side::Stable => {
                        cp.s.copy_from_slice(&base[..c]);
                        cp.u.copy_from_slice(&val[..c]);
                    }
                    Side::Unstable => {
                        cp.u.copy_from_slice(&base[..c]);
                        cp.s.copy_from_slice(&val[..c]);
                    }
                }
                cp.theta.copy_from_slice(&base[c..]);
                cp.r.copy_from_slice(&val[c..]);
                let img = chart_map(chart, &cp, t_map, opt.integrator_tol)?;
                let (img_base_h, img_fiber_h) = match side {
                    Side::Stable => (&img.s, &img.u),
                    Side::Unstable => (&img.u, &img.s),
                };
                for b in img_base_h {
                    if b.abs() > opt.delta {
                        return Err(Error::ChartDomain(format!(
                            "image base coordinate {b:.3e} left the domain |.| <= {}",
                            opt.delta
                        )));
                    }
                }
                let mut img_base: Vec<f64> = img_base_h.clone();
                img_base.extend_from_slice(&img.theta);
                let predicted = snapshot.eval(&img_base);
                // residual between the observed fiber at the image and the
                // graph's prediction there
                let mut res = vec![0.0; c + d];
                for k in 0..c {
                    res[k] = img_fiber_h[k] - predicted[k];
                }
                for k in 0..d {
                    res[c + k] = img.r[k] - predicted[c + k];
                }
                let mut new_val = val.to_vec();
                let mut worst = 0.0f64;
                for k in 0..c {
                    new_val[k] -= res[k] / fiber_mult[k];
                    worst = worst.max(res[k].abs());
                }
                for k in 0..d {
                    new_val[c + k] -= res[c + k];
                    worst = worst.max(res[c + k].abs());
                }
                Ok((new_val, worst))
            })
            .collect();
        let mut change = 0.0f64;
        let mut worst_res = 0.0f64;
        for (idx, r) in results.into_iter().enumerate() {
            let (new_val, res) = r?;
            worst_res = worst_res.max(res);
            let old = graph.node_value(idx).to_vec();
            for (o, nv) in old.iter().zip(&new_val) {
                change = change.max((o - nv).abs());
            }
            graph.node_value_mut(idx).copy_from_slice(&new_val);
        }
        residual = worst_res;
        if prev_change.is_finite() && prev_change > 0.0 {
            rho = change / prev_change;
        }
        prev_change = change;
        if worst_res < opt.tol {
            break;
        }
    }
    if residual >= opt.tol {
        return Err(Error::Divergence(format!(
            "graph transform residual {residual:.3e} after {iterations} sweeps \
             (condition = {condition:.3})"
        )));
    }
    let diag = ContractionDiagnostics {
        lambda,
        beta,
        k_theta,
        contraction_condition: condition,
        rho,
        iterations,
        residual,
        sup: graph.sup(),
        lipschitz: graph.lipschitz(),
    };
    Ok((graph, diag))
}

/// Invariance residual of a solved graph under the time-`t` map, measured on
/// every grid node (sup over nodes).
pub fn invariance_residual(
    chart: &AdaptedChart,
    graph: &GraphFunction,
    t: f64,
    integrator_tol: f64,
) -> Result<f64> {
    let c = graph.c_dims;
    let d = graph.d_dims;
    let t_map = match graph.side {
        Side::Stable => t,
        Side::Unstable => -t,
    };
    let worst = (0..graph.n_nodes())
        .into_par_iter()
        .map(|idx| -> Result<f64> {
            let base = graph.node_base(idx);
            let val = graph.node_value(idx);
            let mut cp = ChartPoint::origin(c, d);
            match graph.side {
                Side::Stable => {
                    cp.s.copy_from_slice(&base[..c]);
                    cp.u.copy_from_slice(&val[..c]);
                }
                Side::Unstable => {
                    cp.u.copy_from_slice(&base[..c]);
                    cp.s.copy_from_slice(&val[..c]);
                }
            }
            cp.theta.copy_from_slice(&base[c..]);
            cp.r.copy_from_slice(&val[c..]);
            let img = chart_map(chart, &cp, t_map, integrator_tol)?;
            let (img_base_h, img_fiber_h) = match graph.side {
                Side::Stable => (&img.s, &img.u),
                Side::Unstable => (&img.u, &img.s),
            };
            let mut img_base = img_base_h.clone();
            img_base.extend_from_slice(&img.theta);
            let predicted = graph.eval(&img_base);
            let mut res = 0.0f64;
            for k in 0..c {
                res = res.max((img_fiber_h[k] - predicted[k]).abs());
            }
            for k in 0..d {
                res = res.max((img.r[k] - predicted[c + k]).abs());
            }
            Ok(res)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)));
    worst
}

/// Lift a graph base point to a block state.
pub fn graph_state(
    chart: &AdaptedChart,
    graph: &GraphFunction,
    base: &[f64],
) -> Result<LatticeState> {
    let c = graph.c_dims;
    let d = graph.d_dims;
    let val = graph.eval(base);
    let mut cp = ChartPoint::origin(c, d);
    match graph.side {
        Side::Stable => {
            cp.s.copy_from_slice(&base[..c]);
            cp.u.copy_from_slice(&val[..c]);
        }
        Side::Unstable => {
            cp.u.copy_from_slice(&base[..c]);
            cp.s.copy_from_slice(&val[..c]);
        }
    }
    cp.theta.copy_from_slice(&base[c..]);
    cp.r.copy_from_slice(&val[c..]);
    chart.lift(&cp)
}

/// The straightening coordinate change built from both solved graphs: in the
/// new coordinates the stable manifold is `{u = 0, r = 0}` exactly and the
/// unstable manifold `{s = 0, r = 0}` up to interpolation error, with the
/// torus fixed pointwise.
#[derive(Clone, Debug)]
pub struct Straightening {
    pub stable: GraphFunction,
    /// Unstable graph reparameterized by the straightened expanding
    /// coordinate.
    pub unstable_tilde: GraphFunction,
}

impl Straightening {
    /// Build from solved graphs. The unstable graph is re-expressed in the
    /// coordinate `u_hat = u - gamma^s_u(gamma^u_s(u, theta), theta)` by a
    /// per-node Newton solve.
    pub fn new(stable: &GraphFunction, unstable: &GraphFunction) -> Result<Self> {
        if stable.side != Side::Stable || unstable.side != Side::Unstable {
            return Err(Error::ChartDomain("need one stable and one unstable graph".into()));
        }
        let c = unstable.c_dims;
        let d = unstable.d_dims;
        let mut tilde = unstable.clone();
        for idx in 0..unstable.n_nodes() {
            let base = unstable.node_base(idx); // (u_hat target, theta)
            let u_hat_target = &base[..c];
            let theta = &base[c..];
            // solve u - gs_u(gu_s(u, theta), theta) = u_hat componentwise by
            // fixed-point iteration (the correction is third order)
            let mut u = u_hat_target.to_vec();
            for _ in 0..50 {
                let mut ub = u.clone();
                ub.extend_from_slice(theta);
                let gu = unstable.eval(&ub);
                let mut sb = gu[..c].to_vec();
                sb.extend_from_slice(theta);
                let gs = stable.eval(&sb);
                let mut worst = 0.0f64;
                for k in 0..c {
                    let new_u = u_hat_target[k] + gs[k];
                    worst = worst.max((new_u - u[k]).abs());
                    u[k] = new_u;
                }
                if worst < 1e-14 {
                    break;
                }
            }
            let mut ub = u.clone();
            ub.extend_from_slice(theta);
            let gu = unstable.eval(&ub);
            let val = tilde.node_value_mut(idx);
            val[..c].copy_from_slice(&gu[..c]);
            val[c..].copy_from_slice(&gu[c..c + d]);
        }
        Ok(Straightening {
            stable: stable.clone(),
            unstable_tilde: tilde,
        })
    }

    /// Forward change `(u, s, theta, r) -> (u_hat, s_hat, theta, r_hat)`.
    pub fn forward(&self, cp: &ChartPoint) -> ChartPoint {
        let c = self.stable.c_dims;
        let mut sb = cp.s.clone();
        sb.extend_from_slice(&cp.theta);
        let gs = self.stable.eval(&sb);
        let mut out = cp.clone();
        for k in 0..c {
            out.u[k] = cp.u[k] - gs[k];
        }
        for k in 0..self.stable.d_dims {
            out.r[k] = cp.r[k] - gs[c + k];
        }
        let mut ub = out.u.clone();
        ub.extend_from_slice(&cp.theta);
        let gu = self.unstable_tilde.eval(&ub);
        for k in 0..c {
            out.s[k] -= gu[k];
        }
        for k in 0..self.stable.d_dims {
            out.r[k] -= gu[c + k];
        }
        out
    }

    /// Inverse change.
    pub fn inverse(&self, cp: &ChartPoint) -> ChartPoint {
        let c = self.stable.c_dims;
        let d = self.stable.d_dims;
        let mut out = cp.clone();
        let mut ub = cp.u.clone();
        ub.extend_from_slice(&cp.theta);
        let gu = self.unstable_tilde.eval(&ub);
        for k in 0..c {
            out.s[k] = cp.s[k] + gu[k];
        }
        let mut r_hat = cp.r.clone();
        for k in 0..d {
            r_hat[k] += gu[c + k];
        }
        let mut sb = out.s.clone();
        sb.extend_from_slice(&cp.theta);
        let gs = self.stable.eval(&sb);
        for k in 0..c {
            out.u[k] = cp.u[k] + gs[k];
        }
        for k in 0..d {
            out.r[k] = r_hat[k] + gs[c + k];
        }
        out
    }
}

/// The exact stable branch of the uncoupled pendulum saddle in hyperbolic
/// coordinates: for a contracting value `s`, the expanding coordinate on the
/// branch `p = -2 sin(q/2)` (energy zero, decaying forward in time).
pub fn uncoupled_stable_branch(s: f64) -> f64 {
    // solve -2 sin(q/2) - q = s for q, then u = q - 2 sin(q/2)
    let mut q = -s / 2.0;
    for _ in 0..100 {
        let f = -2.0 * (0.5 * q).sin() - q - s;
        let df = -(0.5 * q).cos() - 1.0;
        let step = f / df;
        q -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    q - 2.0 * (0.5 * q).sin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::DecayFunction;
    use crate::lattice::PerturbationSpec;

    fn model(eps: f64) -> LatticeModel {
        let window = Arc::new(SiteWindow::interval(-2, 6));
        let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
        LatticeModel::new(
            window,
            gamma,
            eps,
            PerturbationSpec::default_family(1.0, 0.3, 0.5),
            PathSpec::line_1d(0, 3),
        )
        .unwrap()
    }

    fn block() -> [Site; 3] {
        [Site::new_1d(0), Site::new_1d(1), Site::new_1d(2)]
    }

    #[test]
    fn chart_round_trip_and_torus_origin() {
        let m = model(0.004);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.6, Site::new_1d(1), 0.4);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        assert_eq!(chart.c_dims(), 1);
        assert_eq!(chart.d_dims(), 2);
        // torus point maps to the origin
        let cp = ChartPoint {
            u: vec![0.0],
            s: vec![0.0],
            theta: vec![1.2, 4.4],
            r: vec![0.0, 0.0],
        };
        let st = chart.lift(&cp).unwrap();
        let k2 = chart.off_idx[0];
        assert_eq!(st.q[k2], 0.0);
        assert_eq!(st.p[k2], 0.0);
        let back = chart.project(&st).unwrap();
        assert!((back.theta[0] - 1.2).abs() < 1e-10);
        assert!((back.theta[1] - 4.4).abs() < 1e-10);
        assert!(back.r[0].abs() < 1e-12 && back.r[1].abs() < 1e-12);
        // generic round trip
        let cp2 = ChartPoint {
            u: vec![0.13],
            s: vec![-0.08],
            theta: vec![0.5, 2.5],
            r: vec![0.01, -0.02],
        };
        let st2 = chart.lift(&cp2).unwrap();
        let back2 = chart.project(&st2).unwrap();
        assert!((back2.u[0] - 0.13).abs() < 1e-10);
        assert!((back2.s[0] + 0.08).abs() < 1e-10);
        assert!((back2.r[0] - 0.01).abs() < 1e-10);
        assert!((back2.r[1] + 0.02).abs() < 1e-10);
    }

    #[test]
    fn structure_verified_including_coupling() {
        let m = model(0.005);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        assert!(chart.verify_structure(5).unwrap() < 1e-10);
        let p = TorusSpec::periodic(Site::new_1d(0), 1.0);
        let chart_p = AdaptedChart::new(&m, p, block()).unwrap();
        assert!(chart_p.verify_structure(5).unwrap() < 1e-10);
    }

    #[test]
    fn chart_jacobian_block_structure_uncoupled() {
        let m = model(0.0);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let t = 1.0;
        let jac = chart.chart_jacobian(&[0.7, 1.9], t).unwrap();
        // hyperbolic block diag(e^T, e^-T)
        assert!((jac[0][0] - t.exp()).abs() < 1e-4);
        assert!((jac[1][1] - (-t).exp()).abs() < 1e-4);
        assert!(jac[0][1].abs() < 1e-6 && jac[1][0].abs() < 1e-6);
        // twist block: theta' = theta + omega(r) t, r' = r
        assert!((jac[2][2] - 1.0).abs() < 1e-5);
        assert!((jac[3][3] - 1.0).abs() < 1e-5);
        assert!((jac[4][4] - 1.0).abs() < 1e-5);
        assert!((jac[5][5] - 1.0).abs() < 1e-5);
        // no coupling between hyperbolic and torus blocks at eps=0
        for i in 0..2 {
            for j in 2..6 {
                assert!(jac[i][j].abs() < 1e-5, "jac[{i}][{j}] = {}", jac[i][j]);
            }
        }
    }

    #[test]
    fn interpolation_exactness() {
        // a graph filled with a polynomial-in-s, trig-in-theta function is
        // reproduced exactly by the tensor interpolation
        let mut g = GraphFunction::zeros(Side::Stable, 0.3, 7, 9, 1, 1);
        let f = |s: f64, th: f64| 0.3 * s * s * s - 0.1 * s + 0.05 * (2.0 * th).cos();
        for idx in 0..g.n_nodes() {
            let b = g.node_base(idx);
            let v = f(b[0], b[1]);
            g.node_value_mut(idx)[0] = v;
            g.node_value_mut(idx)[1] = 0.5 * v;
        }
        for (s, th) in [(0.11, 0.3), (-0.27, 5.1), (0.0, 2.2), (0.3, 0.0)] {
            let got = g.eval(&[s, th]);
            assert!((got[0] - f(s, th)).abs() < 1e-13, "at ({s},{th})");
            assert!((got[1] - 0.5 * f(s, th)).abs() < 1e-13);
        }
    }

    #[test]
    fn stable_graph_matches_separatrix_branch_uncoupled() {
        let m = model(0.0);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let opt = GraphSolveOptions {
            delta: 0.2,
            ang_n: 5,
            ..GraphSolveOptions::default()
        };
        let (g, diag) = solve_graph(&chart, Side::Stable, &opt).unwrap();
        assert!(diag.residual < opt.tol);
        assert!(diag.rho < 0.8, "rho = {}", diag.rho);
        // gamma(0, theta) = 0 exactly on the grid
        for idx in 0..g.n_nodes() {
            let b = g.node_base(idx);
            if b[0] == 0.0 {
                assert!(g.node_value(idx).iter().all(|v| *v == 0.0));
            }
        }
        // compare with the exact branch u(s) and its cubic coefficient
        for &s in &[0.2, 0.1, -0.15, -0.2] {
            let exact = uncoupled_stable_branch(s);
            let got = g.eval(&[s, 0.9, 3.3])[0];
            assert!((got - exact).abs() < 1e-9, "s = {s}: {got} vs {exact}");
        }
        let coeff = g.eval(&[0.2, 0.0, 0.0])[0] / 0.2f64.powi(3);
        let series = uncoupled_stable_branch(0.2) / 0.2f64.powi(3);
        assert!((coeff - series).abs() / series.abs() < 1e-6);
        assert!((coeff - (-1.0 / 192.0)).abs() / (1.0 / 192.0) < 1e-3);
        // r components vanish at eps = 0
        assert!(g.eval(&[0.15, 1.0, 2.0])[1].abs() < 1e-10);
    }

    #[test]
    fn unstable_graph_is_mirror_at_eps_zero() {
        let m = model(0.0);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let opt = GraphSolveOptions {
            delta: 0.2,
            ang_n: 5,
            ..GraphSolveOptions::default()
        };
        let (g, _) = solve_graph(&chart, Side::Unstable, &opt).unwrap();
        // by the pendulum's time-reversal symmetry the unstable branch is
        // s = gamma(u) with the same function
        for &u in &[0.2, -0.1, 0.05] {
            let exact = uncoupled_stable_branch(u);
            let got = g.eval(&[u, 1.3, 0.2])[0];
            assert!((got - exact).abs() < 1e-9, "u = {u}");
        }
    }

    #[test]
    fn coupled_graph_invariance_and_t_independence() {
        let m = model(0.005);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let opt = GraphSolveOptions {
            delta: 0.15,
            cheb_n: 13,
            ang_n: 17,
            tol: 1e-11,
            ..GraphSolveOptions::default()
        };
        let (g, diag) = solve_graph(&chart, Side::Stable, &opt).unwrap();
        assert!(diag.contraction_condition < 1.0);
        let res_t = invariance_residual(&chart, &g, opt.map_time, 1e-12).unwrap();
        assert!(res_t < 1e-8, "time-T residual {res_t}");
        let res_2t = invariance_residual(&chart, &g, 2.0 * opt.map_time, 1e-12).unwrap();
        assert!(res_2t < 3.0 * res_t.max(opt.tol), "time-2T residual {res_2t}");
        // sup bound O(delta^2 (delta + eps))
        assert!(diag.sup < 10.0 * (opt.delta.powi(3) + opt.delta * m.eps));
    }

    #[test]
    fn periodic_orbit_graph_two_contracting_dims() {
        let m = model(0.004);
        let torus = TorusSpec::periodic(Site::new_1d(0), 1.0);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let opt = GraphSolveOptions {
            delta: 0.12,
            cheb_n: 7,
            ang_n: 9,
            tol: 1e-10,
            ..GraphSolveOptions::default()
        };
        let (g, diag) = solve_graph(&chart, Side::Stable, &opt).unwrap();
        assert!(diag.residual < opt.tol);
        assert_eq!(g.c_dims, 2);
        // forward orbits of graph points approach the torus
        let st = graph_state(&chart, &g, &[0.1, -0.08, 2.0]).unwrap();
        let mut cur = st;
        let mut dist_prev = f64::INFINITY;
        for _ in 0..4 {
            cur = integrate(&chart.sub_model, &cur, 2.0, Scheme::Adaptive { tol: 1e-12 }).unwrap();
            let cp = chart.project(&cur).unwrap();
            let dist = cp.s.iter().chain(&cp.u).fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dist < dist_prev);
            dist_prev = dist;
        }
        assert!(dist_prev < 1e-3);
    }

    #[test]
    fn straightening_properties() {
        let m = model(0.005);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let opt = GraphSolveOptions {
            delta: 0.15,
            cheb_n: 9,
            ang_n: 9,
            tol: 1e-10,
            ..GraphSolveOptions::default()
        };
        let (gs, _) = solve_graph(&chart, Side::Stable, &opt).unwrap();
        let (gu, _) = solve_graph(&chart, Side::Unstable, &opt).unwrap();
        let ch = Straightening::new(&gs, &gu).unwrap();
        // torus fixed pointwise
        let torus_pt = ChartPoint {
            u: vec![0.0],
            s: vec![0.0],
            theta: vec![1.0, 2.0],
            r: vec![0.0, 0.0],
        };
        let img = ch.forward(&torus_pt);
        assert!(img.u[0].abs() < 1e-12 && img.s[0].abs() < 1e-12);
        assert!(img.r[0].abs() < 1e-12 && img.r[1].abs() < 1e-12);
        // stable graph maps into {u_hat = 0, r_hat = 0} exactly
        for &s in &[0.1, -0.12] {
            let val = gs.eval(&[s, 0.8, 1.7]);
            let cp = ChartPoint {
                u: vec![val[0]],
                s: vec![s],
                theta: vec![0.8, 1.7],
                r: vec![val[1], val[2]],
            };
            let out = ch.forward(&cp);
            assert!(out.u[0].abs() < 1e-13);
            assert!(out.r[0].abs() < 1e-13 && out.r[1].abs() < 1e-13);
        }
        // unstable graph maps into {s_hat = 0, r_hat = 0} up to interpolation
        for &u in &[0.1, -0.12] {
            let val = gu.eval(&[u, 0.8, 1.7]);
            let cp = ChartPoint {
                u: vec![u],
                s: vec![val[0]],
                theta: vec![0.8, 1.7],
                r: vec![val[1], val[2]],
            };
            let out = ch.forward(&cp);
            assert!(out.s[0].abs() < 1e-9, "s residual {}", out.s[0]);
            assert!(out.r[0].abs() < 1e-9 && out.r[1].abs() < 1e-9);
        }
        // round trip and near-identity
        let cp = ChartPoint {
            u: vec![0.07],
            s: vec![-0.05],
            theta: vec![2.2, 0.4],
            r: vec![0.003, -0.001],
        };
        let back = ch.inverse(&ch.forward(&cp));
        assert!((back.u[0] - cp.u[0]).abs() < 1e-12);
        assert!((back.s[0] - cp.s[0]).abs() < 1e-12);
        assert!((back.r[0] - cp.r[0]).abs() < 1e-12);
        let fwd = ch.forward(&cp);
        let dist = (fwd.u[0] - cp.u[0])
            .abs()
            .max((fwd.s[0] - cp.s[0]).abs())
            .max((fwd.r[0] - cp.r[0]).abs());
        assert!(dist < 2.0 * (opt.delta.powi(3) + opt.delta * m.eps));
    }

    #[test]
    fn domain_too_large_is_rejected() {
        let m = model(0.0);
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let chart = AdaptedChart::new(&m, torus, block()).unwrap();
        let opt = GraphSolveOptions {
            delta: 3.5,
            ang_n: 5,
            max_iter: 10,
            ..GraphSolveOptions::default()
        };
        assert!(solve_graph(&chart, Side::Stable, &opt).is_err());
    }

    #[test]
    fn eps_regularity_first_difference() {
        // finite-difference d(gamma)/d(eps) is stable across grid refinement
        let torus = TorusSpec::two_torus(Site::new_1d(0), 0.5, Site::new_1d(1), 0.5);
        let mut slopes = Vec::new();
        for (cheb_n, ang_n) in [(7, 7), (9, 9)] {
            let mut vals = Vec::new();
            for eps in [0.002, 0.004] {
                let m = model(eps);
                let chart = AdaptedChart::new(&m, torus.clone(), block()).unwrap();
                let opt = GraphSolveOptions {
                    delta: 0.15,
                    cheb_n,
                    ang_n,
                    tol: 1e-10,
                    ..GraphSolveOptions::default()
                };
                let (g, _) = solve_graph(&chart, Side::Stable, &opt).unwrap();
                vals.push(g.eval(&[0.1, 1.0, 2.0])[1]);
            }
            slopes.push((vals[1] - vals[0]) / 0.002);
        }
        assert!(
            (slopes[0] - slopes[1]).abs() <= 1e-4 * (1.0 + slopes[0].abs()),
            "slopes {slopes:?}"
        );
    }
}

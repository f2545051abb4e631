//! Time integration of the lattice vector field: Strang splitting for
//! long-time structure preservation, an adaptive 13-stage explicit 7(8) pair
//! for segments needing tight local error, the variational (tangent) flow for
//! Jacobians of time-T maps, and trajectory diagnostics.

use crate::lattice::{LatticeModel, LatticeState};
use crate::{Error, Result};
use std::io::Write;

/// Integration scheme selection.
#[derive(Clone, Copy, Debug)]
pub enum Scheme {
    /// Kick-drift-kick Strang splitting with fixed step; requires a coupling
    /// that depends on positions only.
    Splitting { dt: f64 },
    /// Adaptive embedded 7(8) explicit pair with local error tolerance.
    Adaptive { tol: f64 },
}

impl Scheme {
    pub fn default_splitting() -> Self {
        Scheme::Splitting { dt: 1e-3 }
    }

    pub fn default_adaptive() -> Self {
        Scheme::Adaptive { tol: 1e-12 }
    }
}

/// True when every coupling family is momentum-free, so the Hamiltonian
/// splits exactly into kinetic + potential parts.
fn splittable(model: &LatticeModel) -> bool {
    model
        .perturbation
        .families
        .iter()
        .all(|f| f.factors.iter().all(|s| s.p_power == 0))
}

/// Flow the state for time `t` (either sign).
pub fn integrate(model: &LatticeModel, state: &LatticeState, t: f64, scheme: Scheme) -> Result<LatticeState> {
    match scheme {
        Scheme::Splitting { dt } => integrate_splitting(model, state, t, dt),
        Scheme::Adaptive { tol } => {
            let mut flat = flatten(state);
            adaptive_flow(&mut flat, t, tol, &mut |y, dy| model_deriv(model, y, dy))?;
            Ok(unflatten(&flat))
        }
    }
}

fn integrate_splitting(
    model: &LatticeModel,
    state: &LatticeState,
    t: f64,
    dt: f64,
) -> Result<LatticeState> {
    if !splittable(model) {
        return Err(Error::Integration(
            "splitting scheme requires a position-only coupling; use the adaptive scheme".into(),
        ));
    }
    if dt <= 0.0 {
        return Err(Error::Integration(format!("need dt > 0, got {dt}")));
    }
    let n_steps = (t.abs() / dt).ceil().max(1.0) as u64;
    let h = t / n_steps as f64;
    let mut s = state.clone();
    // half kick
    kick(model, &mut s, 0.5 * h);
    for step in 0..n_steps {
        drift(&mut s, h);
        if step + 1 < n_steps {
            kick(model, &mut s, h);
        } else {
            kick(model, &mut s, 0.5 * h);
        }
    }
    Ok(s)
}

fn kick(model: &LatticeModel, s: &mut LatticeState, h: f64) {
    let (gq, _) = model.grad_h1(s);
    for k in 0..s.len() {
        s.p[k] += h * (s.q[k].sin() - model.eps * gq[k]);
    }
}

fn drift(s: &mut LatticeState, h: f64) {
    for k in 0..s.len() {
        s.q[k] += h * s.p[k];
    }
}

fn flatten(s: &LatticeState) -> Vec<f64> {
    let mut v = s.q.clone();
    v.extend_from_slice(&s.p);
    v
}

fn unflatten(v: &[f64]) -> LatticeState {
    let n = v.len() / 2;
    LatticeState {
        q: v[..n].to_vec(),
        p: v[n..].to_vec(),
    }
}

fn model_deriv(model: &LatticeModel, y: &[f64], dy: &mut [f64]) {
    let s = unflatten(y);
    let f = model.vector_field(&s);
    let n = s.len();
    dy[..n].copy_from_slice(&f.q);
    dy[n..].copy_from_slice(&f.p);
}

// 13-stage Fehlberg 7(8) embedded pair.
const STAGES: usize = 13;
const A: [[f64; 12]; STAGES] = {
    let mut a = [[0.0; 12]; STAGES];
    a[1][0] = 2.0 / 27.0;
    a[2][0] = 1.0 / 36.0;
    a[2][1] = 1.0 / 12.0;
    a[3][0] = 1.0 / 24.0;
    a[3][2] = 1.0 / 8.0;
    a[4][0] = 5.0 / 12.0;
    a[4][2] = -25.0 / 16.0;
    a[4][3] = 25.0 / 16.0;
    a[5][0] = 1.0 / 20.0;
    a[5][3] = 1.0 / 4.0;
    a[5][4] = 1.0 / 5.0;
    a[6][0] = -25.0 / 108.0;
    a[6][3] = 125.0 / 108.0;
    a[6][4] = -65.0 / 27.0;
    a[6][5] = 125.0 / 54.0;
    a[7][0] = 31.0 / 300.0;
    a[7][4] = 61.0 / 225.0;
    a[7][5] = -2.0 / 9.0;
    a[7][6] = 13.0 / 900.0;
    a[8][0] = 2.0;
    a[8][3] = -53.0 / 6.0;
    a[8][4] = 704.0 / 45.0;
    a[8][5] = -107.0 / 9.0;
    a[8][6] = 67.0 / 90.0;
    a[8][7] = 3.0;
    a[9][0] = -91.0 / 108.0;
    a[9][3] = 23.0 / 108.0;
    a[9][4] = -976.0 / 135.0;
    a[9][5] = 311.0 / 54.0;
    a[9][6] = -19.0 / 60.0;
    a[9][7] = 17.0 / 6.0;
    a[9][8] = -1.0 / 12.0;
    a[10][0] = 2383.0 / 4100.0;
    a[10][3] = -341.0 / 164.0;
    a[10][4] = 4496.0 / 1025.0;
    a[10][5] = -301.0 / 82.0;
    a[10][6] = 2133.0 / 4100.0;
    a[10][7] = 45.0 / 82.0;
    a[10][8] = 45.0 / 164.0;
    a[10][9] = 18.0 / 41.0;
    a[11][0] = 3.0 / 205.0;
    a[11][5] = -6.0 / 41.0;
    a[11][6] = -3.0 / 205.0;
    a[11][7] = -3.0 / 41.0;
    a[11][8] = 3.0 / 41.0;
    a[11][9] = 6.0 / 41.0;
    a[12][0] = -1777.0 / 4100.0;
    a[12][3] = -341.0 / 164.0;
    a[12][4] = 4496.0 / 1025.0;
    a[12][5] = -289.0 / 82.0;
    a[12][6] = 2193.0 / 4100.0;
    a[12][7] = 51.0 / 82.0;
    a[12][8] = 33.0 / 164.0;
    a[12][9] = 12.0 / 41.0;
    a[12][11] = 1.0;
    a
};
/// 8th-order solution weights (used for propagation).
const B8: [f64; STAGES] = [
    0.0,
    0.0,
    0.0,
    0.0,
    0.0,
    34.0 / 105.0,
    9.0 / 35.0,
    9.0 / 35.0,
    9.0 / 280.0,
    9.0 / 280.0,
    0.0,
    41.0 / 840.0,
    41.0 / 840.0,
];

/// Adaptive integration of `dy/dt = f(y)` (autonomous) over signed time `t`.
pub fn adaptive_flow<F>(y: &mut Vec<f64>, t: f64, tol: f64, f: &mut F) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if t == 0.0 {
        return Ok(());
    }
    let n = y.len();
    let dir = t.signum();
    let t_end = t.abs();
    let mut elapsed = 0.0;
    let mut h = (t_end / 10.0).min(0.1).max(1e-6);
    let mut k = vec![vec![0.0; n]; STAGES];
    let mut stage = vec![0.0; n];
    let mut steps = 0u64;
    while elapsed < t_end {
        if elapsed + h > t_end {
            h = t_end - elapsed;
        }
        let hs = dir * h;
        f(y, &mut k[0]);
        for i in 1..STAGES {
            for j in 0..n {
                let mut acc = 0.0;
                for (l, kl) in k.iter().enumerate().take(i) {
                    let a = A[i][l];
                    if a != 0.0 {
                        acc += a * kl[j];
                    }
                }
                stage[j] = y[j] + hs * acc;
            }
            let (head, tail) = k.split_at_mut(i);
            let _ = head;
            f(&stage, &mut tail[0]);
        }
        // error estimate: the 7th/8th order solutions differ by
        // 41/840 * h * (k1 + k11 - k12 - k13)
        let mut err = 0.0f64;
        for j in 0..n {
            let e = 41.0 / 840.0 * (k[0][j] + k[10][j] - k[11][j] - k[12][j]);
            err = err.max((hs * e).abs());
        }
        let scale = tol.max(1e-16);
        if err <= scale || h <= 1e-12 {
            for j in 0..n {
                let mut acc = 0.0;
                for (l, b) in B8.iter().enumerate() {
                    if *b != 0.0 {
                        acc += b * k[l][j];
                    }
                }
                y[j] += hs * acc;
            }
            elapsed += h;
        }
        let ratio = if err > 0.0 { scale / err } else { 10.0 };
        h = (h * 0.9 * ratio.powf(1.0 / 8.0)).clamp(h * 0.2, h * 5.0);
        if h < 1e-13 {
            return Err(Error::Integration(format!(
                "step size underflow at t = {:.6}",
                dir * elapsed
            )));
        }
        steps += 1;
        if steps > 200_000_000 {
            return Err(Error::Integration("step budget exhausted".into()));
        }
    }
    Ok(())
}

/// Time-T map together with the Jacobian action on a set of tangent
/// directions, by integrating the variational equations alongside the state.
pub fn time_t_map_with_jacobian(
    model: &LatticeModel,
    state: &LatticeState,
    t: f64,
    directions: &[(Vec<f64>, Vec<f64>)],
    tol: f64,
) -> Result<(LatticeState, Vec<(Vec<f64>, Vec<f64>)>)> {
    let n = state.len();
    let d = directions.len();
    let mut y = flatten(state);
    for (dq, dp) in directions {
        y.extend_from_slice(dq);
        y.extend_from_slice(dp);
    }
    let mut deriv = |yy: &[f64], dy: &mut [f64]| {
        let s = unflatten(&yy[..2 * n]);
        let f = model.vector_field(&s);
        dy[..n].copy_from_slice(&f.q);
        dy[n..2 * n].copy_from_slice(&f.p);
        for block in 0..d {
            let off = 2 * n * (block + 1);
            let (tq, tp) = model.tangent_field(&s, &yy[off..off + n], &yy[off + n..off + 2 * n]);
            dy[off..off + n].copy_from_slice(&tq);
            dy[off + n..off + 2 * n].copy_from_slice(&tp);
        }
    };
    adaptive_flow(&mut y, t, tol, &mut deriv)?;
    let image = unflatten(&y[..2 * n]);
    let mut out = Vec::with_capacity(d);
    for block in 0..d {
        let off = 2 * n * (block + 1);
        out.push((
            y[off..off + n].to_vec(),
            y[off + n..off + 2 * n].to_vec(),
        ));
    }
    Ok((image, out))
}

/// One sampled diagnostics row along a trajectory.
#[derive(Clone, Debug)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub energies: Vec<f64>,
    pub decay_norm: f64,
    pub sup_norm: f64,
    pub boundary_leak: f64,
}

/// Maximum site energy magnitude in the outermost two window layers — the
/// finite-truncation surrogate for the infinite-lattice decay argument.
pub fn boundary_leak(model: &LatticeModel, s: &LatticeState) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..model.n_sites() {
        if model.window.margin_of(model.window.site(k)) < 2 {
            worst = worst.max(s.site_energy(k).abs());
        }
    }
    worst
}

/// Integrate and sample diagnostics at `samples + 1` uniformly spaced times
/// in `[0, t]`, anchored at window site `anchor` for the decay norm.
pub fn trajectory_diagnostics(
    model: &LatticeModel,
    state: &LatticeState,
    t: f64,
    samples: usize,
    anchor: crate::decay::Site,
    scheme: Scheme,
) -> Result<Vec<DiagnosticsRow>> {
    let mut rows = Vec::with_capacity(samples + 1);
    let mut s = state.clone();
    let dt = t / samples as f64;
    for i in 0..=samples {
        let sup = s
            .q
            .iter()
            .chain(&s.p)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        rows.push(DiagnosticsRow {
            t: i as f64 * dt,
            energies: s.energy_profile(),
            decay_norm: s.decay_norm(&model.window, anchor, &model.gamma),
            sup_norm: sup,
            boundary_leak: boundary_leak(model, &s),
        });
        if i < samples {
            s = integrate(model, &s, dt, scheme)?;
        }
    }
    Ok(rows)
}

/// Write a trajectory diagnostics CSV: `t, q_k.., p_k.., E_k.., decay_norm`.
pub fn write_diagnostics_csv<W: Write>(
    out: &mut W,
    model: &LatticeModel,
    rows: &[DiagnosticsRow],
) -> Result<()> {
    let mut header = vec!["t".to_string()];
    for k in 0..model.n_sites() {
        header.push(format!("E_{}", model.window.site(k).x()));
    }
    header.push("decay_norm".into());
    header.push("sup_norm".into());
    header.push("boundary_leak".into());
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut fields = vec![format!("{:.12e}", r.t)];
        for e in &r.energies {
            fields.push(format!("{:.12e}", e));
        }
        fields.push(format!("{:.12e}", r.decay_norm));
        fields.push(format!("{:.12e}", r.sup_norm));
        fields.push(format!("{:.12e}", r.boundary_leak));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{DecayFunction, Site, SiteWindow};
    use crate::lattice::{PathSpec, PerturbationSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn model(eps: f64) -> LatticeModel {
        let window = Arc::new(SiteWindow::interval(-4, 8));
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

    #[test]
    fn single_site_rotation_matches_pendulum() {
        let m = model(0.0);
        let h = 1.7;
        let k = m.window.index_of(Site::new_1d(0)).unwrap();
        let mut s = LatticeState::zeros(m.n_sites());
        let init = crate::pendulum::rotation_orbit(h, 0.4, 0.0).unwrap();
        s.q[k] = init.q;
        s.p[k] = init.p;
        let t = 3.7;
        let oracle = crate::pendulum::rotation_orbit(h, 0.4, t).unwrap();
        for scheme in [Scheme::Splitting { dt: 2e-4 }, Scheme::Adaptive { tol: 1e-12 }] {
            let out = integrate(&m, &s, t, scheme).unwrap();
            assert!(
                (out.q[k].rem_euclid(2.0 * std::f64::consts::PI) - oracle.q).abs() < 1e-7,
                "q mismatch for {scheme:?}"
            );
            assert!((out.p[k] - oracle.p).abs() < 1e-7, "p mismatch for {scheme:?}");
        }
    }

    #[test]
    fn zero_time_is_identity() {
        let m = model(0.005);
        let mut s = LatticeState::zeros(m.n_sites());
        s.q[3] = 1.0;
        s.p[4] = -0.5;
        let out = integrate(&m, &s, 0.0, Scheme::Adaptive { tol: 1e-12 }).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn time_reversibility() {
        let m = model(0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = LatticeState::zeros(m.n_sites());
        for k in 0..m.n_sites() {
            s.q[k] = rng.gen::<f64>() - 0.5;
            s.p[k] = rng.gen::<f64>() - 0.5;
        }
        let fwd = integrate(&m, &s, 5.0, Scheme::Adaptive { tol: 1e-12 }).unwrap();
        let back = integrate(&m, &fwd, -5.0, Scheme::Adaptive { tol: 1e-12 }).unwrap();
        for k in 0..m.n_sites() {
            assert!((back.q[k] - s.q[k]).abs() < 1e-9);
            assert!((back.p[k] - s.p[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn uncoupled_energy_conservation_splitting() {
        let m = model(0.0);
        let mut s = LatticeState::zeros(m.n_sites());
        // several sites on rotations
        for (i, k) in [(0usize, 1.0f64), (4, 2.0), (7, 0.6)] {
            s.q[i] = 0.3 * i as f64;
            s.p[i] = (2.0 * k + 4.0 * (0.5 * s.q[i]).sin().powi(2)).sqrt();
        }
        let e0 = s.energy_profile();
        let out = integrate(&m, &s, 100.0, Scheme::Splitting { dt: 2e-5 }).unwrap();
        let e1 = out.energy_profile();
        for k in 0..m.n_sites() {
            assert!((e1[k] - e0[k]).abs() < 1e-9, "site {k}: {} vs {}", e1[k], e0[k]);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model(0.004);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = m.n_sites();
        let mut s = LatticeState::zeros(n);
        for k in 0..n {
            s.q[k] = rng.gen::<f64>() - 0.5;
            s.p[k] = rng.gen::<f64>() - 0.5;
        }
        let dq: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let dp: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let t = 2.0;
        let (_, jac) =
            time_t_map_with_jacobian(&m, &s, t, &[(dq.clone(), dp.clone())], 1e-12).unwrap();
        let h = 1e-6;
        let mut sp = s.clone();
        let mut sm = s.clone();
        for k in 0..n {
            sp.q[k] += h * dq[k];
            sp.p[k] += h * dp[k];
            sm.q[k] -= h * dq[k];
            sm.p[k] -= h * dp[k];
        }
        let fp = integrate(&m, &sp, t, Scheme::Adaptive { tol: 1e-12 }).unwrap();
        let fm = integrate(&m, &sm, t, Scheme::Adaptive { tol: 1e-12 }).unwrap();
        let mut worst = 0.0f64;
        let mut mag = 0.0f64;
        for k in 0..n {
            worst = worst
                .max(((fp.q[k] - fm.q[k]) / (2.0 * h) - jac[0].0[k]).abs())
                .max(((fp.p[k] - fm.p[k]) / (2.0 * h) - jac[0].1[k]).abs());
            mag = mag.max(jac[0].0[k].abs()).max(jac[0].1[k].abs());
        }
        assert!(worst / mag.max(1.0) < 1e-5, "worst rel FD error {worst}");
    }

    #[test]
    fn jacobian_time_zero_is_identity_and_hyperbolic_blocks() {
        let m = model(0.0);
        let n = m.n_sites();
        let s = LatticeState::zeros(n); // all sites at the saddle
        let mut dq = vec![0.0; n];
        let dp = vec![0.0; n];
        dq[2] = 1.0;
        let (img, jac0) =
            time_t_map_with_jacobian(&m, &s, 0.0, &[(dq.clone(), dp.clone())], 1e-12).unwrap();
        assert_eq!(img, s);
        assert_eq!(jac0[0].0, dq);
        // at eps=0 the linearization at the saddle per site is
        // d(dq)/dt = dp, d(dp)/dt = dq; in u = q+p, v = p-q coordinates the
        // time-T blocks are diag(e^T, e^{-T})
        let t = 1.5;
        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        du[2] = 1.0; // tangent (dq, dp) = (1, 1)/: u-direction
        dv[2] = 1.0;
        let (_, jac) = time_t_map_with_jacobian(&m, &s, t, &[(du, dv)], 1e-12).unwrap();
        // u-direction scales by e^t
        assert!((jac[0].0[2] - t.exp()).abs() < 1e-9);
        assert!((jac[0].1[2] - t.exp()).abs() < 1e-9);
        // symplectic 2x2 block determinant = 1: pair u and s directions
        let mut da = vec![0.0; n];
        let db = vec![0.0; n];
        da[2] = 1.0;
        let mut dc = vec![0.0; n];
        let dd = vec![0.0; n];
        dc[2] = 0.0;
        let mut dd2 = dd.clone();
        dd2[2] = 1.0;
        let (_, j2) = time_t_map_with_jacobian(&m, &s, t, &[(da, db), (dc, dd2)], 1e-12).unwrap();
        let det = j2[0].0[2] * j2[1].1[2] - j2[0].1[2] * j2[1].0[2];
        assert!((det - 1.0).abs() < 1e-8, "det = {det}");
    }

    #[test]
    fn subspace_invariance_over_long_horizon() {
        // trajectories started on three consecutive sites stay there
        let m = model(0.01);
        let idx = m.path_indices();
        let n = m.n_sites();
        let mut s = LatticeState::zeros(n);
        s.q[idx[0]] = 1.2;
        s.p[idx[0]] = 2.1;
        s.q[idx[1]] = 0.4;
        s.p[idx[1]] = -1.0;
        s.q[idx[2]] = 2.8;
        s.p[idx[2]] = 0.2;
        let off: Vec<usize> = (0..n).filter(|k| !idx.contains(k)).collect();
        let mut cur = s;
        for _ in 0..10 {
            cur = integrate(&m, &cur, 20.0, Scheme::Splitting { dt: 1e-3 }).unwrap();
            assert!(cur.support_leak(&off) < 1e-12);
        }
    }

    #[test]
    fn diagnostics_and_csv() {
        let m = model(0.0);
        let mut s = LatticeState::zeros(m.n_sites());
        let k = m.window.index_of(Site::new_1d(0)).unwrap();
        s.q[k] = 0.5;
        s.p[k] = 2.2;
        let rows = trajectory_diagnostics(
            &m,
            &s,
            5.0,
            10,
            Site::new_1d(0),
            Scheme::Adaptive { tol: 1e-12 },
        )
        .unwrap();
        assert_eq!(rows.len(), 11);
        // eps = 0: all energies constant
        for r in &rows {
            for (a, b) in r.energies.iter().zip(&rows[0].energies) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(r.boundary_leak < 1e-12);
        }
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, &m, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,E_-4"));
        assert_eq!(text.lines().count(), 12);
    }
}

//! First-order splitting integrals along unperturbed homoclinic frames.
//!
//! Two geometries appear. In the torus geometry two path sites rotate with
//! energies `h_i`, `h_{i+1}` while the third runs along the pendulum
//! separatrix shifted by a phase `t`; the splitting potential is the improper
//! integral of the restricted coupling along this frame, and the splitting
//! function integrates the Poisson bracket of the coupling with the first
//! rotor's energy. In the periodic geometry one site rotates with energy `h`
//! and the two following sites run along separatrices shifted by `(t_1,
//! t_2)`. Critical points of the potentials, certified by second-derivative
//! (resp. Hessian-eigenvalue) floors, seed the transverse-intersection
//! machinery; `verify_hypotheses` sweeps a grid and produces a pass/fail
//! report with worst-case margins.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lattice::{LatticeModel, RestrictedH1};
use crate::pendulum::{rotation_orbit_cached, separatrix, RotationOrbit};
use crate::quad::panelled_adaptive_simpson;
use crate::{Error, Result};

/// Quadrature controls and hypothesis-verification grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MelnikovConfig {
    /// Truncation of the improper integrals to `[-t_cut, t_cut]`.
    pub t_cut: f64,
    /// Absolute adaptive-quadrature tolerance.
    pub quad_tol: f64,
    /// Convergence tolerance for critical-point searches.
    pub newton_tol: f64,
    /// Points per angle axis of the verification grid.
    pub grid_x: usize,
    /// Points on the rotor-energy axis of the verification grid.
    pub grid_h: usize,
    /// Margin excluded at both ends of the rotor-energy interval, keeping the
    /// grid away from the degenerate limits `h_i -> 0` and `h_i -> h`.
    pub delta_h: f64,
    /// Floor for `|d^2/dt^2|` of the torus potential at its critical point.
    pub second_derivative_floor: f64,
    /// Floor for the Hessian eigenvalues of the periodic potential.
    pub hessian_floor: f64,
    /// Floor for the grid range of the splitting function composed with the
    /// critical-point map (the "nonconstant" certificate).
    pub nonconstant_floor: f64,
}

impl Default for MelnikovConfig {
    fn default() -> Self {
        Self {
            t_cut: 30.0,
            quad_tol: 1e-10,
            newton_tol: 1e-9,
            grid_x: 8,
            grid_h: 5,
            delta_h: 0.1,
            second_derivative_floor: 1e-5,
            hessian_floor: 1e-5,
            nonconstant_floor: 1e-5,
        }
    }
}

/// A truncated improper integral together with its accounted error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    /// Quadrature tolerance plus the analytic tail bound.
    pub error_bound: f64,
    /// Bound on the discarded tails beyond the truncation.
    pub tail_bound: f64,
}

/// Closed form of `int sech^2(u) sech^2(u+tau) du =
/// 4 (tau cosh tau - sinh tau) / sinh^3 tau`, with the small-`tau` series
/// substituted where the direct expression cancels catastrophically; the
/// value at `tau = 0` is `4/3`.
pub fn sech_pulse_overlap(tau: f64) -> f64 {
    let t = tau.abs();
    if t < 0.05 {
        let t2 = t * t;
        let num = t.powi(3) / 3.0 + t.powi(5) / 30.0 + t.powi(7) / 840.0 + t.powi(9) / 45360.0;
        let s = t * (1.0 + t2 / 6.0 + t2 * t2 / 120.0 + t2 * t2 * t2 / 5040.0);
        if t == 0.0 {
            return 4.0 / 3.0;
        }
        4.0 * num / s.powi(3)
    } else {
        4.0 * (t * t.cosh() - t.sinh()) / t.sinh().powi(3)
    }
}

/// Unperturbed frame for the torus geometry: rotors on the first two path
/// sites, separatrix (phase `t`) on the third.
struct TorusFrame {
    h1: RestrictedH1,
    orbit_a: Arc<RotationOrbit>,
    theta_a: f64,
    orbit_b: Arc<RotationOrbit>,
    theta_b: f64,
    t: f64,
}

impl TorusFrame {
    fn point(&self, s: f64) -> ([f64; 3], [f64; 3]) {
        let a = self.orbit_a.at_time(self.theta_a, s);
        let b = self.orbit_b.at_time(self.theta_b, s);
        let c = separatrix(s + self.t);
        ([a.q, b.q, c.q], [a.p, b.p, c.p])
    }
}

/// Unperturbed frame for the periodic geometry: rotor on one block slot,
/// separatrices (phases `t1`, `t2`) on the remaining two (in slot order).
struct PeriodicFrame {
    h1: RestrictedH1,
    orbit: Arc<RotationOrbit>,
    theta: f64,
    rotor_slot: usize,
    t1: f64,
    t2: f64,
}

impl PeriodicFrame {
    fn sep_slots(&self) -> [usize; 2] {
        match self.rotor_slot {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn point(&self, s: f64) -> ([f64; 3], [f64; 3]) {
        let a = self.orbit.at_time(self.theta, s);
        let b = separatrix(s + self.t1);
        let c = separatrix(s + self.t2);
        let [s1, s2] = self.sep_slots();
        let mut q = [0.0; 3];
        let mut p = [0.0; 3];
        q[self.rotor_slot] = a.q;
        p[self.rotor_slot] = a.p;
        q[s1] = b.q;
        p[s1] = b.p;
        q[s2] = c.q;
        p[s2] = c.p;
        (q, p)
    }

    fn sep_mask(&self) -> [bool; 3] {
        let mut m = [true; 3];
        m[self.rotor_slot] = false;
        m
    }
}

/// Poisson bracket of the restricted coupling with the pendulum energy of
/// one slot: `{H1, E_k} = dH1/dq_k * p_k + dH1/dp_k * sin q_k`.
fn energy_bracket(h1: &RestrictedH1, q: &[f64; 3], p: &[f64; 3], slot: usize) -> f64 {
    let (gq, gp) = h1.grad(q, p);
    gq[slot] * p[slot] + gp[slot] * q[slot].sin()
}

fn rotor_momentum_bound(h_max: f64) -> f64 {
    (2.0 * h_max + 4.0).sqrt()
}

/// Integrate `f` over `[-t_cut, t_cut]`; `tail_c * exp(-tail_rate * T)`
/// bounds the discarded mass beyond `|s| = T`, where the effective `T` is
/// shortened by the largest separatrix phase shift.
fn improper_quad<F: Fn(f64) -> f64>(
    f: F,
    cfg: &MelnikovConfig,
    tail_c: f64,
    tail_rate: f64,
    shift_max: f64,
) -> Result<Quadrature> {
    let t_eff = cfg.t_cut - shift_max;
    if t_eff <= 1.0 {
        return Err(Error::IncreaseCutoff(format!(
            "cutoff {} too small for phase shift {shift_max}",
            cfg.t_cut
        )));
    }
    let tail = 2.0 * tail_c * (-tail_rate * t_eff).exp() / tail_rate;
    if tail > cfg.quad_tol {
        return Err(Error::IncreaseCutoff(format!(
            "tail bound {tail:.3e} exceeds quadrature tolerance {:.1e} at cutoff {}",
            cfg.quad_tol, cfg.t_cut
        )));
    }
    // Panels of width 2 (below both the separatrix pulse scale and the rotor
    // periods in play) keep the adaptive pass from terminating early when its
    // coarse samples land on zeros of the integrand or alias a rotor
    // oscillation; a single pass over the whole interval is blind to
    // structure between its first few nodes.
    let value = panelled_adaptive_simpson(f, -cfg.t_cut, cfg.t_cut, cfg.quad_tol, 2.0);
    Ok(Quadrature {
        value,
        error_bound: cfg.quad_tol + tail,
        tail_bound: tail,
    })
}

/// Multiplier turning the tail constant of the coupling into one valid for
/// its energy brackets: differentiating a product of bounded factors scales
/// the bound by at most the total power count, and the extra `p` or `sin q`
/// factor is covered by `max(p_bound, 4)`. Generous but valid; the tails at
/// the default cutoff are far below every tolerance in use.
fn bracket_margin(p_bound: f64) -> f64 {
    8.0 * 16.0 * p_bound.max(4.0)
}

fn torus_frame(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    t: f64,
) -> Result<TorusFrame> {
    if h_i <= 0.0 || h_i1 <= 0.0 {
        return Err(Error::Domain(format!(
            "rotor energies must be positive, got {h_i}, {h_i1}"
        )));
    }
    let h1 = model.restricted_h1(i)?;
    let orbit_a = rotation_orbit_cached(h_i)?;
    let theta_a = orbit_a.angle_of_lifted_q(x_i);
    let orbit_b = rotation_orbit_cached(h_i1)?;
    let theta_b = orbit_b.angle_of_lifted_q(x_i1);
    Ok(TorusFrame {
        h1,
        orbit_a,
        theta_a,
        orbit_b,
        theta_b,
        t,
    })
}

fn periodic_frame(
    model: &LatticeModel,
    i: usize,
    rotor_slot: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
) -> Result<PeriodicFrame> {
    if h <= 0.0 {
        return Err(Error::Domain(format!(
            "rotor energy must be positive, got {h}"
        )));
    }
    if rotor_slot > 2 {
        return Err(Error::Domain(format!(
            "rotor slot must be 0, 1 or 2, got {rotor_slot}"
        )));
    }
    let h1 = model.restricted_h1(i)?;
    let orbit = rotation_orbit_cached(h)?;
    let theta = orbit.angle_of_lifted_q(x_i);
    Ok(PeriodicFrame {
        h1,
        orbit,
        theta,
        rotor_slot,
        t1,
        t2,
    })
}

/// Splitting potential of the torus geometry: integral of the restricted
/// coupling along two rotors (energies `h_i`, `h_{i+1}`, initial positions
/// `x_i`, `x_{i+1}`) and one separatrix with phase `t`.
pub fn torus_melnikov_potential(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    t: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    let fr = torus_frame(model, i, x_i, x_i1, h_i, h_i1, t)?;
    let p_bound = rotor_momentum_bound(h_i.max(h_i1));
    let (c, rate) = fr.h1.tail_decay(&[false, false, true], p_bound)?;
    improper_quad(
        |s| {
            let (q, p) = fr.point(s);
            fr.h1.eval(&q, &p)
        },
        cfg,
        c,
        rate,
        t.abs(),
    )
}

/// `t`-derivative of the torus potential, computed by differentiating under
/// the integral; the integrand is exactly the energy bracket at the
/// separatrix slot.
pub fn torus_potential_dt(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    t: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    torus_bracket_integral(model, i, x_i, x_i1, h_i, h_i1, t, 2, cfg)
}

/// Splitting function of the torus geometry: integral of the Poisson bracket
/// of the restricted coupling with the first rotor's pendulum energy.
pub fn torus_melnikov_function(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    t: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    torus_bracket_integral(model, i, x_i, x_i1, h_i, h_i1, t, 0, cfg)
}

/// Splitting function of the torus geometry measured in the pendulum energy
/// of an arbitrary block slot (0 and 1 are the rotors, 2 the separatrix).
/// The three slot integrals sum to zero because the bracket of the coupling
/// with the total energy integrates to zero along the frame.
#[allow(clippy::too_many_arguments)]
pub fn torus_melnikov_function_slot(
    model: &LatticeModel,
    i: usize,
    slot: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    t: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    if slot > 2 {
        return Err(Error::Domain(format!("block slot {slot} out of range")));
    }
    torus_bracket_integral(model, i, x_i, x_i1, h_i, h_i1, t, slot, cfg)
}

#[allow(clippy::too_many_arguments)]
fn torus_bracket_integral(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    t: f64,
    slot: usize,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    let fr = torus_frame(model, i, x_i, x_i1, h_i, h_i1, t)?;
    let p_bound = rotor_momentum_bound(h_i.max(h_i1));
    let (c, rate) = fr.h1.tail_decay(&[false, false, true], p_bound)?;
    improper_quad(
        |s| {
            let (q, p) = fr.point(s);
            energy_bracket(&fr.h1, &q, &p, slot)
        },
        cfg,
        c * bracket_margin(p_bound),
        rate,
        t.abs(),
    )
}

/// Splitting potential of the periodic geometry: one rotor (energy `h`,
/// initial position `x_i`) on the first block slot and two separatrices with
/// phases `t1`, `t2` on the next two.
pub fn periodic_melnikov_potential(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    periodic_melnikov_potential_slot(model, i, 0, x_i, h, t1, t2, cfg)
}

/// Periodic-geometry splitting potential with the rotor on an arbitrary
/// block slot; the separatrix phases `t1`, `t2` attach to the remaining
/// slots in increasing slot order.
#[allow(clippy::too_many_arguments)]
pub fn periodic_melnikov_potential_slot(
    model: &LatticeModel,
    i: usize,
    rotor_slot: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    let fr = periodic_frame(model, i, rotor_slot, x_i, h, t1, t2)?;
    let p_bound = rotor_momentum_bound(h);
    let (c, rate) = fr.h1.tail_decay(&fr.sep_mask(), p_bound)?;
    improper_quad(
        |s| {
            let (q, p) = fr.point(s);
            fr.h1.eval(&q, &p)
        },
        cfg,
        c,
        rate,
        t1.abs().max(t2.abs()),
    )
}

/// Splitting function of the periodic geometry for the `k`-th off site
/// (`k` is 1 or 2): integral of the bracket with that site's pendulum
/// energy. Equals the `t_k`-partial of the periodic potential.
#[allow(clippy::too_many_arguments)]
pub fn periodic_melnikov_function(
    model: &LatticeModel,
    i: usize,
    k: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    if k != 1 && k != 2 {
        return Err(Error::Domain(format!("off-site index must be 1 or 2, got {k}")));
    }
    periodic_melnikov_function_slot(model, i, 0, k, x_i, h, t1, t2, cfg)
}

/// Periodic-geometry splitting function with the rotor on an arbitrary slot;
/// `sep_slot` names the block slot (not equal to the rotor slot) whose
/// pendulum energy enters the bracket. Equals the partial of the slot
/// potential in the phase attached to `sep_slot`.
#[allow(clippy::too_many_arguments)]
pub fn periodic_melnikov_function_slot(
    model: &LatticeModel,
    i: usize,
    rotor_slot: usize,
    sep_slot: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
    cfg: &MelnikovConfig,
) -> Result<Quadrature> {
    let fr = periodic_frame(model, i, rotor_slot, x_i, h, t1, t2)?;
    if sep_slot > 2 || sep_slot == rotor_slot {
        return Err(Error::Domain(format!(
            "bracket slot {sep_slot} must be a separatrix slot (rotor on {rotor_slot})"
        )));
    }
    let p_bound = rotor_momentum_bound(h);
    let (c, rate) = fr.h1.tail_decay(&fr.sep_mask(), p_bound)?;
    improper_quad(
        |s| {
            let (q, p) = fr.point(s);
            energy_bracket(&fr.h1, &q, &p, sep_slot)
        },
        cfg,
        c * bracket_margin(p_bound),
        rate,
        t1.abs().max(t2.abs()),
    )
}

/// Gradient of the periodic potential in `(t1, t2)`, by differentiation
/// under the integral.
pub fn periodic_potential_grad(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
    cfg: &MelnikovConfig,
) -> Result<[f64; 2]> {
    periodic_potential_grad_slot(model, i, 0, x_i, h, t1, t2, cfg)
}

/// Gradient of the slot potential in `(t1, t2)` for an arbitrary rotor slot.
#[allow(clippy::too_many_arguments)]
pub fn periodic_potential_grad_slot(
    model: &LatticeModel,
    i: usize,
    rotor_slot: usize,
    x_i: f64,
    h: f64,
    t1: f64,
    t2: f64,
    cfg: &MelnikovConfig,
) -> Result<[f64; 2]> {
    let [s1, s2] = match rotor_slot {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let g1 = periodic_melnikov_function_slot(model, i, rotor_slot, s1, x_i, h, t1, t2, cfg)?;
    let g2 = periodic_melnikov_function_slot(model, i, rotor_slot, s2, x_i, h, t1, t2, cfg)?;
    Ok([g1.value, g2.value])
}

/// Critical point of the torus potential in the separatrix phase, with its
/// second-derivative certificate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub tau: f64,
    pub second_derivative: f64,
}

/// Critical point of the periodic potential in `(t1, t2)`, with the Hessian
/// and its smallest absolute eigenvalue.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CriticalPoint2 {
    pub t1: f64,
    pub t2: f64,
    pub hessian: [[f64; 2]; 2],
    pub min_abs_eigenvalue: f64,
}

/// Locate a non-degenerate critical point of `t -> L(x_i, x_{i+1}, h_i,
/// h_{i+1}, t)` by a coarse sign scan of the derivative followed by
/// safeguarded Newton; among the roots found, the one with the largest
/// curvature is returned.
pub fn torus_critical_point(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    x_i1: f64,
    h_i: f64,
    h_i1: f64,
    cfg: &MelnikovConfig,
) -> Result<CriticalPoint> {
    let g = |t: f64| -> Result<f64> {
        Ok(torus_potential_dt(model, i, x_i, x_i1, h_i, h_i1, t, cfg)?.value)
    };
    let scan_lo = -4.0;
    let scan_hi = 4.0;
    let n = 33;
    let mut prev_t = scan_lo;
    let mut prev_g = g(prev_t)?;
    let mut best: Option<CriticalPoint> = None;
    for k in 1..=n {
        let t = scan_lo + (scan_hi - scan_lo) * k as f64 / n as f64;
        let gt = g(t)?;
        if prev_g == 0.0 || prev_g.signum() != gt.signum() {
            if let Ok(tau) = refine_root_1d(&g, prev_t, t, prev_g, gt, cfg.newton_tol) {
                let fd = 1e-3;
                let d2 = (g(tau + fd)? - g(tau - fd)?) / (2.0 * fd);
                if best.is_none_or(|b| d2.abs() > b.second_derivative.abs()) {
                    best = Some(CriticalPoint {
                        tau,
                        second_derivative: d2,
                    });
                }
            }
        }
        prev_t = t;
        prev_g = gt;
    }
    best.ok_or_else(|| {
        Error::Hypothesis(format!(
            "no critical point of the torus potential found in [{scan_lo}, {scan_hi}]"
        ))
    })
}

/// Safeguarded Newton (bisection fallback) on a bracketed scalar root.
fn refine_root_1d<G: Fn(f64) -> Result<f64>>(
    g: &G,
    mut lo: f64,
    mut hi: f64,
    mut glo: f64,
    mut ghi: f64,
    tol: f64,
) -> Result<f64> {
    let mut t = 0.5 * (lo + hi);
    for _ in 0..80 {
        let gt = g(t)?;
        if gt.abs() < tol {
            return Ok(t);
        }
        if glo.signum() != gt.signum() {
            hi = t;
            ghi = gt;
        } else {
            lo = t;
            glo = gt;
        }
        let fd = 1e-3;
        let dg = (g(t + fd)? - g(t - fd)?) / (2.0 * fd);
        let newton = t - gt / dg;
        t = if dg != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let _ = ghi;
    }
    Err(Error::NewtonDivergence(format!(
        "scalar root refinement stalled near {t}"
    )))
}

/// Locate a non-degenerate critical point of `(t1, t2) -> L~(x_i, h, t1,
/// t2)` by a coarse gradient scan followed by damped Newton with a
/// finite-difference Hessian; returns the Hessian eigenvalue certificate.
pub fn periodic_critical_point(
    model: &LatticeModel,
    i: usize,
    x_i: f64,
    h: f64,
    cfg: &MelnikovConfig,
) -> Result<CriticalPoint2> {
    periodic_critical_point_slot(model, i, 0, x_i, h, cfg)
}

/// Slot-generalized critical point of the periodic potential (see
/// [`periodic_melnikov_potential_slot`] for the slot convention).
pub fn periodic_critical_point_slot(
    model: &LatticeModel,
    i: usize,
    rotor_slot: usize,
    x_i: f64,
    h: f64,
    cfg: &MelnikovConfig,
) -> Result<CriticalPoint2> {
    let grad = |t1: f64, t2: f64| -> Result<[f64; 2]> {
        periodic_potential_grad_slot(model, i, rotor_slot, x_i, h, t1, t2, cfg)
    };
    let value = |t1: f64, t2: f64| -> Result<f64> {
        Ok(periodic_melnikov_potential_slot(model, i, rotor_slot, x_i, h, t1, t2, cfg)?.value)
    };
    // The potential decays exponentially once the two separatrix pulses
    // separate, leaving a flat region full of spurious near-critical points.
    // Seed only where the potential carries real mass, keep Newton inside a
    // box where the quadrature cutoff stays effective, and of the converged
    // points keep the one with the strongest Hessian certificate.
    let bound = 4.0;
    let n = 9;
    let mut scan = Vec::new();
    let mut max_abs = 0.0f64;
    for a in 0..=n {
        for b in 0..=n {
            let t1 = -3.0 + 6.0 * a as f64 / n as f64;
            let t2 = -3.0 + 6.0 * b as f64 / n as f64;
            let gr = grad(t1, t2)?;
            let l = value(t1, t2)?;
            max_abs = max_abs.max(l.abs());
            scan.push((t1, t2, gr[0].hypot(gr[1]), l.abs()));
        }
    }
    let mut seeds: Vec<_> = scan
        .into_iter()
        .filter(|c| c.3 >= 0.2 * max_abs)
        .collect();
    seeds.sort_by(|a, b| a.2.total_cmp(&b.2));
    let fd = 1e-3;
    let mut best: Option<CriticalPoint2> = None;
    let mut last_err = String::new();
    for &(s1, s2, _, _) in seeds.iter().take(6) {
        match newton_2d_in_box(&grad, s1, s2, bound, fd, cfg.newton_tol) {
            Ok((t1, t2)) => {
                let hess = fd_hessian(&grad, t1, t2, fd)?;
                let (e1, e2) = sym2_eigenvalues(&hess);
                let cand = CriticalPoint2 {
                    t1,
                    t2,
                    hessian: hess,
                    min_abs_eigenvalue: e1.abs().min(e2.abs()),
                };
                if best
                    .as_ref()
                    .is_none_or(|b| cand.min_abs_eigenvalue > b.min_abs_eigenvalue)
                {
                    best = Some(cand);
                }
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    best.ok_or_else(|| {
        Error::NewtonDivergence(format!(
            "periodic critical point search failed from all seeds: {last_err}"
        ))
    })
}

/// Damped Newton on a 2-d gradient, restricted to `[-bound, bound]^2`.
fn newton_2d_in_box<G: Fn(f64, f64) -> Result<[f64; 2]>>(
    grad: &G,
    mut t1: f64,
    mut t2: f64,
    bound: f64,
    fd: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let mut gnorm = f64::INFINITY;
    for _ in 0..50 {
        let gr = grad(t1, t2)?;
        gnorm = gr[0].hypot(gr[1]);
        if gnorm < tol {
            return Ok((t1, t2));
        }
        let hess = fd_hessian(grad, t1, t2, fd)?;
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        if det.abs() < 1e-14 {
            return Err(Error::NewtonDivergence(format!(
                "singular Hessian at ({t1}, {t2})"
            )));
        }
        let mut dt1 = -(hess[1][1] * gr[0] - hess[0][1] * gr[1]) / det;
        let mut dt2 = -(-hess[1][0] * gr[0] + hess[0][0] * gr[1]) / det;
        // damp: halve until the gradient norm decreases and the step stays in the box
        let mut accepted = false;
        for _ in 0..8 {
            let c1 = t1 + dt1;
            let c2 = t2 + dt2;
            if c1.abs() <= bound && c2.abs() <= bound {
                let gr_new = grad(c1, c2)?;
                if gr_new[0].hypot(gr_new[1]) < gnorm {
                    t1 = c1;
                    t2 = c2;
                    accepted = true;
                    break;
                }
            }
            dt1 *= 0.5;
            dt2 *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDivergence(format!(
                "gradient norm stalled at {gnorm:.3e} near ({t1}, {t2})"
            )));
        }
    }
    Err(Error::NewtonDivergence(format!(
        "gradient norm {gnorm:.3e} after iteration budget"
    )))
}

fn fd_hessian<G: Fn(f64, f64) -> Result<[f64; 2]>>(
    grad: &G,
    t1: f64,
    t2: f64,
    fd: f64,
) -> Result<[[f64; 2]; 2]> {
    let gp1 = grad(t1 + fd, t2)?;
    let gm1 = grad(t1 - fd, t2)?;
    let gp2 = grad(t1, t2 + fd)?;
    let gm2 = grad(t1, t2 - fd)?;
    let h11 = (gp1[0] - gm1[0]) / (2.0 * fd);
    let h22 = (gp2[1] - gm2[1]) / (2.0 * fd);
    let h12 = 0.5 * ((gp2[0] - gm2[0]) / (2.0 * fd) + (gp1[1] - gm1[1]) / (2.0 * fd));
    Ok([[h11, h12], [h12, h22]])
}

fn sym2_eigenvalues(h: &[[f64; 2]; 2]) -> (f64, f64) {
    let mean = 0.5 * (h[0][0] + h[1][1]);
    let disc = (0.5 * (h[0][0] - h[1][1])).hypot(h[0][1]);
    (mean - disc, mean + disc)
}

/// Outcome of one hypothesis over the verification grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisOutcome {
    pub pass: bool,
    /// Worst-case certified margin (meaning depends on the hypothesis).
    pub margin: f64,
    /// Per-cell failure descriptions (empty on pass).
    pub failures: Vec<String>,
}

/// Grid cells where the splitting function at the critical point is
/// positive resp. negative, as `(x_i, x_{i+1}, h_i)` triples.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct SignSets {
    pub positive: Vec<[f64; 3]>,
    pub negative: Vec<[f64; 3]>,
}

/// Grid verification report for the three splitting hypotheses: existence of
/// non-degenerate critical phases of the torus potential, a nonconstant
/// sign-changing splitting function along the critical-point map, and
/// non-degenerate critical phase pairs of the periodic potential.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub step: usize,
    pub h_total: f64,
    pub grid_x: usize,
    pub grid_h: usize,
    pub torus_critical: HypothesisOutcome,
    pub function_nonconstant: HypothesisOutcome,
    pub periodic_critical: HypothesisOutcome,
    pub sign_sets: SignSets,
    /// Range of the splitting function over the grid.
    pub m_range: (f64, f64),
    pub pass: bool,
}

impl HypothesisReport {
    /// One human-readable PASS/FAIL line per hypothesis.
    pub fn summary(&self) -> String {
        let line = |name: &str, o: &HypothesisOutcome| {
            format!(
                "{}: {} (margin {:.3e}{})",
                name,
                if o.pass { "PASS" } else { "FAIL" },
                o.margin,
                if o.failures.is_empty() {
                    String::new()
                } else {
                    format!(", {} failing cells", o.failures.len())
                }
            )
        };
        format!(
            "{}\n{}\n{}\nsplitting function range [{:.3e}, {:.3e}], {} positive / {} negative cells",
            line("torus critical point", &self.torus_critical),
            line("splitting function nonconstant", &self.function_nonconstant),
            line("periodic critical point", &self.periodic_critical),
            self.m_range.0,
            self.m_range.1,
            self.sign_sets.positive.len(),
            self.sign_sets.negative.len(),
        )
    }
}

/// One verified torus-geometry grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TorusCellRow {
    pub x_i: f64,
    pub x_i1: f64,
    pub h_i: f64,
    pub tau: f64,
    pub potential: f64,
    pub second_derivative: f64,
    pub function_at_tau: f64,
}

/// One verified periodic-geometry grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicCellRow {
    pub x_i: f64,
    pub t1: f64,
    pub t2: f64,
    pub potential: f64,
    pub min_abs_eigenvalue: f64,
}

/// Tabulated results backing a [`HypothesisReport`].
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct SurveyTables {
    pub torus: Vec<TorusCellRow>,
    pub periodic: Vec<PeriodicCellRow>,
}

/// Sweep the verification grid for path step `i` at total two-site energy
/// `h`; returns the report and the tabulated cells. Grid cells run in
/// parallel and are merged in index order, so results are deterministic.
pub fn hypothesis_survey(
    model: &LatticeModel,
    i: usize,
    h: f64,
    cfg: &MelnikovConfig,
) -> Result<(HypothesisReport, SurveyTables)> {
    let h1 = model.restricted_h1(i)?;
    let degenerate = |why: &str| HypothesisOutcome {
        pass: false,
        margin: 0.0,
        failures: vec![why.to_string()],
    };
    if h1.is_empty() {
        let why = "restricted coupling vanishes on the three-site subspace";
        let report = HypothesisReport {
            step: i,
            h_total: h,
            grid_x: cfg.grid_x,
            grid_h: cfg.grid_h,
            torus_critical: degenerate(why),
            function_nonconstant: degenerate(why),
            periodic_critical: degenerate(why),
            sign_sets: SignSets::default(),
            m_range: (0.0, 0.0),
            pass: false,
        };
        return Ok((report, SurveyTables::default()));
    }
    if cfg.grid_x == 0 || cfg.grid_h == 0 {
        return Err(Error::Config("verification grid must be nonempty".into()));
    }
    if 2.0 * cfg.delta_h >= h {
        return Err(Error::Config(format!(
            "energy margin {} leaves no rotor-energy interval inside (0, {h})",
            cfg.delta_h
        )));
    }
    let xs: Vec<f64> = (0..cfg.grid_x)
        .map(|j| 2.0 * PI * j as f64 / cfg.grid_x as f64)
        .collect();
    let hs: Vec<f64> = if cfg.grid_h == 1 {
        vec![0.5 * h]
    } else {
        (0..cfg.grid_h)
            .map(|j| {
                cfg.delta_h + (h - 2.0 * cfg.delta_h) * j as f64 / (cfg.grid_h - 1) as f64
            })
            .collect()
    };

    // torus geometry: (x_i, x_{i+1}, h_i) cells
    let cells: Vec<(f64, f64, f64)> = xs
        .iter()
        .flat_map(|&a| {
            let hs = &hs;
            xs.iter()
                .flat_map(move |&b| hs.iter().map(move |&hi| (a, b, hi)))
        })
        .collect();
    let torus_results: Vec<std::result::Result<TorusCellRow, String>> = cells
        .par_iter()
        .map(|&(x_a, x_b, h_i)| {
            let h_i1 = h - h_i;
            let run = || -> Result<TorusCellRow> {
                let cp = torus_critical_point(model, i, x_a, x_b, h_i, h_i1, cfg)?;
                let l = torus_melnikov_potential(model, i, x_a, x_b, h_i, h_i1, cp.tau, cfg)?;
                let m = torus_melnikov_function(model, i, x_a, x_b, h_i, h_i1, cp.tau, cfg)?;
                Ok(TorusCellRow {
                    x_i: x_a,
                    x_i1: x_b,
                    h_i,
                    tau: cp.tau,
                    potential: l.value,
                    second_derivative: cp.second_derivative,
                    function_at_tau: m.value,
                })
            };
            run().map_err(|e| format!("cell (x_i={x_a:.3}, x_i1={x_b:.3}, h_i={h_i:.3}): {e}"))
        })
        .collect();

    let mut torus_rows = Vec::new();
    let mut torus_failures = Vec::new();
    for r in torus_results {
        match r {
            Ok(row) => torus_rows.push(row),
            Err(e) => torus_failures.push(e),
        }
    }
    let d2_min = torus_rows
        .iter()
        .map(|r| r.second_derivative.abs())
        .fold(f64::INFINITY, f64::min);
    let torus_critical = HypothesisOutcome {
        pass: torus_failures.is_empty() && d2_min >= cfg.second_derivative_floor,
        margin: if torus_rows.is_empty() { 0.0 } else { d2_min },
        failures: torus_failures,
    };

    let mut sign_sets = SignSets::default();
    let mut m_min = f64::INFINITY;
    let mut m_max = f64::NEG_INFINITY;
    for r in &torus_rows {
        m_min = m_min.min(r.function_at_tau);
        m_max = m_max.max(r.function_at_tau);
        let cell = [r.x_i, r.x_i1, r.h_i];
        if r.function_at_tau > 0.0 {
            sign_sets.positive.push(cell);
        } else if r.function_at_tau < 0.0 {
            sign_sets.negative.push(cell);
        }
    }
    if torus_rows.is_empty() {
        m_min = 0.0;
        m_max = 0.0;
    }
    let range = m_max - m_min;
    let mut fn_failures = Vec::new();
    if range < cfg.nonconstant_floor {
        fn_failures.push(format!(
            "splitting-function range {range:.3e} below floor {:.1e}",
            cfg.nonconstant_floor
        ));
    }
    if sign_sets.positive.is_empty() {
        fn_failures.push("no grid cell with positive splitting function".into());
    }
    if sign_sets.negative.is_empty() {
        fn_failures.push("no grid cell with negative splitting function".into());
    }
    let function_nonconstant = HypothesisOutcome {
        pass: torus_critical.pass && fn_failures.is_empty(),
        margin: range,
        failures: fn_failures,
    };

    // periodic geometry: one cell per x_i
    let periodic_results: Vec<std::result::Result<PeriodicCellRow, String>> = xs
        .par_iter()
        .map(|&x| {
            let run = || -> Result<PeriodicCellRow> {
                let cp = periodic_critical_point(model, i, x, h, cfg)?;
                let l = periodic_melnikov_potential(model, i, x, h, cp.t1, cp.t2, cfg)?;
                Ok(PeriodicCellRow {
                    x_i: x,
                    t1: cp.t1,
                    t2: cp.t2,
                    potential: l.value,
                    min_abs_eigenvalue: cp.min_abs_eigenvalue,
                })
            };
            run().map_err(|e| format!("cell (x_i={x:.3}): {e}"))
        })
        .collect();
    let mut periodic_rows = Vec::new();
    let mut periodic_failures = Vec::new();
    for r in periodic_results {
        match r {
            Ok(row) => periodic_rows.push(row),
            Err(e) => periodic_failures.push(e),
        }
    }
    let eig_min = periodic_rows
        .iter()
        .map(|r| r.min_abs_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    let periodic_critical = HypothesisOutcome {
        pass: periodic_failures.is_empty() && eig_min >= cfg.hessian_floor,
        margin: if periodic_rows.is_empty() { 0.0 } else { eig_min },
        failures: periodic_failures,
    };

    let pass = torus_critical.pass && function_nonconstant.pass && periodic_critical.pass;
    let report = HypothesisReport {
        step: i,
        h_total: h,
        grid_x: cfg.grid_x,
        grid_h: cfg.grid_h,
        torus_critical,
        function_nonconstant,
        periodic_critical,
        sign_sets,
        m_range: (m_min, m_max),
        pass,
    };
    Ok((
        report,
        SurveyTables {
            torus: torus_rows,
            periodic: periodic_rows,
        },
    ))
}

/// Grid verification report only (see [`hypothesis_survey`]).
pub fn verify_hypotheses(
    model: &LatticeModel,
    i: usize,
    h: f64,
    cfg: &MelnikovConfig,
) -> Result<HypothesisReport> {
    Ok(hypothesis_survey(model, i, h, cfg)?.0)
}

/// Write the survey tables as CSV files (`melnikov_torus.csv`,
/// `melnikov_periodic.csv`) into `dir`; returns the paths written.
pub fn write_melnikov_tables(tables: &SurveyTables, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let torus_path = dir.join("melnikov_torus.csv");
    let mut s = String::from("x_i,x_i1,h_i,tau,potential,second_derivative,function_at_tau\n");
    for r in &tables.torus {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.x_i, r.x_i1, r.h_i, r.tau, r.potential, r.second_derivative, r.function_at_tau
        ));
    }
    std::fs::write(&torus_path, s)?;
    let periodic_path = dir.join("melnikov_periodic.csv");
    let mut s = String::from("x_i,t1,t2,potential,min_abs_eigenvalue\n");
    for r in &tables.periodic {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.x_i, r.t1, r.t2, r.potential, r.min_abs_eigenvalue
        ));
    }
    std::fs::write(&periodic_path, s)?;
    Ok(vec![torus_path, periodic_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{DecayFunction, Site, SiteWindow};
    use crate::lattice::{PathSpec, PerturbationSpec};
    use crate::pendulum::rotation_orbit_cached;

    fn model_with(a2: f64, a3: f64, eps: f64) -> LatticeModel {
        let window = Arc::new(SiteWindow::interval(-4, 8));
        let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
        LatticeModel::new(
            window,
            gamma,
            eps,
            PerturbationSpec::default_family(a2, a3, 0.5),
            PathSpec::line_1d(0, 3),
        )
        .unwrap()
    }

    fn model() -> LatticeModel {
        model_with(1.0, 0.3, 0.005)
    }

    #[test]
    fn quadrature_kernel_reproduces_sech_pulse_overlap() {
        for k in 0..=10 {
            let tau = 0.5 * k as f64;
            let quad = crate::quad::adaptive_simpson(
                |u| {
                    let a = 1.0 / u.cosh().powi(2);
                    let b = 1.0 / (u + tau).cosh().powi(2);
                    a * b
                },
                -40.0,
                40.0,
                1e-12,
            );
            let exact = sech_pulse_overlap(tau);
            assert!(
                (quad - exact).abs() < 1e-10,
                "tau={tau}: quad {quad} vs closed form {exact}"
            );
        }
        assert!((sech_pulse_overlap(0.0) - 4.0 / 3.0).abs() < 1e-15);
        // series/closed-form agreement across the switch point
        for tau in [0.049, 0.05, 0.051] {
            let series = {
                let t: f64 = tau;
                let num =
                    t.powi(3) / 3.0 + t.powi(5) / 30.0 + t.powi(7) / 840.0 + t.powi(9) / 45360.0;
                4.0 * num / t.sinh().powi(3)
            };
            assert!((series - sech_pulse_overlap(tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn time_shift_covariance() {
        let m = model();
        let cfg = MelnikovConfig::default();
        let (x_i, x_i1, h_i, h_i1) = (0.7, 2.1, 0.4, 0.6);
        let s0 = 0.37;
        let l_shifted =
            torus_melnikov_potential(&m, 0, x_i, x_i1, h_i, h_i1, 0.9 + s0, &cfg).unwrap();
        // advancing the separatrix phase by s0 equals rewinding both rotors
        let rewind = |h: f64, x: f64| {
            let orb = rotation_orbit_cached(h).unwrap();
            let theta = orb.angle_of_lifted_q(x);
            orb.lifted_q_of_angle(theta - orb.omega * s0)
        };
        let l_rewound = torus_melnikov_potential(
            &m,
            0,
            rewind(h_i, x_i),
            rewind(h_i1, x_i1),
            h_i,
            h_i1,
            0.9,
            &cfg,
        )
        .unwrap();
        assert!(
            (l_shifted.value - l_rewound.value).abs()
                < l_shifted.error_bound + l_rewound.error_bound + 1e-10
        );
    }

    #[test]
    fn symmetric_phase_is_critical() {
        let m = model();
        let cfg = MelnikovConfig::default();
        // rotors started at q = pi make the rotating factors even in time,
        // so t = 0 is a critical phase of the torus potential
        let d = torus_potential_dt(&m, 0, PI, PI, 0.45, 0.55, 0.0, &cfg).unwrap();
        assert!(d.value.abs() < 1e-8, "dL/dt at symmetric phase: {}", d.value);
        // same symmetry in the periodic geometry at (t1, t2) = (0, 0)
        let g = periodic_potential_grad(&m, 0, PI, 1.0, 0.0, 0.0, &cfg).unwrap();
        assert!(g[0].abs() < 1e-8 && g[1].abs() < 1e-8, "grad {g:?}");
    }

    #[test]
    fn exchange_symmetry_of_periodic_potential() {
        let m = model_with(1.0, 0.0, 0.005); // keep only the symmetric product term
        let cfg = MelnikovConfig::default();
        let a = periodic_melnikov_potential(&m, 0, 1.3, 1.0, 0.4, -0.7, &cfg).unwrap();
        let b = periodic_melnikov_potential(&m, 0, 1.3, 1.0, -0.7, 0.4, &cfg).unwrap();
        assert!((a.value - b.value).abs() < a.error_bound + b.error_bound + 1e-12);
    }

    #[test]
    fn self_convergence_and_eps_independence() {
        let coarse_cfg = MelnikovConfig {
            quad_tol: 2e-9,
            ..MelnikovConfig::default()
        };
        let fine_cfg = MelnikovConfig {
            quad_tol: 1e-9,
            ..MelnikovConfig::default()
        };
        let m = model();
        let coarse = torus_melnikov_potential(&m, 0, 0.3, 1.1, 0.5, 0.5, 0.2, &coarse_cfg).unwrap();
        let fine = torus_melnikov_potential(&m, 0, 0.3, 1.1, 0.5, 0.5, 0.2, &fine_cfg).unwrap();
        assert!((coarse.value - fine.value).abs() <= coarse.error_bound + fine.error_bound);
        // the potential is built from the coupling alone
        let other_eps = model_with(1.0, 0.3, 0.05);
        let same =
            torus_melnikov_potential(&other_eps, 0, 0.3, 1.1, 0.5, 0.5, 0.2, &fine_cfg).unwrap();
        assert_eq!(fine.value, same.value);
    }

    #[test]
    fn tail_accounting_under_cutoff_doubling() {
        let m = model();
        let base = MelnikovConfig::default();
        let doubled = MelnikovConfig {
            t_cut: 60.0,
            ..base.clone()
        };
        let a = torus_melnikov_potential(&m, 0, 0.3, 1.1, 0.4, 0.6, 0.5, &base).unwrap();
        let b = torus_melnikov_potential(&m, 0, 0.3, 1.1, 0.4, 0.6, 0.5, &doubled).unwrap();
        assert!((a.value - b.value).abs() <= a.error_bound + b.error_bound);
        assert!(a.tail_bound < 1e-15, "tail bound {:.3e}", a.tail_bound);
    }

    #[test]
    fn differentiation_under_the_integral() {
        let m = model();
        let cfg = MelnikovConfig::default();
        let (x_i, x_i1, h_i, h_i1, t) = (0.9, 2.3, 0.35, 0.65, 0.4);
        let analytic = torus_potential_dt(&m, 0, x_i, x_i1, h_i, h_i1, t, &cfg)
            .unwrap()
            .value;
        // five-point stencil keeps quadrature noise below the comparison tolerance
        let fd = 0.01;
        let l = |tt: f64| {
            torus_melnikov_potential(&m, 0, x_i, x_i1, h_i, h_i1, tt, &cfg)
                .unwrap()
                .value
        };
        let numeric =
            (l(t - 2.0 * fd) - 8.0 * l(t - fd) + 8.0 * l(t + fd) - l(t + 2.0 * fd)) / (12.0 * fd);
        assert!(
            (analytic - numeric).abs() < 1e-7,
            "analytic {analytic} vs stencil {numeric}"
        );
    }

    #[test]
    fn splitting_function_matches_periodic_partial() {
        let m = model();
        let cfg = MelnikovConfig::default();
        let (x, h, t1, t2) = (0.8, 1.0, 0.3, -0.5);
        let m1 = periodic_melnikov_function(&m, 0, 1, x, h, t1, t2, &cfg)
            .unwrap()
            .value;
        let fd = 1e-3;
        let lp = periodic_melnikov_potential(&m, 0, x, h, t1 + fd, t2, &cfg)
            .unwrap()
            .value;
        let lm = periodic_melnikov_potential(&m, 0, x, h, t1 - fd, t2, &cfg)
            .unwrap()
            .value;
        assert!(
            (m1 - (lp - lm) / (2.0 * fd)).abs() < 1e-6,
            "bracket integral {m1} vs finite difference {}",
            (lp - lm) / (2.0 * fd)
        );
    }

    #[test]
    fn critical_points_are_certified() {
        let m = model();
        let cfg = MelnikovConfig::default();
        let cp = torus_critical_point(&m, 0, 0.6, 1.9, 0.4, 0.6, &cfg).unwrap();
        let check = torus_potential_dt(&m, 0, 0.6, 1.9, 0.4, 0.6, cp.tau, &cfg).unwrap();
        assert!(check.value.abs() < cfg.newton_tol * 10.0);
        assert!(cp.second_derivative.abs() > 1e-5);

        let cp2 = periodic_critical_point(&m, 0, 0.6, 1.0, &cfg).unwrap();
        let g = periodic_potential_grad(&m, 0, 0.6, 1.0, cp2.t1, cp2.t2, &cfg).unwrap();
        assert!(g[0].hypot(g[1]) < cfg.newton_tol * 10.0);
        assert!(cp2.min_abs_eigenvalue > 1e-5);
        // Hessian certificate vs a value-level finite-difference Hessian
        let fd = 1e-3;
        let l = |t1: f64, t2: f64| {
            periodic_melnikov_potential(&m, 0, 0.6, 1.0, t1, t2, &cfg)
                .unwrap()
                .value
        };
        let h11 = (l(cp2.t1 + fd, cp2.t2) - 2.0 * l(cp2.t1, cp2.t2) + l(cp2.t1 - fd, cp2.t2))
            / (fd * fd);
        assert!(
            (h11 - cp2.hessian[0][0]).abs() < 1e-5,
            "H11 {h11} vs certificate {}",
            cp2.hessian[0][0]
        );
    }

    #[test]
    fn hypothesis_survey_produces_report() {
        let m = model();
        let cfg = MelnikovConfig {
            grid_x: 3,
            grid_h: 2,
            ..MelnikovConfig::default()
        };
        let (report, tables) = hypothesis_survey(&m, 0, 1.0, &cfg).unwrap();
        assert!(report.torus_critical.failures.is_empty(), "{:?}", report.torus_critical);
        assert!(
            report.periodic_critical.failures.is_empty(),
            "{:?}",
            report.periodic_critical
        );
        assert_eq!(tables.torus.len(), 3 * 3 * 2);
        assert_eq!(tables.periodic.len(), 3);
        assert!(report.torus_critical.margin > 0.0);
        let text = report.summary();
        assert!(text.contains("torus critical point"));
        let dir = tempfile::tempdir().unwrap();
        let paths = write_melnikov_tables(&tables, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths.iter().all(|p| p.exists()));
    }

    #[test]
    fn degenerate_without_pairwise_product_term() {
        // dropping the three-site product leaves only the four-site family,
        // which cannot live on a three-site subspace: everything degenerates
        let m = model_with(0.0, 0.3, 0.005);
        assert!(m.restricted_h1(0).unwrap().is_empty());
        let cfg = MelnikovConfig {
            grid_x: 2,
            grid_h: 1,
            ..MelnikovConfig::default()
        };
        let report = verify_hypotheses(&m, 0, 1.0, &cfg).unwrap();
        assert!(!report.pass);
        assert!(!report.torus_critical.pass);
        assert!(!report.periodic_critical.pass);
        let l = torus_melnikov_potential(&m, 0, 0.3, 1.1, 0.4, 0.6, 0.5, &cfg).unwrap();
        assert_eq!(l.value, 0.0);
    }
}

//! The single pendulum `E = p^2/2 + cos q - 1`: closed-form separatrix,
//! rotational orbits through closed-form elliptic integrals, and
//! a local action-angle chart on an annulus of rotations.
//!
//! Conventions: the saddle sits at `q = 0` (so `dp/dt = sin q`), angles are
//! stored in `[0, 2*pi)` unless a lift is explicitly requested, and rotational
//! orbits use the upper branch `p > 0`.


use crate::{Error, Result};
use parking_lot::Mutex;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

/// A single-pendulum phase point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    pub q: f64,
    pub p: f64,
}

/// `E(q, p) = p^2/2 + cos q - 1`, zero at the saddle `(0, 0)`.
pub fn energy(q: f64, p: f64) -> f64 {
    0.5 * p * p + q.cos() - 1.0
}

/// The homoclinic separatrix `q0(t) = 4 arctan(e^t)`, `p0(t) = 2 sech(t)`,
/// connecting the saddle to itself with `E = 0`.
pub fn separatrix(t: f64) -> PendulumState {
    PendulumState {
        q: 4.0 * t.exp().atan(),
        p: 2.0 / t.cosh(),
    }
}

/// Residual of the closed-form separatrix in the pendulum equations
/// `dq/dt = p`, `dp/dt = sin q`, using the analytic time derivatives
/// `dq0/dt = 2 sech t` and `dp0/dt = -2 sech t tanh t`.
pub fn separatrix_residual(t: f64) -> f64 {
    let s = separatrix(t);
    let dq = 2.0 / t.cosh();
    let dp = -2.0 * t.tanh() / t.cosh();
    (dq - s.p).abs().max((dp - s.q.sin()).abs())
}

/// Momentum of the upper rotational branch at energy `h > 0`:
/// `p(q) = sqrt(2h + 4 sin^2(q/2))`.
pub fn rotation_momentum(h: f64, q: f64) -> f64 {
    (2.0 * h + 4.0 * (0.5 * q).sin().powi(2)).sqrt()
}

/// Carlson symmetric elliptic integral `R_F(x, y, z)` by the duplication
/// algorithm, accurate to machine precision for non-negative arguments.
fn carlson_rf(mut x: f64, mut y: f64, mut z: f64) -> f64 {
    loop {
        let sx = x.sqrt();
        let sy = y.sqrt();
        let sz = z.sqrt();
        let lambda = sx * sy + sy * sz + sz * sx;
        x = 0.25 * (x + lambda);
        y = 0.25 * (y + lambda);
        z = 0.25 * (z + lambda);
        let mean = (x + y + z) / 3.0;
        let dx = 1.0 - x / mean;
        let dy = 1.0 - y / mean;
        let dz = 1.0 - z / mean;
        if dx.abs().max(dy.abs()).max(dz.abs()) < 1e-9 {
            let e2 = dx * dy + dy * dz + dz * dx;
            let e3 = dx * dy * dz;
            return (1.0 - e2 / 10.0 + e3 / 14.0 + e2 * e2 / 24.0 - 3.0 * e2 * e3 / 44.0)
                / mean.sqrt();
        }
    }
}

/// Carlson symmetric elliptic integral `R_D(x, y, z)` by duplication.
fn carlson_rd(mut x: f64, mut y: f64, mut z: f64) -> f64 {
    let mut sum = 0.0;
    let mut fac = 1.0;
    loop {
        let sx = x.sqrt();
        let sy = y.sqrt();
        let sz = z.sqrt();
        let lambda = sx * sy + sy * sz + sz * sx;
        sum += fac / (sz * (z + lambda));
        fac *= 0.25;
        x = 0.25 * (x + lambda);
        y = 0.25 * (y + lambda);
        z = 0.25 * (z + lambda);
        let mean = (x + y + 3.0 * z) / 5.0;
        let dx = 1.0 - x / mean;
        let dy = 1.0 - y / mean;
        let dz = 1.0 - z / mean;
        if dx.abs().max(dy.abs()).max(dz.abs()) < 1e-9 {
            let ea = dx * dy;
            let eb = dz * dz;
            let ec = ea - eb;
            let ed = ea - 6.0 * eb;
            let ee = ed + ec + ec;
            let s = 1.0 + ed * (-3.0 / 14.0 + 9.0 / 88.0 * ed - 4.5 / 26.0 * dz * ee)
                + dz * (ee / 6.0 + dz * (-9.0 / 22.0 * ec + 3.0 / 26.0 * dz * ea));
            return 3.0 * sum + fac * s / (mean * mean.sqrt());
        }
    }
}

/// Incomplete elliptic integral `F(phi | m) = int_0^phi du / sqrt(1 - m sin^2 u)`
/// for `|phi| <= pi/2`, via Carlson's `R_F`.
fn ellip_f(phi: f64, m: f64) -> f64 {
    let s = phi.sin();
    let c = phi.cos();
    s * carlson_rf(c * c, 1.0 - m * s * s, 1.0)
}

/// Complete elliptic integral `K(m)`.
fn ellip_k(m: f64) -> f64 {
    carlson_rf(0.0, 1.0 - m, 1.0)
}

/// Complete elliptic integral `E(m)`.
fn ellip_e(m: f64) -> f64 {
    carlson_rf(0.0, 1.0 - m, 1.0) - m / 3.0 * carlson_rd(0.0, 1.0 - m, 1.0)
}

/// Elliptic modulus of the rotation at energy `h`: with
/// `p^2 = 2h + 4 sin^2(q/2) = (2h + 4)(1 - m cos^2(q/2))`, `m = 1/(1 + h/2)`.
fn rotation_modulus(h: f64) -> f64 {
    1.0 / (1.0 + 0.5 * h)
}

/// Rotation period `T(h) = int_0^{2pi} dq / sqrt(2h + 4 sin^2(q/2))`
/// in closed form, `T = 2 K(m) / sqrt(1 + h/2)`.
pub fn period(h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Domain(format!("period requires h > 0, got {h}")));
    }
    let m = rotation_modulus(h);
    Ok(2.0 * ellip_k(m) / (1.0 + 0.5 * h).sqrt())
}

/// Action `I(h) = (1/2pi) oint p dq` of the rotation at energy `h > 0`
/// in closed form, `I = (4/pi) sqrt(1 + h/2) E(m)`.
pub fn action(h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Domain(format!("action requires h > 0, got {h}")));
    }
    let m = rotation_modulus(h);
    Ok(4.0 / PI * (1.0 + 0.5 * h).sqrt() * ellip_e(m))
}

/// Time to flow from `q = 0` to `q in [0, 2pi]` along the upper rotation at
/// energy `h`: `t(q) = [K(m) - F(pi/2 - q/2 | m)] / sqrt(1 + h/2)`.
pub fn rotation_time_of_q(h: f64, q: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Domain(format!(
            "rotation time requires h > 0, got {h}"
        )));
    }
    let m = rotation_modulus(h);
    Ok((ellip_k(m) - ellip_f(0.5 * (PI - q), m)) / (1.0 + 0.5 * h).sqrt())
}

/// Position along the upper rotation at energy `h` after time `t in [0, T]`
/// from `q = 0`: inverts the closed-form `t(q)` by Newton with `dq/dt = p`.
pub fn rotation_q_of_time(h: f64, t: f64) -> Result<f64> {
    let period = period(h)?;
    let mut q = 2.0 * PI * t / period;
    for _ in 0..60 {
        let f = rotation_time_of_q(h, q.clamp(0.0, 2.0 * PI))? - t;
        let step = f * rotation_momentum(h, q);
        q = (q - step).clamp(0.0, 2.0 * PI);
        if step.abs() < 1e-13 {
            return Ok(q);
        }
    }
    Err(Error::Domain(format!(
        "time inversion did not converge at h = {h}, t = {t}"
    )))
}

/// Newton inversion of the rotation time map from an explicit starting
/// guess; `dq/dt = p` makes each step exact to second order.
fn invert_rotation_time(h: f64, t: f64, seed: f64) -> Result<f64> {
    let mut q = seed.clamp(0.0, 2.0 * PI);
    for _ in 0..60 {
        let f = rotation_time_of_q(h, q)? - t;
        let step = f * rotation_momentum(h, q);
        q = (q - step).clamp(0.0, 2.0 * PI);
        if step.abs() < 1e-13 {
            return Ok(q);
        }
    }
    Err(Error::Domain(format!(
        "time inversion did not converge at h = {h}, t = {t}"
    )))
}

/// A rotational orbit at fixed energy, evaluated through the closed-form
/// elliptic time parameterization `t(q)` and its inverse `q(theta)`, where
/// `theta = 2*pi*t/T` is the orbit angle. The inverse is tabulated once at
/// construction on a uniform angle grid (values plus exact slopes
/// `dq/dtheta = p/omega`) and evaluated by cubic Hermite interpolation; the
/// grid is refined until midpoint checks against the exact Newton inversion
/// clear `5e-12`, so repeated evaluations cost nanoseconds instead of an
/// elliptic solve each.
#[derive(Clone, Debug)]
pub struct RotationOrbit {
    pub h: f64,
    pub period: f64,
    pub omega: f64,
    table_q: Vec<f64>,
    table_d: Vec<f64>,
}

impl RotationOrbit {
    pub fn new(h: f64) -> Result<Self> {
        if h <= 0.0 {
            return Err(Error::Domain(format!(
                "rotation orbit requires h > 0, got {h}"
            )));
        }
        let period = period(h)?;
        let omega = 2.0 * PI / period;
        let mut n = 512usize;
        loop {
            let (table_q, table_d) = Self::build_table(h, period, omega, n)?;
            let orbit = RotationOrbit {
                h,
                period,
                omega,
                table_q,
                table_d,
            };
            if n >= 16384 || orbit.table_error(n)? < 5e-12 {
                return Ok(orbit);
            }
            n *= 2;
        }
    }

    /// March the exact inversion across one period: each node seeds the next
    /// Newton solve, so the whole table costs a couple of elliptic
    /// evaluations per node.
    fn build_table(h: f64, period: f64, omega: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let dt = period / n as f64;
        let mut qs = Vec::with_capacity(n + 1);
        let mut ds = Vec::with_capacity(n + 1);
        qs.push(0.0);
        ds.push(rotation_momentum(h, 0.0) / omega);
        for j in 1..n {
            let prev = qs[j - 1];
            let seed = prev + rotation_momentum(h, prev) * dt;
            let q = invert_rotation_time(h, j as f64 * dt, seed)?;
            qs.push(q);
            ds.push(rotation_momentum(h, q) / omega);
        }
        qs.push(2.0 * PI);
        ds.push(rotation_momentum(h, 2.0 * PI) / omega);
        Ok((qs, ds))
    }

    /// Largest interpolation error over a spread of panel midpoints.
    fn table_error(&self, n: usize) -> Result<f64> {
        let checks = n.min(257);
        let mut worst = 0.0f64;
        for k in 0..checks {
            let j = k * n / checks;
            let theta = 2.0 * PI * (j as f64 + 0.5) / n as f64;
            let interp = self.table_lifted_q(theta);
            let exact = invert_rotation_time(self.h, theta / self.omega, interp)?;
            worst = worst.max((interp - exact).abs());
        }
        Ok(worst)
    }

    /// Cubic Hermite evaluation of the lifted position for any real angle.
    fn table_lifted_q(&self, theta: f64) -> f64 {
        let wraps = (theta / (2.0 * PI)).floor();
        let thr = theta - 2.0 * PI * wraps;
        let n = self.table_q.len() - 1;
        let x = (thr / (2.0 * PI) * n as f64).min(n as f64 - 1e-9).max(0.0);
        let j = x as usize;
        let t = x - j as f64;
        let dtheta = 2.0 * PI / n as f64;
        let (q0, q1) = (self.table_q[j], self.table_q[j + 1]);
        let (m0, m1) = (self.table_d[j] * dtheta, self.table_d[j + 1] * dtheta);
        let t2 = t * t;
        let t3 = t2 * t;
        let q = q0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * (t3 - 2.0 * t2 + t)
            + q1 * (-2.0 * t3 + 3.0 * t2)
            + m1 * (t3 - t2);
        2.0 * PI * wraps + q
    }

    /// Time to flow from `q = 0` to lifted angle `q` along the orbit
    /// (`t(q + 2pi) = t(q) + T`).
    pub fn time_of_lifted_q(&self, q: f64) -> f64 {
        let wraps = (q / (2.0 * PI)).floor();
        let qr = q - 2.0 * PI * wraps;
        wraps * self.period + rotation_time_of_q(self.h, qr).expect("h > 0 by construction")
    }

    /// Orbit angle `theta = 2 pi t(q) / T` for a lifted position `q`.
    pub fn angle_of_lifted_q(&self, q: f64) -> f64 {
        2.0 * PI * self.time_of_lifted_q(q) / self.period
    }

    /// Lifted position `q(theta)`, satisfying `q(theta + 2pi) = q(theta) + 2pi`.
    pub fn lifted_q_of_angle(&self, theta: f64) -> f64 {
        self.table_lifted_q(theta)
    }

    /// Phase point at orbit angle `theta` (angle wrapped into `[0, 2pi)`).
    pub fn state(&self, theta: f64) -> PendulumState {
        let q = self.lifted_q_of_angle(theta).rem_euclid(2.0 * PI);
        PendulumState {
            q,
            p: rotation_momentum(self.h, q),
        }
    }

    /// Flow the orbit for time `t` starting from orbit angle `theta0`.
    pub fn at_time(&self, theta0: f64, t: f64) -> PendulumState {
        self.state(theta0 + self.omega * t)
    }
}

static ORBIT_CACHE: OnceLock<Mutex<HashMap<u64, Arc<RotationOrbit>>>> = OnceLock::new();

/// Shared, cached rotation orbit at energy `h` (keyed by the bit pattern of
/// `h`, so equal inputs share the spectral data).
pub fn rotation_orbit_cached(h: f64) -> Result<Arc<RotationOrbit>> {
    let cache = ORBIT_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(orbit) = cache.lock().get(&h.to_bits()) {
        return Ok(orbit.clone());
    }
    let orbit = Arc::new(RotationOrbit::new(h)?);
    cache.lock().insert(h.to_bits(), orbit.clone());
    Ok(orbit)
}

/// Rotational solution with `q(0) = x`, `p(0) = sqrt(2h + 4 sin^2(x/2)) > 0`,
/// evaluated at time `t`.
pub fn rotation_orbit(h: f64, x: f64, t: f64) -> Result<PendulumState> {
    let orbit = rotation_orbit_cached(h)?;
    let theta0 = orbit.angle_of_lifted_q(x);
    Ok(orbit.at_time(theta0, t))
}

/// Action-angle chart on an annulus of rotational orbits around a reference
/// energy `h0`. The action coordinate is measured relative to the reference,
/// `r = I(h) - I(h0)`, so the reference orbit sits at `r = 0`.
#[derive(Clone, Debug)]
pub struct ActionAngleChart {
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    i0: f64,
}

impl ActionAngleChart {
    pub fn new(h0: f64, h_min: f64, h_max: f64) -> Result<Self> {
        if !(h_min > 0.0 && h_min <= h0 && h0 <= h_max) {
            return Err(Error::Domain(format!(
                "invalid chart annulus 0 < {h_min} <= {h0} <= {h_max}"
            )));
        }
        Ok(ActionAngleChart {
            h0,
            h_min,
            h_max,
            i0: action(h0)?,
        })
    }

    /// Relative action at energy `h`.
    pub fn action_of_energy(&self, h: f64) -> Result<f64> {
        Ok(action(h)? - self.i0)
    }

    /// Invert `I(h) - I(h0) = r` by Newton using `dI/dh = T/(2 pi)`.
    pub fn energy_of_action(&self, r: f64) -> Result<f64> {
        let mut h = self.h0;
        for _ in 0..100 {
            let f = action(h)? - self.i0 - r;
            let df = period(h)? / (2.0 * PI);
            let step = f / df;
            h -= step;
            if h <= 0.0 {
                return Err(Error::ChartDomain(format!(
                    "action {r} leaves the rotational regime"
                )));
            }
            if step.abs() < 1e-14 * (1.0 + h.abs()) {
                return Ok(h);
            }
        }
        Err(Error::ChartDomain(format!(
            "action inversion did not converge for r = {r}"
        )))
    }

    /// Rotation frequency at relative action `r`.
    pub fn omega(&self, r: f64) -> Result<f64> {
        Ok(2.0 * PI / period(self.energy_of_action(r)?)?)
    }

    /// Map a phase point on a rotational orbit to `(theta, r)`.
    pub fn to_angle_action(&self, s: &PendulumState) -> Result<(f64, f64)> {
        if s.p <= 0.0 {
            return Err(Error::ChartDomain(format!(
                "chart covers the upper rotation branch only, got p = {}",
                s.p
            )));
        }
        let h = energy(s.q, s.p);
        if h < self.h_min || h > self.h_max {
            return Err(Error::ChartDomain(format!(
                "energy {h} outside chart annulus [{}, {}]",
                self.h_min, self.h_max
            )));
        }
        let t = rotation_time_of_q(h, s.q.rem_euclid(2.0 * PI))?;
        let theta = (2.0 * PI * t / period(h)?).rem_euclid(2.0 * PI);
        Ok((theta, action(h)? - self.i0))
    }

    /// Inverse chart map: invert `t(q) = theta T / 2 pi` by Newton with
    /// `dt/dq = 1/p`.
    pub fn from_angle_action(&self, theta: f64, r: f64) -> Result<PendulumState> {
        let h = self.energy_of_action(r)?;
        if h < self.h_min || h > self.h_max {
            return Err(Error::ChartDomain(format!(
                "action {r} maps to energy {h} outside the annulus"
            )));
        }
        let theta = theta.rem_euclid(2.0 * PI);
        let target = theta / (2.0 * PI) * period(h)?;
        let mut q = theta;
        for _ in 0..60 {
            let f = rotation_time_of_q(h, q.clamp(0.0, 2.0 * PI))? - target;
            let step = f * rotation_momentum(h, q);
            q = (q - step).clamp(0.0, 2.0 * PI);
            if step.abs() < 1e-13 {
                return Ok(PendulumState {
                    q: q.rem_euclid(2.0 * PI),
                    p: rotation_momentum(h, q),
                });
            }
        }
        Err(Error::ChartDomain(format!(
            "angle inversion did not converge for theta = {theta}"
        )))
    }
}

//! Heteroclinic links between nearby hyperbolic tori and transition chains.
//!
//! Both invariant-manifold crossings of a common transverse section are
//! located by a square Newton solve over the graph parameters and the
//! section-plane coordinates.  The gap between the two crossings is measured
//! in the pendulum energies of two designated block slots; zeros of that gap
//! over the section's frame parameters are certified heteroclinic
//! connections.  A chain strings such links along the energy ladder of one
//! path step: a jump from the one-site periodic orbit onto the first
//! two-site torus, a ladder of small energy transfers between neighbouring
//! tori, and a final jump onto the next one-site periodic orbit.

use crate::decay::Site;
use crate::flow::{integrate, time_t_map_with_jacobian, Scheme};
use crate::lattice::{LatticeModel, LatticeState};
use crate::manifold::{
    graph_state, solve_graph, AdaptedChart, ContractionDiagnostics, GraphFunction,
    GraphSolveOptions, Side, TorusSpec,
};
use crate::melnikov::{
    hypothesis_survey, periodic_critical_point_slot, torus_critical_point,
    torus_melnikov_function, MelnikovConfig, SurveyTables,
};
use crate::pendulum::{rotation_orbit_cached, separatrix, RotationOrbit};
use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

/// Options for locating and certifying heteroclinic links.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Graph-transform options used for every invariant-manifold solve.
    pub graph: GraphSolveOptions,
    /// Quadrature and survey options for the splitting-function machinery.
    pub melnikov: MelnikovConfig,
    /// Sup-norm tolerance of the section-membership Newton solve.
    pub section_tol: f64,
    /// Sup-norm tolerance on the measured energy distances of a link.
    pub newton_tol: f64,
    /// Local error tolerance of the section flights.
    pub integrator_tol: f64,
    /// Extra flight time past the point where the seed enters the chart box.
    pub flight_margin: f64,
    /// Energy gap factor for the jump links (`gap <= kappa * eps`); `None`
    /// fits it from the measured splitting data.
    pub kappa: Option<f64>,
    /// The restricted transversality certificate requires the smallest
    /// singular value of the distance Jacobian to exceed
    /// `sv_floor_factor * eps * cert`, where `cert` is the curvature scale of
    /// the splitting potential at the seed.
    pub sv_floor_factor: f64,
    /// Ladder step as a fraction of `eps` times the measured transfer rate.
    pub arnold_step_factor: f64,
    /// Stop a step plan after this many links (partial plan), if set.
    pub max_links: Option<usize>,
    /// Allowed defect of the conserved total energy on every link.
    pub energy_tol: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            graph: GraphSolveOptions {
                cheb_n: 7,
                ang_n: 9,
                map_time: 1.5,
                tol: 1e-9,
                ..GraphSolveOptions::default()
            },
            melnikov: MelnikovConfig {
                grid_x: 6,
                grid_h: 3,
                ..MelnikovConfig::default()
            },
            section_tol: 1e-10,
            newton_tol: 1e-10,
            integrator_tol: 1e-12,
            flight_margin: 0.5,
            kappa: None,
            sv_floor_factor: 1e-3,
            arnold_step_factor: 0.5,
            max_links: None,
            energy_tol: 1e-9,
        }
    }
}

/// Which tori a link connects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkRegime {
    /// Between two nearby two-site tori along the energy ladder.
    Arnold,
    /// Between a one-site periodic orbit and a torus with one energy `O(eps)`.
    Jump,
}

/// Section geometry: which block slot carries what in the unperturbed frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SectionGeometry {
    /// One rotor; the other two slots ride the homoclinic pulse.
    Periodic { rotor_slot: usize },
    /// Rotors on slots 0 and 1; the pulse on slot 2.
    Ladder,
}

/// One slot of the unperturbed section frame.
#[derive(Clone)]
enum SlotKind {
    Rotor {
        orbit: Arc<RotationOrbit>,
        /// Initial (lifted) pendulum position.
        x: f64,
        h: f64,
    },
    Separatrix {
        tau: f64,
    },
}

/// Transverse section through a point of the unperturbed homoclinic frame.
///
/// The base point is the frame at time zero; the normal directions are the
/// pendulum-energy gradients of the two measured slots, completed by the
/// gradient at the auxiliary slot so that the three normals together with the
/// frame tangents span the whole block space.
#[derive(Clone)]
pub struct SectionFrame {
    pub geometry: SectionGeometry,
    slots: [SlotKind; 3],
    /// The two slots whose pendulum energies measure the splitting.
    pub measured: [usize; 2],
    /// The remaining slot; its energy gradient completes the normal frame.
    pub aux: usize,
    /// Base point, ordered `(q0, p0, q1, p1, q2, p2)`.
    pub base: [f64; 6],
    /// Normal directions: energy gradients at `measured[0]`, `measured[1]`,
    /// and `aux`.
    pub normals: [[f64; 6]; 3],
}

/// Serializable frame parameters, sufficient to rebuild the frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameParams {
    pub geometry: SectionGeometry,
    /// Rotor initial positions per slot (zero on separatrix slots).
    pub x: [f64; 3],
    /// Rotor energies per slot (zero on separatrix slots).
    pub h: [f64; 3],
    /// Separatrix phases per slot (zero on rotor slots).
    pub tau: [f64; 3],
}

fn grad_energy(q: f64, p: f64) -> (f64, f64) {
    (-q.sin(), p)
}

impl SectionFrame {
    /// Periodic geometry: a rotor of energy `h` and initial position `x` on
    /// `rotor_slot`; the other two slots on the homoclinic pulse at phases
    /// `t1 < t2`-slot-ordered. The measured slots are the two pulse slots.
    pub fn periodic(rotor_slot: usize, x: f64, h: f64, t1: f64, t2: f64) -> Result<Self> {
        if rotor_slot > 2 {
            return Err(Error::Domain(format!("rotor slot {rotor_slot} out of range")));
        }
        let orbit = rotation_orbit_cached(h)?;
        let sep: Vec<usize> = (0..3).filter(|k| *k != rotor_slot).collect();
        let mk = |k: usize| -> SlotKind {
            if k == rotor_slot {
                SlotKind::Rotor {
                    orbit: orbit.clone(),
                    x,
                    h,
                }
            } else if k == sep[0] {
                SlotKind::Separatrix { tau: t1 }
            } else {
                SlotKind::Separatrix { tau: t2 }
            }
        };
        Self::assemble(
            SectionGeometry::Periodic { rotor_slot },
            [mk(0), mk(1), mk(2)],
            [sep[0], sep[1]],
            rotor_slot,
        )
    }

    /// Ladder geometry: rotors of energies `ha`, `hb` and initial positions
    /// `xa`, `xb` on slots 0 and 1, the pulse on slot 2 at phase `t`. The
    /// measured slots are 1 (the receiving rotor) and 2 (the pulse).
    pub fn ladder(xa: f64, ha: f64, xb: f64, hb: f64, t: f64) -> Result<Self> {
        let oa = rotation_orbit_cached(ha)?;
        let ob = rotation_orbit_cached(hb)?;
        Self::assemble(
            SectionGeometry::Ladder,
            [
                SlotKind::Rotor { orbit: oa, x: xa, h: ha },
                SlotKind::Rotor { orbit: ob, x: xb, h: hb },
                SlotKind::Separatrix { tau: t },
            ],
            [1, 2],
            0,
        )
    }

    fn assemble(
        geometry: SectionGeometry,
        slots: [SlotKind; 3],
        measured: [usize; 2],
        aux: usize,
    ) -> Result<Self> {
        let mut fr = SectionFrame {
            geometry,
            slots,
            measured,
            aux,
            base: [0.0; 6],
            normals: [[0.0; 6]; 3],
        };
        fr.base = fr.unperturbed_at(0.0);
        for (j, &slot) in [measured[0], measured[1], aux].iter().enumerate() {
            let (gq, gp) = grad_energy(fr.base[2 * slot], fr.base[2 * slot + 1]);
            fr.normals[j][2 * slot] = gq;
            fr.normals[j][2 * slot + 1] = gp;
        }
        let t = fr.transversality();
        if t < 1e-6 {
            return Err(Error::Transversality(format!(
                "degenerate section frame: slot gradient norm {t:.3e}"
            )));
        }
        Ok(fr)
    }

    /// Rebuild a frame from its serialized parameters.
    pub fn from_params(p: &FrameParams) -> Result<Self> {
        match p.geometry {
            SectionGeometry::Periodic { rotor_slot } => {
                let sep: Vec<usize> = (0..3).filter(|k| *k != rotor_slot).collect();
                SectionFrame::periodic(
                    rotor_slot,
                    p.x[rotor_slot],
                    p.h[rotor_slot],
                    p.tau[sep[0]],
                    p.tau[sep[1]],
                )
            }
            SectionGeometry::Ladder => {
                SectionFrame::ladder(p.x[0], p.h[0], p.x[1], p.h[1], p.tau[2])
            }
        }
    }

    /// Serializable parameters of this frame.
    pub fn params(&self) -> FrameParams {
        let mut x = [0.0; 3];
        let mut h = [0.0; 3];
        let mut tau = [0.0; 3];
        for (k, s) in self.slots.iter().enumerate() {
            match s {
                SlotKind::Rotor { x: xx, h: hh, .. } => {
                    x[k] = *xx;
                    h[k] = *hh;
                }
                SlotKind::Separatrix { tau: t } => tau[k] = *t,
            }
        }
        FrameParams {
            geometry: self.geometry,
            x,
            h,
            tau,
        }
    }

    /// Sum of the rotor energies (the conserved total at `eps = 0`, since
    /// the pulse slots carry zero pendulum energy and the coupling vanishes
    /// on the frame's asymptotic tori).
    pub fn total_energy(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| match s {
                SlotKind::Rotor { h, .. } => *h,
                SlotKind::Separatrix { .. } => 0.0,
            })
            .sum()
    }

    /// The frame trajectory of the uncoupled block at time `t`.
    pub fn unperturbed_at(&self, t: f64) -> [f64; 6] {
        let mut y = [0.0; 6];
        for (k, s) in self.slots.iter().enumerate() {
            let (q, p) = match s {
                SlotKind::Rotor { orbit, x, .. } => {
                    let st = orbit.at_time(orbit.angle_of_lifted_q(*x), t);
                    (st.q, st.p)
                }
                SlotKind::Separatrix { tau } => {
                    let st = separatrix(tau + t);
                    (st.q, st.p)
                }
            };
            y[2 * k] = q;
            y[2 * k + 1] = p;
        }
        y
    }

    /// Smallest slot gradient norm at the base point. The flow tangent and
    /// the energy gradient of each slot are orthogonal with common norm
    /// `sqrt(p^2 + sin^2 q)`, so this is exactly the finite-angle
    /// transversality margin between the section normals and the frame's
    /// tangent directions.
    pub fn transversality(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for k in 0..3 {
            let q = self.base[2 * k];
            let p = self.base[2 * k + 1];
            worst = worst.min((p * p + q.sin().powi(2)).sqrt());
        }
        worst
    }

    fn separatrix_phase(&self, k: usize) -> Option<f64> {
        match &self.slots[k] {
            SlotKind::Separatrix { tau } => Some(*tau),
            SlotKind::Rotor { .. } => None,
        }
    }

}

/// An adapted chart together with both solved manifold graphs.
pub struct ManifoldData {
    pub chart: AdaptedChart,
    pub unstable: GraphFunction,
    pub stable: GraphFunction,
    pub diagnostics: (ContractionDiagnostics, ContractionDiagnostics),
}

/// Solve both invariant-manifold graphs of `torus` over the block `active`.
pub fn solve_manifolds(
    model: &LatticeModel,
    torus: TorusSpec,
    active: [Site; 3],
    opt: &GraphSolveOptions,
) -> Result<ManifoldData> {
    let chart = AdaptedChart::new(model, torus, active)?;
    let (r_u, r_s) = rayon::join(
        || solve_graph(&chart, Side::Unstable, opt),
        || solve_graph(&chart, Side::Stable, opt),
    );
    let (unstable, du) = r_u?;
    let (stable, ds) = r_s?;
    Ok(ManifoldData {
        chart,
        unstable,
        stable,
        diagnostics: (du, ds),
    })
}

impl ManifoldData {
    pub fn graph(&self, side: Side) -> &GraphFunction {
        match side {
            Side::Unstable => &self.unstable,
            Side::Stable => &self.stable,
        }
    }
}

/// A solved crossing of one invariant manifold with a section.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SectionPoint {
    pub side: Side,
    /// Block state on the section, in the branch of the base point.
    pub state: Vec<f64>,
    /// Graph base parameters of the seed on the manifold.
    pub base_params: Vec<f64>,
    /// Components along the two measured normals and the auxiliary normal.
    pub coords: [f64; 3],
    /// Flight time from the chart box to the section.
    pub flight: f64,
    /// Sup norm of the section-membership residual.
    pub residual: f64,
    /// Defect of the conserved total energy against the frame energy.
    pub energy_defect: f64,
    pub iterations: usize,
}

fn state6(st: &LatticeState) -> [f64; 6] {
    let mut y = [0.0; 6];
    for k in 0..3 {
        y[2 * k] = st.q[k];
        y[2 * k + 1] = st.p[k];
    }
    y
}

fn block_state(y: &[f64; 6]) -> LatticeState {
    let mut st = LatticeState::zeros(3);
    for k in 0..3 {
        st.q[k] = y[2 * k];
        st.p[k] = y[2 * k + 1];
    }
    st
}

/// Place a lifted graph point exactly on the conserved energy level by
/// correcting a rotor momentum. The true manifolds lie inside the level set;
/// the graph interpolation error in the action fibers does not respect that,
/// and removing its transverse component gives a strictly better manifold
/// approximation.
pub(crate) fn project_block_energy(
    chart: &AdaptedChart,
    st: &mut LatticeState,
    target: f64,
) -> Result<()> {
    for _ in 0..4 {
        let defect = chart.sub_model.hamiltonian(st) - target;
        if defect.abs() < 1e-14 {
            return Ok(());
        }
        let &k = chart
            .s_idx
            .iter()
            .max_by(|a, b| st.p[**a].abs().total_cmp(&st.p[**b].abs()))
            .ok_or_else(|| Error::ChartDomain("chart without rotor slots".into()))?;
        let p2 = st.p[k] * st.p[k] - 2.0 * defect;
        if p2 <= 0.0 {
            return Err(Error::SectionMiss(format!(
                "energy projection defect {defect:.3e} exceeds the rotor momentum"
            )));
        }
        st.p[k] = p2.sqrt().copysign(st.p[k]);
    }
    Ok(())
}

/// Flow a graph point to the section and reduce every pendulum position to
/// the branch of the base point.
fn flow_to_section(
    chart: &AdaptedChart,
    graph: &GraphFunction,
    frame: &SectionFrame,
    params: &[f64],
    flight: f64,
    tol: f64,
) -> Result<[f64; 6]> {
    let mut st0 = graph_state(chart, graph, params)?;
    project_block_energy(chart, &mut st0, frame.total_energy())?;
    let st0 = st0;
    let t = match graph.side {
        Side::Unstable => flight,
        Side::Stable => -flight,
    };
    let img = integrate(&chart.sub_model, &st0, t, Scheme::Adaptive { tol })?;
    let mut y = state6(&img);
    for k in 0..3 {
        let shift = ((frame.base[2 * k] - y[2 * k]) / (2.0 * PI)).round();
        y[2 * k] += 2.0 * PI * shift;
    }
    Ok(y)
}

/// Unperturbed seed (graph base parameters) for the crossing of `side`.
fn seed_params(
    chart: &AdaptedChart,
    side: Side,
    frame: &SectionFrame,
    flight: f64,
) -> Result<Vec<f64>> {
    let t_start = match side {
        Side::Unstable => -flight,
        Side::Stable => flight,
    };
    let mut params = Vec::with_capacity(chart.c_dims() + chart.d_dims());
    for &k in &chart.off_idx {
        let tau = frame.separatrix_phase(k).ok_or_else(|| {
            Error::ChartDomain(format!(
                "chart hyperbolic slot {k} is not a pulse slot of the frame"
            ))
        })?;
        let st = separatrix(tau + t_start);
        let v = match side {
            Side::Unstable => st.q + st.p,
            Side::Stable => st.p - (st.q - 2.0 * PI),
        };
        params.push(v);
    }
    for (a, &k) in chart.s_idx.iter().enumerate() {
        let omega = chart.omegas[a];
        let theta = match &frame.slots[k] {
            SlotKind::Rotor { x, .. } => {
                let orbit = rotation_orbit_cached(chart.torus.energies[a])?;
                orbit.angle_of_lifted_q(*x) + omega * t_start
            }
            // A pulse slot of the frame carried by a chart rotor of small
            // energy: the nearby rotation orbit, time-aligned so that its
            // top (`q = pi`) matches the pulse top at phase `tau`.
            SlotKind::Separatrix { tau } => PI + omega * (tau + t_start),
        };
        params.push(theta.rem_euclid(2.0 * PI));
    }
    Ok(params)
}

/// Locate the crossing of one invariant manifold with the section.
///
/// The unknowns are the graph base parameters of the seed and the three
/// coordinates of the crossing in the section's normal frame; the equations
/// say that the flown seed lands on the base point shifted by those normal
/// components. At `eps = 0` the solution is the base point itself with zero
/// normal components.
pub fn manifold_to_section(
    chart: &AdaptedChart,
    graph: &GraphFunction,
    frame: &SectionFrame,
    cfg: &ChainConfig,
    warm: Option<&SectionPoint>,
) -> Result<SectionPoint> {
    let side = graph.side;
    let n_par = chart.c_dims() + chart.d_dims();
    if n_par != 3 {
        return Err(Error::ChartDomain(format!(
            "block chart has {n_par} graph parameters, expected 3"
        )));
    }
    let flight = match warm {
        Some(w) => w.flight,
        None => {
            // the seed's pulse coordinate behaves like `8 exp(-(T -+ tau))`;
            // fly long enough that it sits well inside the chart box
            let horizon = (8.0 / (0.7 * graph.delta)).ln() + cfg.flight_margin;
            let mut t = 0.0f64;
            for k in 0..3 {
                if let Some(tau) = frame.separatrix_phase(k) {
                    let reach = match side {
                        Side::Unstable => tau,
                        Side::Stable => -tau,
                    };
                    t = t.max(reach);
                }
            }
            t + horizon
        }
    };
    let mut params = match warm {
        Some(w) => w.base_params.clone(),
        None => seed_params(chart, side, frame, flight)?,
    };
    let mut coords = warm.map(|w| w.coords).unwrap_or([0.0; 3]);

    let residual = |params: &[f64], coords: &[f64; 3]| -> Result<[f64; 6]> {
        let y = flow_to_section(chart, graph, frame, params, flight, cfg.integrator_tol)?;
        let mut r = [0.0; 6];
        for j in 0..6 {
            r[j] = y[j]
                - frame.base[j]
                - coords[0] * frame.normals[0][j]
                - coords[1] * frame.normals[1][j]
                - coords[2] * frame.normals[2][j];
        }
        Ok(r)
    };
    let sup = |r: &[f64; 6]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut r = residual(&params, &coords)?;
    let mut best = sup(&r);
    let mut iterations = 0usize;
    let max_iter = 40;
    while best > cfg.section_tol && iterations < max_iter {
        iterations += 1;
        // Jacobian: three flown columns by forward differences, three exact
        // normal columns.
        let mut jac = DMatrix::<f64>::zeros(6, 6);
        let fd = 1e-7;
        for c in 0..3 {
            let mut pp = params.clone();
            pp[c] += fd;
            let rp = residual(&pp, &coords)?;
            for row in 0..6 {
                jac[(row, c)] = (rp[row] - r[row]) / fd;
            }
        }
        for c in 0..3 {
            for row in 0..6 {
                jac[(row, 3 + c)] = -frame.normals[c][row];
            }
        }
        let rhs = nalgebra::DVector::from_iterator(6, r.iter().copied());
        let step = jac.lu().solve(&rhs).ok_or_else(|| {
            Error::SectionMiss("singular section-membership Jacobian".into())
        })?;
        let mut lambda = 1.0f64;
        let mut accepted = false;
        for _ in 0..8 {
            let mut pp = params.clone();
            for c in 0..3 {
                pp[c] -= lambda * step[c];
            }
            let cc = [
                coords[0] - lambda * step[3],
                coords[1] - lambda * step[4],
                coords[2] - lambda * step[5],
            ];
            match residual(&pp, &cc) {
                Ok(rn) if sup(&rn) < best => {
                    params = pp;
                    coords = cc;
                    r = rn;
                    best = sup(&r);
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    if best > cfg.section_tol {
        return Err(Error::SectionMiss(format!(
            "section solve stalled at residual {best:.3e} after {iterations} iterations"
        )));
    }
    let y = flow_to_section(chart, graph, frame, &params, flight, cfg.integrator_tol)?;
    let st = block_state(&y);
    let energy_defect = (chart.sub_model.hamiltonian(&st) - frame.total_energy()).abs();
    Ok(SectionPoint {
        side,
        state: y.to_vec(),
        base_params: params,
        coords,
        flight,
        residual: best,
        energy_defect,
        iterations,
    })
}

/// Energy gap between two crossings at the frame's measured slots.
///
/// Along the perturbed flow each slot energy drifts as
/// `dE/dt = -eps * {H1, E}`, so to leading order the homoclinic gap equals
/// `-eps` times the slot's bracket integral over the frame.
pub fn splitting_distance(frame: &SectionFrame, zu: &SectionPoint, zs: &SectionPoint) -> [f64; 2] {
    let eu = block_state(&zu.state.clone().try_into().expect("block state"));
    let es = block_state(&zs.state.clone().try_into().expect("block state"));
    [
        eu.site_energy(frame.measured[0]) - es.site_energy(frame.measured[0]),
        eu.site_energy(frame.measured[1]) - es.site_energy(frame.measured[1]),
    ]
}

/// A certified heteroclinic connection between two tori.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainLink {
    pub from: TorusSpec,
    pub to: TorusSpec,
    pub regime: LinkRegime,
    pub eps: f64,
    pub frame: FrameParams,
    /// Matched section point (mean of the two crossings).
    pub section_state: Vec<f64>,
    pub unstable_params: Vec<f64>,
    pub stable_params: Vec<f64>,
    pub flight_unstable: f64,
    pub flight_stable: f64,
    /// Sup norm of the measured energy gaps at the solution.
    pub residual: f64,
    pub section_residuals: [f64; 2],
    pub energy_defect: f64,
    /// Smallest singular value of the distance Jacobian over the frame
    /// parameters, and the certified floor it must exceed.
    pub restricted_min_sv: f64,
    pub restricted_floor: f64,
    /// Full-space certificate: worst deviation of the off-path variational
    /// couplings from the uncoupled saddle behaviour, and the same divided
    /// by `eps`.
    pub offpath_deviation: f64,
    pub offpath_factor: f64,
    /// Flow-sense transversality: ratio of the two smallest singular values
    /// of the stacked tangent bases (small means a one-dimensional
    /// intersection), angle between the intersection direction and the flow,
    /// conditioning of the five-dimensional joint span, and its worst
    /// overlap with the total-energy gradient.
    pub flow_kernel_ratio: f64,
    pub flow_angle: f64,
    pub span_conditioning: f64,
    pub grad_h_overlap: f64,
}

/// Tangent basis of the flown manifold at a solved crossing: derivatives of
/// the section landing point with respect to the three graph parameters.
fn section_tangents(
    chart: &AdaptedChart,
    graph: &GraphFunction,
    frame: &SectionFrame,
    pt: &SectionPoint,
    tol: f64,
) -> Result<[[f64; 6]; 3]> {
    let fd = 1e-6;
    let mut cols = [[0.0; 6]; 3];
    for c in 0..3 {
        let mut pp = pt.base_params.clone();
        pp[c] += fd;
        let yp = flow_to_section(chart, graph, frame, &pp, pt.flight, tol)?;
        let mut pm = pt.base_params.clone();
        pm[c] -= fd;
        let ym = flow_to_section(chart, graph, frame, &pm, pt.flight, tol)?;
        for row in 0..6 {
            cols[c][row] = (yp[row] - ym[row]) / (2.0 * fd);
        }
    }
    Ok(cols)
}

fn norm6(v: &[f64; 6]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Flow-sense transversality diagnostics of a matched crossing pair.
fn flow_sense(
    chart: &AdaptedChart,
    tu: &[[f64; 6]; 3],
    ts: &[[f64; 6]; 3],
    state: &[f64; 6],
) -> (f64, f64, f64, f64) {
    let st = block_state(state);
    let flow = chart.sub_model.vector_field(&st);
    let flow6 = state6(&flow);
    // gradient of the total energy from the symplectic flow components
    let mut gh = [0.0; 6];
    for k in 0..3 {
        gh[2 * k] = -flow.p[k];
        gh[2 * k + 1] = flow.q[k];
    }
    let mut stack = DMatrix::<f64>::zeros(6, 6);
    let mut joint = DMatrix::<f64>::zeros(6, 6);
    for c in 0..3 {
        let nu = norm6(&tu[c]).max(1e-300);
        let ns = norm6(&ts[c]).max(1e-300);
        for row in 0..6 {
            stack[(row, c)] = tu[c][row] / nu;
            stack[(row, 3 + c)] = -ts[c][row] / ns;
            joint[(row, c)] = tu[c][row] / nu;
            joint[(row, 3 + c)] = ts[c][row] / ns;
        }
    }
    let svd = stack.clone().svd(false, true);
    let sv = &svd.singular_values;
    let kernel_ratio = sv[5] / sv[4].max(1e-300);
    // intersection direction from the null vector's unstable half
    let vt = svd.v_t.expect("svd with v");
    let mut dir = [0.0; 6];
    for c in 0..3 {
        for row in 0..6 {
            dir[row] += vt[(5, c)] * stack[(row, c)];
        }
    }
    let nf = norm6(&flow6).max(1e-300);
    let nd = norm6(&dir).max(1e-300);
    let dot: f64 = (0..6).map(|j| dir[j] * flow6[j]).sum::<f64>() / (nf * nd);
    let flow_angle = dot.abs().min(1.0).acos();
    let jsvd = joint.svd(false, false);
    let jsv = &jsvd.singular_values;
    let span_conditioning = jsv[4] / jsv[0].max(1e-300);
    let ngh = norm6(&gh).max(1e-300);
    let mut overlap = 0.0f64;
    for cols in [tu, ts] {
        for c in cols {
            let nc = norm6(c).max(1e-300);
            let d: f64 = (0..6).map(|j| c[j] * gh[j]).sum::<f64>() / (nc * ngh);
            overlap = overlap.max(d.abs());
        }
    }
    (kernel_ratio, flow_angle, span_conditioning, overlap)
}

/// Full-space certificate: seed the variational flow with off-path saddle
/// directions at the ends of the connecting orbit and measure how far the
/// returned expanding/contracting couplings deviate from the uncoupled
/// saddle behaviour.
fn offpath_certificate(
    model: &LatticeModel,
    chart: &AdaptedChart,
    state: &[f64; 6],
    eps: f64,
    flight: f64,
) -> Result<f64> {
    let t_cert = if eps > 0.0 {
        (0.45 * (1.0 / eps).ln()).clamp(2.0, flight)
    } else {
        flight.min(4.0)
    };
    let full = chart.embed(&block_state(state), &model.window);
    // neighbours of the block along the path direction
    let a0 = chart.active[0];
    let a1 = chart.active[1];
    let a2 = chart.active[2];
    let before = a0.add(&a0).add(&Site::from_coords(
        &a1.0.iter().map(|v| -v).collect::<Vec<_>>(),
    ));
    let after = a2.add(&a2).add(&Site::from_coords(
        &a1.0.iter().map(|v| -v).collect::<Vec<_>>(),
    ));
    let n = model.n_sites();
    let mut worst = 0.0f64;
    for site in [before, after] {
        let Some(j) = model.window.index_of(site) else {
            continue;
        };
        // expanding seed forward along the unstable stretch
        let back = integrate(model, &full, -t_cert, Scheme::Adaptive { tol: 1e-12 })?;
        let mut dq = vec![0.0; n];
        let mut dp = vec![0.0; n];
        dq[j] = 0.5;
        dp[j] = 0.5;
        let (_, out) =
            time_t_map_with_jacobian(model, &back, t_cert, &[(dq, dp)], 1e-12)?;
        let u_out = out[0].0[j] + out[0].1[j];
        let v_out = out[0].1[j] - out[0].0[j];
        worst = worst.max((v_out / u_out).abs());
        worst = worst.max((u_out * (-t_cert).exp() - 1.0).abs());
        // contracting seed backward along the stable stretch
        let fwd = integrate(model, &full, t_cert, Scheme::Adaptive { tol: 1e-12 })?;
        let mut dq = vec![0.0; n];
        let mut dp = vec![0.0; n];
        dq[j] = -0.5;
        dp[j] = 0.5;
        let (_, out) =
            time_t_map_with_jacobian(model, &fwd, -t_cert, &[(dq, dp)], 1e-12)?;
        let u_out = out[0].0[j] + out[0].1[j];
        let v_out = out[0].1[j] - out[0].0[j];
        worst = worst.max((u_out / v_out).abs());
        worst = worst.max((v_out * (-t_cert).exp() - 1.0).abs());
    }
    Ok(worst)
}

/// Solve for a heteroclinic connection: Newton over the two frame
/// parameters until the measured energy gaps vanish, then attach the
/// restricted, full-space, and flow-sense certificates.
#[allow(clippy::too_many_arguments)]
pub fn find_heteroclinic(
    model: &LatticeModel,
    from: &ManifoldData,
    to: &ManifoldData,
    frame_of: &dyn Fn([f64; 2]) -> Result<SectionFrame>,
    w0: [f64; 2],
    regime: LinkRegime,
    floor_cert: f64,
    cfg: &ChainConfig,
) -> Result<ChainLink> {
    let eps = model.eps;
    let mut warm_u: Option<SectionPoint> = None;
    let mut warm_s: Option<SectionPoint> = None;
    let eval = |w: [f64; 2],
                    warm_u: &mut Option<SectionPoint>,
                    warm_s: &mut Option<SectionPoint>|
     -> Result<([f64; 2], SectionFrame, SectionPoint, SectionPoint)> {
        let frame = frame_of(w)?;
        let zu = manifold_to_section(&from.chart, &from.unstable, &frame, cfg, warm_u.as_ref())?;
        let zs = manifold_to_section(&to.chart, &to.stable, &frame, cfg, warm_s.as_ref())?;
        let d = splitting_distance(&frame, &zu, &zs);
        *warm_u = Some(zu.clone());
        *warm_s = Some(zs.clone());
        Ok((d, frame, zu, zs))
    };

    let mut w = w0;
    let (mut d, mut frame, mut zu, mut zs) = eval(w, &mut warm_u, &mut warm_s)?;
    let sup = |d: &[f64; 2]| d[0].abs().max(d[1].abs());
    let mut best = sup(&d);
    let mut iterations = 0usize;
    while best > cfg.newton_tol && iterations < 25 {
        iterations += 1;
        let fd = 1e-6 * (1.0 + w[0].abs().max(w[1].abs()));
        let mut jac = [[0.0f64; 2]; 2];
        for c in 0..2 {
            let mut wp = w;
            wp[c] += fd;
            let (dp, _, _, _) = eval(wp, &mut warm_u.clone(), &mut warm_s.clone())?;
            jac[0][c] = (dp[0] - d[0]) / fd;
            jac[1][c] = (dp[1] - d[1]) / fd;
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            return Err(Error::NewtonDivergence(
                "singular distance Jacobian over the frame parameters".into(),
            ));
        }
        let step = [
            (jac[1][1] * d[0] - jac[0][1] * d[1]) / det,
            (-jac[1][0] * d[0] + jac[0][0] * d[1]) / det,
        ];
        let mut lambda = 1.0f64;
        let mut accepted = false;
        for _ in 0..6 {
            let wn = [w[0] - lambda * step[0], w[1] - lambda * step[1]];
            let mut wu = warm_u.clone();
            let mut ws = warm_s.clone();
            match eval(wn, &mut wu, &mut ws) {
                Ok((dn, fr, u, s)) if sup(&dn) < best => {
                    w = wn;
                    d = dn;
                    frame = fr;
                    zu = u;
                    zs = s;
                    warm_u = wu;
                    warm_s = ws;
                    best = sup(&d);
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        if !accepted {
            return Err(Error::NewtonDivergence(format!(
                "link solve stalled at distance {best:.3e} after {iterations} iterations"
            )));
        }
    }
    if best > cfg.newton_tol {
        return Err(Error::NewtonDivergence(format!(
            "link solve did not reach tolerance: distance {best:.3e}"
        )));
    }

    // restricted certificate: smallest singular value of the distance
    // Jacobian over the frame parameters
    let fd = 1e-6 * (1.0 + w[0].abs().max(w[1].abs()));
    let mut jac = [[0.0f64; 2]; 2];
    for c in 0..2 {
        let mut wp = w;
        wp[c] += fd;
        let (dp, _, _, _) = eval(wp, &mut warm_u.clone(), &mut warm_s.clone())?;
        jac[0][c] = (dp[0] - d[0]) / fd;
        jac[1][c] = (dp[1] - d[1]) / fd;
    }
    let jm = DMatrix::from_row_slice(2, 2, &[jac[0][0], jac[0][1], jac[1][0], jac[1][1]]);
    let sv = jm.svd(false, false).singular_values;
    let restricted_min_sv = sv[1];
    let restricted_floor = cfg.sv_floor_factor * eps * floor_cert;
    if restricted_min_sv < restricted_floor {
        return Err(Error::Transversality(format!(
            "restricted transversality below floor: {restricted_min_sv:.3e} < {restricted_floor:.3e}"
        )));
    }

    let mut mean = [0.0; 6];
    for j in 0..6 {
        mean[j] = 0.5 * (zu.state[j] + zs.state[j]);
    }
    let energy_defect = zu.energy_defect.max(zs.energy_defect);
    if energy_defect > cfg.energy_tol {
        return Err(Error::SectionMiss(format!(
            "energy defect {energy_defect:.3e} exceeds {:.1e}",
            cfg.energy_tol
        )));
    }

    let tu = section_tangents(&from.chart, &from.unstable, &frame, &zu, cfg.integrator_tol)?;
    let ts = section_tangents(&to.chart, &to.stable, &frame, &zs, cfg.integrator_tol)?;
    let (flow_kernel_ratio, flow_angle, span_conditioning, grad_h_overlap) =
        flow_sense(&from.chart, &tu, &ts, &mean);

    let offpath_deviation = offpath_certificate(
        model,
        &from.chart,
        &mean,
        eps,
        zu.flight.min(zs.flight),
    )?;
    let offpath_factor = if eps > 0.0 {
        offpath_deviation / eps
    } else {
        0.0
    };

    Ok(ChainLink {
        from: from.chart.torus.clone(),
        to: to.chart.torus.clone(),
        regime,
        eps,
        frame: frame.params(),
        section_state: mean.to_vec(),
        unstable_params: zu.base_params.clone(),
        stable_params: zs.base_params.clone(),
        flight_unstable: zu.flight,
        flight_stable: zs.flight,
        residual: best,
        section_residuals: [zu.residual, zs.residual],
        energy_defect,
        restricted_min_sv,
        restricted_floor,
        offpath_deviation,
        offpath_factor,
        flow_kernel_ratio,
        flow_angle,
        span_conditioning,
        grad_h_overlap,
    })
}

/// Chain of certified links across one path step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepPlan {
    pub step: usize,
    pub h: f64,
    pub kappa: f64,
    /// Tori visited in order: periodic, ladder tori, periodic.
    pub tori: Vec<TorusSpec>,
    pub links: Vec<ChainLink>,
    /// Set when the plan is partial; names the failing link.
    pub failure: Option<String>,
}

/// Ordered transition chain over every step of the model's path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainPlan {
    pub h: f64,
    pub eps: f64,
    pub steps: Vec<StepPlan>,
}

impl ChainPlan {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("plan serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("plan deserialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn n_links(&self) -> usize {
        self.steps.iter().map(|s| s.links.len()).sum()
    }
}

/// Fit the jump-gap factor from the survey: half the weakest usable transfer
/// rate at the surveyed critical points over the curvature scale of the
/// splitting potential, clamped to a safe range.
fn fit_kappa(tables: &SurveyTables) -> f64 {
    let mut m_min = f64::INFINITY;
    let mut d2_max = 0.0f64;
    for row in &tables.torus {
        let m = row.function_at_tau.abs();
        if m > 1e-6 {
            m_min = m_min.min(m);
        }
        d2_max = d2_max.max(row.second_derivative.abs());
    }
    if !m_min.is_finite() || d2_max == 0.0 {
        return 0.1;
    }
    (0.5 * m_min / d2_max).clamp(0.02, 1.0)
}

#[derive(Clone, Copy, Debug)]
struct LadderSeed {
    x: f64,
    tau: f64,
    rate: f64,
    curvature: f64,
}

/// Scan rotor positions of the sending slot: for each, the critical pulse
/// phase and the energy transfer rate into the receiving slot.
///
/// The three slot bracket integrals sum to zero and the pulse slot's
/// vanishes at its critical point; with the gap drifting against the
/// bracket, the energy received per unit `eps` is the first rotor's
/// integral.
fn ladder_scan(
    model: &LatticeModel,
    i: usize,
    xb: f64,
    ha: f64,
    hb: f64,
    mel: &MelnikovConfig,
) -> Result<Vec<LadderSeed>> {
    let n = 16;
    let mut out = Vec::new();
    for k in 0..n {
        let x = 2.0 * PI * k as f64 / n as f64;
        let Ok(cp) = torus_critical_point(model, i, x, xb, ha, hb, mel) else {
            continue;
        };
        let Ok(m0) = torus_melnikov_function(model, i, x, xb, ha, hb, cp.tau, mel) else {
            continue;
        };
        out.push(LadderSeed {
            x,
            tau: cp.tau,
            rate: m0.value,
            curvature: cp.second_derivative.abs(),
        });
    }
    if out.iter().all(|s| s.rate <= 0.0) {
        return Err(Error::Hypothesis(
            "no positive transfer rate found for the ladder seed".into(),
        ));
    }
    Ok(out)
}

/// Largest transfer rate in a scan.
fn scan_max_rate(scan: &[LadderSeed]) -> f64 {
    scan.iter().fold(0.0f64, |m, s| m.max(s.rate))
}

/// Seed whose rate is closest to the wanted step rate. The solved rotor
/// position must sit on a flank of the rate profile (at its maximum the
/// position derivative vanishes and the solve degenerates), which picking by
/// target rate guarantees for targets below the maximum.
fn pick_seed(scan: &[LadderSeed], target: f64) -> LadderSeed {
    *scan
        .iter()
        .filter(|s| s.rate > 0.0)
        .min_by(|a, b| (a.rate - target).abs().total_cmp(&(b.rate - target).abs()))
        .expect("scan verified nonempty")
}

/// Build the certified transition chain of one path step: jump onto the
/// ladder, climb it, jump off. Link failures yield a partial plan naming the
/// failing link; hypothesis failures are errors.
pub fn build_step_chain(
    model: &LatticeModel,
    i: usize,
    h: f64,
    cfg: &ChainConfig,
) -> Result<StepPlan> {
    let eps = model.eps;
    let path = &model.path.sites;
    if i + 2 >= path.len() {
        return Err(Error::Config(format!("path step {i} out of range")));
    }
    let active = [path[i], path[i + 1], path[i + 2]];

    let (report, tables) = hypothesis_survey(model, i, h, &cfg.melnikov)?;
    if !report.pass {
        return Err(Error::Hypothesis(report.summary()));
    }
    let kappa = cfg.kappa.unwrap_or_else(|| fit_kappa(&tables));

    let mut plan = StepPlan {
        step: i,
        h,
        kappa,
        tori: Vec::new(),
        links: Vec::new(),
        failure: None,
    };

    // seed data for the two jumps from the survey
    let best_periodic = tables
        .periodic
        .iter()
        .max_by(|a, b| a.min_abs_eigenvalue.total_cmp(&b.min_abs_eigenvalue))
        .ok_or_else(|| Error::Hypothesis("empty periodic survey".into()))?;

    let p_from = TorusSpec::periodic(active[0], h);
    let p_data = solve_manifolds(model, p_from.clone(), active, &cfg.graph)?;
    plan.tori.push(p_from);

    let budget = |plan: &StepPlan| cfg.max_links.map(|m| plan.links.len() >= m).unwrap_or(false);

    // --- first jump: periodic orbit onto the lowest ladder torus ---
    let xa = best_periodic.x_i;
    let mut e0 = 0.8 * kappa * eps;
    let mut first: Option<(ManifoldData, ChainLink)> = None;
    let mut last_err: Option<Error> = None;
    for _ in 0..5 {
        let torus = TorusSpec::two_torus(active[0], h - e0, active[1], e0);
        let to_data = solve_manifolds(model, torus, active, &cfg.graph)?;
        let frame_of = move |w: [f64; 2]| SectionFrame::periodic(0, xa, h, w[0], w[1]);
        match find_heteroclinic(
            model,
            &p_data,
            &to_data,
            &frame_of,
            [best_periodic.t1, best_periodic.t2],
            LinkRegime::Jump,
            best_periodic.min_abs_eigenvalue,
            cfg,
        ) {
            Ok(link) => {
                first = Some((to_data, link));
                break;
            }
            Err(e) => {
                last_err = Some(e);
                e0 *= 0.5;
            }
        }
    }
    let (mut from_data, link) = match first {
        Some(v) => v,
        None => {
            plan.failure = Some(format!(
                "jump onto the ladder failed: {}",
                last_err.map(|e| e.to_string()).unwrap_or_default()
            ));
            return Ok(plan);
        }
    };
    plan.tori.push(from_data.chart.torus.clone());
    plan.links.push(link);

    // --- ladder ---
    let xb = PI; // receiving rotor pinned at its top so the transfer rate
                 // stays order one down to tiny energies
    let mut e = e0;
    let final_gap = 0.8 * kappa * eps;
    let e_top = h - final_gap;
    let scan = ladder_scan(model, i, xb, h - e, e, &cfg.melnikov)?;
    let step0 = cfg.arnold_step_factor * eps * scan_max_rate(&scan);
    let mut step = step0;
    let seed = pick_seed(&scan, step0 / eps);
    let mut w = [seed.x, seed.tau];
    let curvature = seed.curvature;
    while e < e_top - 1e-12 {
        if budget(&plan) {
            plan.failure = Some(format!("link budget exhausted at ladder energy {e:.6e}"));
            return Ok(plan);
        }
        let e_next = (e + step).min(e_top);
        let torus = TorusSpec::two_torus(active[0], h - e_next, active[1], e_next);
        let to_data = solve_manifolds(model, torus, active, &cfg.graph)?;
        let ha = h - e;
        let hb = e;
        let frame_of = move |w: [f64; 2]| SectionFrame::ladder(w[0], ha, xb, hb, w[1]);
        match find_heteroclinic(
            model,
            &from_data,
            &to_data,
            &frame_of,
            w,
            LinkRegime::Arnold,
            curvature,
            cfg,
        ) {
            Ok(link) => {
                w = {
                    let p = &link.frame;
                    [p.x[0], p.tau[2]]
                };
                plan.tori.push(to_data.chart.torus.clone());
                plan.links.push(link);
                from_data = to_data;
                e = e_next;
                step = (step * 1.3).min(step0);
            }
            Err(err) => {
                step *= 0.5;
                if step < 0.05 * step0 {
                    plan.failure = Some(format!(
                        "ladder stalled at energy {e:.6e}: {err}"
                    ));
                    return Ok(plan);
                }
            }
        }
    }

    if budget(&plan) {
        plan.failure = Some("link budget exhausted before the final jump".into());
        return Ok(plan);
    }

    // --- final jump: top ladder torus onto the next periodic orbit ---
    let p_to = TorusSpec::periodic(active[1], h);
    let p_to_data = solve_manifolds(model, p_to, active, &cfg.graph)?;
    let mut done = false;
    let mut last_err: Option<Error> = None;
    for _ in 0..4 {
        let mut solved = Err(Error::Hypothesis("no seed".into()));
        for k in 0..4 {
            let xb = best_periodic.x_i + 0.5 * PI * k as f64;
            let Ok(cp) = periodic_critical_point_slot(model, i, 1, xb, h, &cfg.melnikov)
            else {
                continue;
            };
            let frame_of = move |w: [f64; 2]| SectionFrame::periodic(1, xb, h, w[0], w[1]);
            solved = find_heteroclinic(
                model,
                &from_data,
                &p_to_data,
                &frame_of,
                [cp.t1, cp.t2],
                LinkRegime::Jump,
                cp.min_abs_eigenvalue,
                cfg,
            );
            if solved.is_ok() {
                break;
            }
        }
        match solved {
            Ok(link) => {
                plan.tori.push(p_to_data.chart.torus.clone());
                plan.links.push(link);
                done = true;
                break;
            }
            Err(err) => {
                last_err = Some(err);
                // climb closer to the top and retry with a smaller gap
                let gap = (h - e) * 0.5;
                let e_next = h - gap;
                if budget(&plan) {
                    plan.failure = Some("link budget exhausted before the final jump".into());
                    return Ok(plan);
                }
                let torus = TorusSpec::two_torus(active[0], h - e_next, active[1], e_next);
                let to_data = solve_manifolds(model, torus, active, &cfg.graph)?;
                let ha = h - e;
                let hb = e;
                let frame_of = move |w: [f64; 2]| SectionFrame::ladder(w[0], ha, xb, hb, w[1]);
                match find_heteroclinic(
                    model,
                    &from_data,
                    &to_data,
                    &frame_of,
                    w,
                    LinkRegime::Arnold,
                    curvature,
                    cfg,
                ) {
                    Ok(link) => {
                        w = [link.frame.x[0], link.frame.tau[2]];
                        plan.tori.push(to_data.chart.torus.clone());
                        plan.links.push(link);
                        from_data = to_data;
                        e = e_next;
                    }
                    Err(err2) => {
                        plan.failure = Some(format!(
                            "final approach stalled at energy {e:.6e}: {err2}"
                        ));
                        return Ok(plan);
                    }
                }
            }
        }
    }
    if !done && plan.failure.is_none() {
        plan.failure = Some(format!(
            "jump off the ladder failed: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    Ok(plan)
}

/// Build the transition chain across every step of the model's path. At
/// `eps = 0` the manifolds coincide and there is nothing to connect: the
/// plan is empty.
pub fn build_chain(model: &LatticeModel, h: f64, cfg: &ChainConfig) -> Result<ChainPlan> {
    let eps = model.eps;
    let mut plan = ChainPlan {
        h,
        eps,
        steps: Vec::new(),
    };
    if eps == 0.0 {
        return Ok(plan);
    }
    let n_steps = model.path.sites.len().saturating_sub(2);
    for i in 0..n_steps {
        let step = build_step_chain(model, i, h, cfg)?;
        let partial = step.failure.is_some();
        plan.steps.push(step);
        if partial {
            break;
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{DecayFunction, SiteWindow};
    use crate::lattice::{PathSpec, PerturbationSpec};
    use crate::melnikov::{periodic_critical_point, periodic_melnikov_function};

    fn model_with(eps: f64) -> LatticeModel {
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

    fn block(model: &LatticeModel) -> [Site; 3] {
        let p = &model.path.sites;
        [p[0], p[1], p[2]]
    }

    #[test]
    fn frame_geometry_is_transverse_and_energy_consistent() {
        let fr = SectionFrame::periodic(0, 0.7, 1.0, 0.4, -0.3).unwrap();
        assert_eq!(fr.measured, [1, 2]);
        assert!((fr.total_energy() - 1.0).abs() < 1e-14);
        assert!(fr.transversality() > 1.0);
        // base slot 1 sits on the pulse at phase 0.4
        let st = separatrix(0.4);
        assert!((fr.base[2] - st.q).abs() < 1e-14);
        assert!((fr.base[3] - st.p).abs() < 1e-14);
        // normals are the energy gradients of the measured slots
        assert!((fr.normals[0][2] + st.q.sin()).abs() < 1e-14);
        assert!((fr.normals[0][3] - st.p).abs() < 1e-14);

        let fl = SectionFrame::ladder(0.3, 0.6, PI, 0.4, 0.2).unwrap();
        assert_eq!(fl.measured, [1, 2]);
        assert!((fl.total_energy() - 1.0).abs() < 1e-14);
        // round trip through serialized parameters
        let rebuilt = SectionFrame::from_params(&fl.params()).unwrap();
        for j in 0..6 {
            assert!((rebuilt.base[j] - fl.base[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn unperturbed_crossings_land_on_the_base_point() {
        let model = model_with(0.0);
        let cfg = ChainConfig::default();
        let data = solve_manifolds(
            &model,
            TorusSpec::periodic(model.path.sites[0], 1.0),
            block(&model),
            &cfg.graph,
        )
        .unwrap();
        let fr = SectionFrame::periodic(0, 0.7, 1.0, 0.4, -0.3).unwrap();
        for side in [Side::Unstable, Side::Stable] {
            let pt = manifold_to_section(&data.chart, data.graph(side), &fr, &cfg, None).unwrap();
            assert!(pt.residual < 1e-10, "residual {:.3e}", pt.residual);
            for j in 0..6 {
                assert!(
                    (pt.state[j] - fr.base[j]).abs() < 1e-7,
                    "side {side:?} coordinate {j} off by {:.3e}",
                    (pt.state[j] - fr.base[j]).abs()
                );
            }
            for c in pt.coords {
                assert!(c.abs() < 1e-7, "normal component {c:.3e}");
            }
            assert!(pt.energy_defect < 1e-9);
        }
    }

    #[test]
    fn splitting_gap_matches_the_melnikov_rate() {
        // homoclinic gap of the periodic orbit, measured at a fixed frame
        // and extrapolated in eps, against the independent splitting
        // integrals
        let h = 1.0;
        let x = 0.7;
        let (t1, t2) = (0.4, -0.3);
        let cfg = ChainConfig::default();
        let mel = MelnikovConfig::default();
        let m1 = periodic_melnikov_function(&model_with(0.0), 0, 1, x, h, t1, t2, &mel)
            .unwrap()
            .value;
        let m2 = periodic_melnikov_function(&model_with(0.0), 0, 2, x, h, t1, t2, &mel)
            .unwrap()
            .value;
        let gap = |eps: f64| -> [f64; 2] {
            let model = model_with(eps);
            let data = solve_manifolds(
                &model,
                TorusSpec::periodic(model.path.sites[0], h),
                block(&model),
                &cfg.graph,
            )
            .unwrap();
            let fr = SectionFrame::periodic(0, x, h, t1, t2).unwrap();
            let zu = manifold_to_section(&data.chart, &data.unstable, &fr, &cfg, None).unwrap();
            let zs = manifold_to_section(&data.chart, &data.stable, &fr, &cfg, None).unwrap();
            splitting_distance(&fr, &zu, &zs)
        };
        let e1 = 1e-4;
        let d1 = gap(e1);
        let d2 = gap(2.0 * e1);
        for (k, m) in [m1, m2].iter().enumerate() {
            let extrap = 2.0 * d1[k] / e1 - d2[k] / (2.0 * e1);
            assert!(
                (extrap + m).abs() < 0.01 * m.abs(),
                "slot {k}: extrapolated rate {extrap:.6e} vs splitting integral {m:.6e}"
            );
        }
    }

    #[test]
    fn jump_link_is_found_and_certified() {
        let eps = 2e-3;
        let model = model_with(eps);
        let h = 1.0;
        let cfg = ChainConfig::default();
        let x = 0.7;
        let cp = periodic_critical_point(&model, 0, x, h, &cfg.melnikov).unwrap();
        let e0 = 0.8 * 0.25 * eps;
        let from = solve_manifolds(
            &model,
            TorusSpec::periodic(model.path.sites[0], h),
            block(&model),
            &cfg.graph,
        )
        .unwrap();
        let to = solve_manifolds(
            &model,
            TorusSpec::two_torus(model.path.sites[0], h - e0, model.path.sites[1], e0),
            block(&model),
            &cfg.graph,
        )
        .unwrap();
        let frame_of = move |w: [f64; 2]| SectionFrame::periodic(0, x, h, w[0], w[1]);
        let link = find_heteroclinic(
            &model,
            &from,
            &to,
            &frame_of,
            [cp.t1, cp.t2],
            LinkRegime::Jump,
            cp.min_abs_eigenvalue,
            &cfg,
        )
        .unwrap();
        assert!(link.residual < 1e-10);
        assert!(link.restricted_min_sv >= link.restricted_floor);
        assert!(link.energy_defect < 1e-9);
        assert!(link.offpath_factor < 100.0, "offpath factor {}", link.offpath_factor);
        assert!(link.flow_kernel_ratio < 1e-2, "kernel ratio {}", link.flow_kernel_ratio);
        assert!(link.flow_angle < 1e-2, "flow angle {}", link.flow_angle);
        assert!(link.span_conditioning > 1e-6);
        assert!(link.grad_h_overlap < 1e-4, "grad H overlap {}", link.grad_h_overlap);
    }

    #[test]
    fn ladder_rung_transfers_energy_upward() {
        let eps = 2e-3;
        let model = model_with(eps);
        let h = 1.0;
        let cfg = ChainConfig::default();
        let e = 0.3;
        let scan = ladder_scan(&model, 0, PI, h - e, e, &cfg.melnikov).unwrap();
        let step = cfg.arnold_step_factor * eps * scan_max_rate(&scan);
        let seed = pick_seed(&scan, step / eps);
        let from = solve_manifolds(
            &model,
            TorusSpec::two_torus(model.path.sites[0], h - e, model.path.sites[1], e),
            block(&model),
            &cfg.graph,
        )
        .unwrap();
        let to = solve_manifolds(
            &model,
            TorusSpec::two_torus(
                model.path.sites[0],
                h - e - step,
                model.path.sites[1],
                e + step,
            ),
            block(&model),
            &cfg.graph,
        )
        .unwrap();
        let frame_of = move |w: [f64; 2]| SectionFrame::ladder(w[0], h - e, PI, e, w[1]);
        let link = find_heteroclinic(
            &model,
            &from,
            &to,
            &frame_of,
            [seed.x, seed.tau],
            LinkRegime::Arnold,
            seed.curvature,
            &cfg,
        )
        .unwrap();
        assert!(link.residual < 1e-10);
        assert!(link.restricted_min_sv >= link.restricted_floor);
        assert!(link.to.energies[1] > link.from.energies[1]);
        assert!(link.energy_defect < 1e-9);
    }

    #[test]
    fn truncated_plan_is_partial_and_serializable() {
        let eps = 2e-3;
        let model = model_with(eps);
        let mut cfg = ChainConfig::default();
        cfg.melnikov.grid_x = 4;
        cfg.melnikov.grid_h = 2;
        cfg.kappa = Some(0.25);
        cfg.max_links = Some(3);
        let plan = build_step_chain(&model, 0, 1.0, &cfg).unwrap();
        assert_eq!(plan.links.len(), 3);
        assert!(plan.failure.as_deref().unwrap_or("").contains("budget"));
        assert_eq!(plan.links[0].regime, LinkRegime::Jump);
        for l in &plan.links[1..] {
            assert_eq!(l.regime, LinkRegime::Arnold);
        }
        for pair in plan.links.windows(2) {
            assert!(pair[1].to.energies[1] > pair[0].to.energies[1]);
        }
        let full = ChainPlan {
            h: 1.0,
            eps,
            steps: vec![plan],
        };
        let round = ChainPlan::from_json(&full.to_json().unwrap()).unwrap();
        assert_eq!(round.n_links(), full.n_links());
        assert_eq!(round.steps[0].tori.len(), full.steps[0].tori.len());
    }

    #[test]
    fn zero_coupling_gives_an_empty_plan() {
        let model = model_with(0.0);
        let plan = build_chain(&model, 1.0, &ChainConfig::default()).unwrap();
        assert!(plan.steps.is_empty());
        assert_eq!(plan.n_links(), 0);
    }
}

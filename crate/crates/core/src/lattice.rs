//! The truncated lattice Hamiltonian `H = sum_j E_j + eps*H1` with a
//! product-form coupling family: per-site energies, analytic gradients and
//! Hessian actions of `H1`, the subspace-invariance check, and restrictions
//! of `H1` to three consecutive path sites.

use crate::decay::{DecayFunction, Site, SiteWindow};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Order-2 jet in one variable: value, first and second derivative.
#[derive(Clone, Copy, Debug)]
struct Jet {
    v: f64,
    d: f64,
    dd: f64,
}

impl Jet {
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d: self.v * o.d + self.d * o.v,
            dd: self.v * o.dd + 2.0 * self.d * o.d + self.dd * o.v,
        }
    }

    fn powi(self, n: u32) -> Jet {
        let mut out = Jet {
            v: 1.0,
            d: 0.0,
            dd: 0.0,
        };
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }
}

fn jet_one_minus_cos(q: f64) -> Jet {
    Jet {
        v: 1.0 - q.cos(),
        d: q.sin(),
        dd: q.cos(),
    }
}

fn jet_sin(q: f64) -> Jet {
    Jet {
        v: q.sin(),
        d: q.cos(),
        dd: -q.sin(),
    }
}

/// One per-site factor of a product term:
/// `(1 - cos q)^cos_power * sin(q)^sin_power * p^p_power`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SiteFactor {
    pub cos_power: u32,
    pub sin_power: u32,
    pub p_power: u32,
}

/// All partial derivatives of a factor up to second order at one site.
#[derive(Clone, Copy, Debug, Default)]
pub struct FactorJet {
    pub v: f64,
    pub dq: f64,
    pub dp: f64,
    pub dqq: f64,
    pub dqp: f64,
    pub dpp: f64,
}

impl SiteFactor {
    pub fn eval(&self, q: f64, p: f64) -> FactorJet {
        let u = jet_one_minus_cos(q)
            .powi(self.cos_power)
            .mul(jet_sin(q).powi(self.sin_power));
        let b = self.p_power;
        let pb = p.powi(b as i32);
        let pb1 = if b >= 1 {
            b as f64 * p.powi(b as i32 - 1)
        } else {
            0.0
        };
        let pb2 = if b >= 2 {
            (b * (b - 1)) as f64 * p.powi(b as i32 - 2)
        } else {
            0.0
        };
        FactorJet {
            v: u.v * pb,
            dq: u.d * pb,
            dp: u.v * pb1,
            dqq: u.dd * pb,
            dqp: u.d * pb1,
            dpp: u.v * pb2,
        }
    }

    /// True when the gradient of the factor vanishes at `(q, p) = (0, 0)`
    /// whatever the other sites do — the per-factor form of the
    /// subspace-invariance condition.
    pub fn gradient_vanishes_at_origin(&self) -> bool {
        let j = self.eval(0.0, 0.0);
        j.dq == 0.0 && j.dp == 0.0
    }
}

/// A translation-invariant family of product terms: at every admissible base
/// site `j` the family contributes
/// `coeff * prod_k factor_k(q_{j+offset_k}, p_{j+offset_k})`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TermFamily {
    pub coeff: f64,
    pub offsets: Vec<Site>,
    pub factors: Vec<SiteFactor>,
}

impl TermFamily {
    /// Term range `N`: 1-norm diameter of the touched offsets.
    pub fn range(&self) -> i64 {
        self.offsets
            .iter()
            .flat_map(|a| self.offsets.iter().map(move |b| a.sub(b).norm1()))
            .max()
            .unwrap_or(0)
    }
}

/// The coupling `H1` as a list of term families.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PerturbationSpec {
    pub families: Vec<TermFamily>,
}

impl PerturbationSpec {
    /// The default m=1 instance:
    /// `H1 = a2 sum_k (1-cos q_k)(1-cos q_{k+1})(1-cos q_{k+2})
    ///     + a3*c sum_k sin(q_k)(1-cos q_k)(1-cos q_{k+1})(1-cos q_{k+2})(1-cos q_{k+3})`.
    pub fn default_family(a2: f64, a3: f64, c: f64) -> Self {
        let plain = SiteFactor {
            cos_power: 1,
            sin_power: 0,
            p_power: 0,
        };
        let mut families = vec![TermFamily {
            coeff: a2,
            offsets: (0..3).map(Site::new_1d).collect(),
            factors: vec![plain; 3],
        }];
        if a3 != 0.0 && c != 0.0 {
            let mut factors = vec![plain; 4];
            factors[0].sin_power = 1;
            families.push(TermFamily {
                coeff: a3 * c,
                offsets: (0..4).map(Site::new_1d).collect(),
                factors,
            });
        }
        PerturbationSpec { families }
    }

    /// Check `|a_N| <= bound_c * Gamma(N)` for every family.
    pub fn check_coefficient_decay(&self, gamma: &DecayFunction, bound_c: f64) -> Result<()> {
        for (idx, fam) in self.families.iter().enumerate() {
            let n = fam.range();
            let cap = bound_c * gamma.value_1d(n);
            if fam.coeff.abs() > cap {
                return Err(Error::ModelRejected(format!(
                    "family {idx}: |a_N| = {} exceeds C*Gamma({n}) = {cap}",
                    fam.coeff.abs()
                )));
            }
        }
        Ok(())
    }
}

/// A nearest-neighbor path of sites along which energy is transferred.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PathSpec {
    pub sites: Vec<Site>,
}

impl PathSpec {
    pub fn line_1d(start: i64, len: usize) -> Self {
        PathSpec {
            sites: (0..len as i64).map(|k| Site::new_1d(start + k)).collect(),
        }
    }

    pub fn validate(&self, window: &SiteWindow, margin: i64) -> Result<()> {
        if self.sites.len() < 2 {
            return Err(Error::Config("path needs at least two sites".into()));
        }
        for pair in self.sites.windows(2) {
            if pair[1].sub(&pair[0]).norm1() != 1 {
                return Err(Error::Config(format!(
                    "path step {:?} -> {:?} is not nearest-neighbor",
                    pair[0], pair[1]
                )));
            }
        }
        for s in &self.sites {
            if !window.contains(*s) {
                return Err(Error::Config(format!("path site {s:?} outside window")));
            }
            if window.margin_of(*s) < margin {
                return Err(Error::Config(format!(
                    "path site {s:?} closer than {margin} to the window boundary"
                )));
            }
        }
        Ok(())
    }
}

/// One concrete term of `H1` on the window: the family factors attached to
/// window indices.
#[derive(Clone, Debug)]
struct TermInstance {
    family: usize,
    site_indices: Vec<usize>,
}

/// Phase-space state over the window, site-major `q`/`p` arrays aligned with
/// the window index map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl LatticeState {
    pub fn zeros(n: usize) -> Self {
        LatticeState {
            q: vec![0.0; n],
            p: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `E_k = p_k^2/2 + cos q_k - 1`.
    pub fn site_energy(&self, k: usize) -> f64 {
        crate::pendulum::energy(self.q[k], self.p[k])
    }

    pub fn energy_profile(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.site_energy(k)).collect()
    }

    /// Weighted sup norm `sup_k max(|q_k|, |p_k|) Gamma(k - anchor)^{-1}`.
    pub fn decay_norm(&self, window: &SiteWindow, anchor: Site, gamma: &DecayFunction) -> f64 {
        let mut sup = 0.0f64;
        for k in 0..self.len() {
            let mag = self.q[k].abs().max(self.p[k].abs());
            sup = sup.max(mag / gamma.value(window.site(k).sub(&anchor)));
        }
        sup
    }

    /// Maximum of `max(|q_k|, |p_k|)` over a set of window indices.
    pub fn support_leak(&self, off_indices: &[usize]) -> f64 {
        off_indices
            .iter()
            .map(|&k| self.q[k].abs().max(self.p[k].abs()))
            .fold(0.0, f64::max)
    }
}

/// The lattice model: window, decay function, coupling strength, coupling
/// family, and the transfer path. Construction runs the symbolic per-factor
/// subspace-invariance check and rejects violating families.
#[derive(Clone, Debug)]
pub struct LatticeModel {
    pub window: Arc<SiteWindow>,
    pub gamma: DecayFunction,
    pub eps: f64,
    pub perturbation: PerturbationSpec,
    pub path: PathSpec,
    instances: Vec<TermInstance>,
}

impl LatticeModel {
    pub fn new(
        window: Arc<SiteWindow>,
        gamma: DecayFunction,
        eps: f64,
        perturbation: PerturbationSpec,
        path: PathSpec,
    ) -> Result<Self> {
        if eps < 0.0 {
            return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
        }
        // symbolic invariance check: every factor's gradient must vanish at
        // the origin of its site
        for (fi, fam) in perturbation.families.iter().enumerate() {
            if fam.offsets.len() != fam.factors.len() {
                return Err(Error::Config(format!(
                    "family {fi}: {} offsets but {} factors",
                    fam.offsets.len(),
                    fam.factors.len()
                )));
            }
            for (k, f) in fam.factors.iter().enumerate() {
                if !f.gradient_vanishes_at_origin() {
                    return Err(Error::ModelRejected(format!(
                        "family {fi}, factor {k} ({f:?}): gradient does not vanish at (q,p)=(0,0); \
                         subspace invariance fails"
                    )));
                }
            }
        }
        // instantiate translation-invariant families over the window
        let mut instances = Vec::new();
        for (fi, fam) in perturbation.families.iter().enumerate() {
            for base in window.sites() {
                let idx: Option<Vec<usize>> = fam
                    .offsets
                    .iter()
                    .map(|o| window.index_of(base.add(o)))
                    .collect();
                if let Some(site_indices) = idx {
                    instances.push(TermInstance {
                        family: fi,
                        site_indices,
                    });
                }
            }
        }
        path.validate(&window, 0)?;
        Ok(LatticeModel {
            window,
            gamma,
            eps,
            perturbation,
            path,
            instances,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.window.len()
    }

    /// Total energy `sum_k E_k + eps * H1`.
    pub fn hamiltonian(&self, s: &LatticeState) -> f64 {
        let kinetic: f64 = (0..s.len()).map(|k| s.site_energy(k)).sum();
        kinetic + self.eps * self.h1(s)
    }

    /// The coupling `H1` (no `eps` factor).
    pub fn h1(&self, s: &LatticeState) -> f64 {
        let mut total = 0.0;
        for inst in &self.instances {
            let fam = &self.perturbation.families[inst.family];
            let mut prod = fam.coeff;
            for (f, &k) in fam.factors.iter().zip(&inst.site_indices) {
                prod *= f.eval(s.q[k], s.p[k]).v;
                if prod == 0.0 {
                    break;
                }
            }
            total += prod;
        }
        total
    }

    /// Analytic gradient of `H1`: `(dH1/dq_k, dH1/dp_k)` per window index.
    pub fn grad_h1(&self, s: &LatticeState) -> (Vec<f64>, Vec<f64>) {
        let n = s.len();
        let mut gq = vec![0.0; n];
        let mut gp = vec![0.0; n];
        let mut jets: Vec<FactorJet> = Vec::with_capacity(4);
        for inst in &self.instances {
            let fam = &self.perturbation.families[inst.family];
            jets.clear();
            for (f, &k) in fam.factors.iter().zip(&inst.site_indices) {
                jets.push(f.eval(s.q[k], s.p[k]));
            }
            for (a, &k) in inst.site_indices.iter().enumerate().map(|(a, k)| (a, k)) {
                let mut rest = fam.coeff;
                for (b, j) in jets.iter().enumerate() {
                    if b != a {
                        rest *= j.v;
                    }
                }
                if rest != 0.0 {
                    gq[k] += rest * jets[a].dq;
                    gp[k] += rest * jets[a].dp;
                }
            }
        }
        (gq, gp)
    }

    /// Hamiltonian vector field: `dq_k/dt = p_k + eps dH1/dp_k`,
    /// `dp_k/dt = sin q_k - eps dH1/dq_k`.
    pub fn vector_field(&self, s: &LatticeState) -> LatticeState {
        let (gq, gp) = self.grad_h1(s);
        let n = s.len();
        let mut out = LatticeState::zeros(n);
        for k in 0..n {
            out.q[k] = s.p[k] + self.eps * gp[k];
            out.p[k] = s.q[k].sin() - self.eps * gq[k];
        }
        out
    }

    /// Action of the Hessian of `H1` on a tangent `(dq, dp)`: returns the
    /// directional derivative of `grad_h1`.
    pub fn hessian_h1_action(
        &self,
        s: &LatticeState,
        dq: &[f64],
        dp: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let n = s.len();
        let mut hq = vec![0.0; n];
        let mut hp = vec![0.0; n];
        let mut jets: Vec<FactorJet> = Vec::with_capacity(4);
        for inst in &self.instances {
            let fam = &self.perturbation.families[inst.family];
            jets.clear();
            for (f, &k) in fam.factors.iter().zip(&inst.site_indices) {
                jets.push(f.eval(s.q[k], s.p[k]));
            }
            let m = jets.len();
            for a in 0..m {
                let ka = inst.site_indices[a];
                // diagonal block: second derivatives of factor a
                let mut rest = fam.coeff;
                for (b, j) in jets.iter().enumerate() {
                    if b != a {
                        rest *= j.v;
                    }
                }
                hq[ka] += rest * (jets[a].dqq * dq[ka] + jets[a].dqp * dp[ka]);
                hp[ka] += rest * (jets[a].dqp * dq[ka] + jets[a].dpp * dp[ka]);
                // cross blocks: first derivative of a times first of b
                for b in 0..m {
                    if b == a {
                        continue;
                    }
                    let kb = inst.site_indices[b];
                    let mut rest2 = fam.coeff;
                    for (c, j) in jets.iter().enumerate() {
                        if c != a && c != b {
                            rest2 *= j.v;
                        }
                    }
                    let dir_b = jets[b].dq * dq[kb] + jets[b].dp * dp[kb];
                    hq[ka] += rest2 * jets[a].dq * dir_b;
                    hp[ka] += rest2 * jets[a].dp * dir_b;
                }
            }
        }
        (hq, hp)
    }

    /// Linearized vector field at `s` applied to a tangent `(dq, dp)`.
    pub fn tangent_field(&self, s: &LatticeState, dq: &[f64], dp: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (hq, hp) = self.hessian_h1_action(s, dq, dp);
        let n = s.len();
        let mut out_q = vec![0.0; n];
        let mut out_p = vec![0.0; n];
        for k in 0..n {
            out_q[k] = dp[k] + self.eps * hp[k];
            out_p[k] = s.q[k].cos() * dq[k] - self.eps * hq[k];
        }
        (out_q, out_p)
    }

    /// Window indices of the path sites.
    pub fn path_indices(&self) -> Vec<usize> {
        self.path
            .sites
            .iter()
            .map(|s| self.window.index_of(*s).expect("path validated in window"))
            .collect()
    }

    /// Sampled verification of subspace invariance: gradients at frozen
    /// origin sites and at path-pair supports must vanish. Returns the worst
    /// violations `(frozen_site, pair_support)`.
    pub fn check_h2(&self, samples: usize, seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_sites();
        let mut worst_frozen = 0.0f64;
        for _ in 0..samples {
            let mut s = LatticeState::zeros(n);
            for k in 0..n {
                s.q[k] = rng.gen::<f64>() * 6.0 - 3.0;
                s.p[k] = rng.gen::<f64>() * 4.0 - 2.0;
            }
            let frozen = rng.gen_range(0..n);
            s.q[frozen] = 0.0;
            s.p[frozen] = 0.0;
            let (gq, gp) = self.grad_h1(&s);
            worst_frozen = worst_frozen.max(gq[frozen].abs()).max(gp[frozen].abs());
        }
        let mut worst_pair = 0.0f64;
        for i in 0..self.path.sites.len() - 1 {
            let ia = self.window.index_of(self.path.sites[i]).unwrap();
            let ib = self.window.index_of(self.path.sites[i + 1]).unwrap();
            for _ in 0..samples {
                let mut s = LatticeState::zeros(n);
                for &k in &[ia, ib] {
                    s.q[k] = rng.gen::<f64>() * 6.0 - 3.0;
                    s.p[k] = rng.gen::<f64>() * 4.0 - 2.0;
                }
                let (gq, gp) = self.grad_h1(&s);
                for &k in &[ia, ib] {
                    worst_pair = worst_pair.max(gq[k].abs()).max(gp[k].abs());
                }
            }
        }
        if worst_frozen > 1e-12 || worst_pair > 1e-12 {
            return Err(Error::ModelRejected(format!(
                "subspace-invariance violations: frozen-site gradient {worst_frozen:.3e}, \
                 path-pair gradient {worst_pair:.3e}"
            )));
        }
        Ok((worst_frozen, worst_pair))
    }

    /// `H1` restricted to the three consecutive path sites of step `i`
    /// (all other sites frozen at the origin).
    pub fn restricted_h1(&self, i: usize) -> Result<RestrictedH1> {
        if i + 2 >= self.path.sites.len() {
            return Err(Error::Domain(format!(
                "path step {i} needs sites sigma_i..sigma_i+2"
            )));
        }
        let triple = [
            self.path.sites[i],
            self.path.sites[i + 1],
            self.path.sites[i + 2],
        ];
        let mut terms = Vec::new();
        for fam in &self.perturbation.families {
            if fam.coeff == 0.0 {
                continue;
            }
            for base in self.window.sites() {
                let local: Option<Vec<usize>> = fam
                    .offsets
                    .iter()
                    .map(|o| triple.iter().position(|t| *t == base.add(o)))
                    .collect();
                if let Some(local) = local {
                    terms.push(RestrictedTerm {
                        coeff: fam.coeff,
                        local_sites: local,
                        factors: fam.factors.clone(),
                    });
                }
            }
        }
        Ok(RestrictedH1 { terms })
    }
}

#[derive(Clone, Debug)]
struct RestrictedTerm {
    coeff: f64,
    /// Index (0..3) into the site triple for each factor.
    local_sites: Vec<usize>,
    factors: Vec<SiteFactor>,
}

/// `H1` restricted to the invariant subspace of three consecutive path sites,
/// as a callable on `(q_0, p_0, q_1, p_1, q_2, p_2)`.
#[derive(Clone, Debug)]
pub struct RestrictedH1 {
    terms: Vec<RestrictedTerm>,
}

impl RestrictedH1 {
    pub fn eval(&self, q: &[f64; 3], p: &[f64; 3]) -> f64 {
        let mut total = 0.0;
        for t in &self.terms {
            let mut prod = t.coeff;
            for (f, &k) in t.factors.iter().zip(&t.local_sites) {
                prod *= f.eval(q[k], p[k]).v;
                if prod == 0.0 {
                    break;
                }
            }
            total += prod;
        }
        total
    }

    /// Gradient with respect to the six restricted coordinates.
    pub fn grad(&self, q: &[f64; 3], p: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
        let mut gq = [0.0; 3];
        let mut gp = [0.0; 3];
        for t in &self.terms {
            let jets: Vec<FactorJet> = t
                .factors
                .iter()
                .zip(&t.local_sites)
                .map(|(f, &k)| f.eval(q[k], p[k]))
                .collect();
            for (a, &k) in t.local_sites.iter().enumerate() {
                let mut rest = t.coeff;
                for (b, j) in jets.iter().enumerate() {
                    if b != a {
                        rest *= j.v;
                    }
                }
                gq[k] += rest * jets[a].dq;
                gp[k] += rest * jets[a].dp;
            }
        }
        (gq, gp)
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Exponential-decay data for improper integrals along homoclinic frames:
    /// slots flagged in `sep_slot` carry separatrix factors whose building
    /// blocks obey `1 - cos q_0(s) <= 8 e^{-2|s|}`, `|sin q_0(s)| <= 4
    /// e^{-|s|}`, `|p_0(s)| <= 4 e^{-|s|}`, while rotation-slot factors are
    /// bounded using `|p| <= p_bound`. Returns `(c, rate)` such that the sum
    /// over terms of the integrand beyond `|s| = T` is bounded by `c *
    /// exp(-rate * T)`; `rate` is the slowest per-term decay. A term with no
    /// decaying factor makes the improper integral ill-defined and is
    /// rejected.
    pub fn tail_decay(&self, sep_slot: &[bool; 3], p_bound: f64) -> Result<(f64, f64)> {
        let mut c_total = 0.0f64;
        let mut rate_min = f64::INFINITY;
        for t in &self.terms {
            let mut rate = 0.0f64;
            let mut c = t.coeff.abs();
            for (f, &k) in t.factors.iter().zip(&t.local_sites) {
                if sep_slot[k] {
                    rate += (2 * f.cos_power + f.sin_power + f.p_power) as f64;
                    c *= 8.0f64.powi(f.cos_power as i32)
                        * 4.0f64.powi((f.sin_power + f.p_power) as i32);
                } else {
                    c *= 2.0f64.powi(f.cos_power as i32)
                        * p_bound.max(1.0).powi(f.p_power as i32);
                }
            }
            if rate == 0.0 && c != 0.0 {
                return Err(Error::Domain(
                    "integrand term has no separatrix factor; improper integral diverges"
                        .to_string(),
                ));
            }
            c_total += c;
            rate_min = rate_min.min(rate);
        }
        if self.terms.is_empty() {
            return Ok((0.0, 1.0));
        }
        Ok((c_total, rate_min))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn random_state(m: &LatticeModel, seed: u64) -> LatticeState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m.n_sites();
        let mut s = LatticeState::zeros(n);
        for k in 0..n {
            s.q[k] = rng.gen::<f64>() * 6.0 - 3.0;
            s.p[k] = rng.gen::<f64>() * 4.0 - 2.0;
        }
        s
    }

    #[test]
    fn site_energy_cases() {
        let mut s = LatticeState::zeros(3);
        assert_eq!(s.site_energy(0), 0.0);
        s.q[1] = std::f64::consts::PI;
        assert!((s.site_energy(1) + 2.0).abs() < 1e-15);
        s.p[1] = 2.0;
        assert!(s.site_energy(1).abs() < 1e-15);
    }

    #[test]
    fn vector_field_uncoupled_and_origin() {
        let m = model(0.0);
        let s = random_state(&m, 1);
        let f = m.vector_field(&s);
        for k in 0..m.n_sites() {
            assert_eq!(f.q[k], s.p[k]);
            assert_eq!(f.p[k], s.q[k].sin());
        }
        let m2 = model(0.01);
        let z = LatticeState::zeros(m2.n_sites());
        let f0 = m2.vector_field(&z);
        assert!(f0.q.iter().chain(&f0.p).all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(0.01);
        let s = random_state(&m, 2);
        let (gq, gp) = m.grad_h1(&s);
        let h = 1e-6;
        for k in 0..m.n_sites() {
            let mut sp = s.clone();
            sp.q[k] += h;
            let mut sm = s.clone();
            sm.q[k] -= h;
            let fd = (m.h1(&sp) - m.h1(&sm)) / (2.0 * h);
            assert!((fd - gq[k]).abs() < 1e-7, "dq at {k}");
            let mut sp = s.clone();
            sp.p[k] += h;
            let mut sm = s.clone();
            sm.p[k] -= h;
            let fd = (m.h1(&sp) - m.h1(&sm)) / (2.0 * h);
            assert!((fd - gp[k]).abs() < 1e-7, "dp at {k}");
        }
    }

    #[test]
    fn hessian_action_matches_finite_differences() {
        let m = model(0.01);
        let s = random_state(&m, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = m.n_sites();
        let dq: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let dp: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (hq, hp) = m.hessian_h1_action(&s, &dq, &dp);
        let h = 1e-6;
        let mut sp = s.clone();
        let mut sm = s.clone();
        for k in 0..n {
            sp.q[k] += h * dq[k];
            sp.p[k] += h * dp[k];
            sm.q[k] -= h * dq[k];
            sm.p[k] -= h * dp[k];
        }
        let (gqp, gpp) = m.grad_h1(&sp);
        let (gqm, gpm) = m.grad_h1(&sm);
        for k in 0..n {
            assert!(((gqp[k] - gqm[k]) / (2.0 * h) - hq[k]).abs() < 1e-6);
            assert!(((gpp[k] - gpm[k]) / (2.0 * h) - hp[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn h2_sampled_check_passes_and_is_eps_free() {
        let m = model(0.0);
        let (a, b) = m.check_h2(50, 11).unwrap();
        assert!(a <= 1e-12 && b <= 1e-12);
        let m2 = model(0.5);
        let (a2, b2) = m2.check_h2(50, 11).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn violating_term_rejected() {
        // a factor with p_power = 1 and nothing else has nonzero dp at the
        // origin; construction must reject it
        let window = Arc::new(SiteWindow::interval(-2, 4));
        let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
        let bad = PerturbationSpec {
            families: vec![TermFamily {
                coeff: 1.0,
                offsets: vec![Site::new_1d(0), Site::new_1d(1)],
                factors: vec![
                    SiteFactor {
                        cos_power: 0,
                        sin_power: 0,
                        p_power: 1,
                    },
                    SiteFactor {
                        cos_power: 1,
                        sin_power: 0,
                        p_power: 0,
                    },
                ],
            }],
        };
        let err = LatticeModel::new(window, gamma, 0.01, bad, PathSpec::line_1d(0, 2));
        assert!(matches!(err, Err(Error::ModelRejected(_))));
    }

    #[test]
    fn restricted_h1_matches_full() {
        let m = model(0.01);
        let r = m.restricted_h1(0).unwrap();
        assert_eq!(r.eval(&[0.0; 3], &[0.0; 3]), 0.0);
        let idx = m.path_indices();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut q3 = [0.0; 3];
            let mut p3 = [0.0; 3];
            for k in 0..3 {
                q3[k] = rng.gen::<f64>() * 6.0 - 3.0;
                p3[k] = rng.gen::<f64>() * 4.0 - 2.0;
            }
            let mut s = LatticeState::zeros(m.n_sites());
            for k in 0..3 {
                s.q[idx[k]] = q3[k];
                s.p[idx[k]] = p3[k];
            }
            assert!((r.eval(&q3, &p3) - m.h1(&s)).abs() < 1e-14);
            // full-lattice gradient at a restricted state is supported on the
            // triple and matches the restricted gradient
            let (gq, gp) = m.grad_h1(&s);
            let (rgq, rgp) = r.grad(&q3, &p3);
            for k in 0..m.n_sites() {
                if let Some(a) = idx.iter().position(|&i| i == k) {
                    assert!((gq[k] - rgq[a]).abs() < 1e-13);
                    assert!((gp[k] - rgp[a]).abs() < 1e-13);
                } else {
                    assert!(gq[k].abs() < 1e-13 && gp[k].abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn restricted_grad_matches_finite_differences() {
        let m = model(0.01);
        let r = m.restricted_h1(0).unwrap();
        let q = [1.1, -0.7, 2.3];
        let p = [0.4, 1.2, -0.9];
        let (gq, gp) = r.grad(&q, &p);
        let h = 1e-6;
        for k in 0..3 {
            let mut qp = q;
            qp[k] += h;
            let mut qm = q;
            qm[k] -= h;
            assert!(((r.eval(&qp, &p) - r.eval(&qm, &p)) / (2.0 * h) - gq[k]).abs() < 1e-7);
            let mut pp = p;
            pp[k] += h;
            let mut pm = p;
            pm[k] -= h;
            assert!(((r.eval(&q, &pp) - r.eval(&q, &pm)) / (2.0 * h) - gp[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn translation_equivariance() {
        // shift a state one site to the right: H1 is unchanged where both
        // term windows fit
        let window = Arc::new(SiteWindow::interval(-10, 10));
        let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
        let m = LatticeModel::new(
            window.clone(),
            gamma,
            0.01,
            PerturbationSpec::default_family(1.0, 0.3, 0.5),
            PathSpec::line_1d(0, 3),
        )
        .unwrap();
        let n = m.n_sites();
        let mut s = LatticeState::zeros(n);
        // compact support well inside the window
        for (off, val) in [(0i64, 1.2), (1, -0.8), (2, 2.1)] {
            let k = window.index_of(Site::new_1d(off)).unwrap();
            s.q[k] = val;
            s.p[k] = 0.3 * val;
        }
        let mut shifted = LatticeState::zeros(n);
        for (off, val) in [(1i64, 1.2), (2, -0.8), (3, 2.1)] {
            let k = window.index_of(Site::new_1d(off)).unwrap();
            shifted.q[k] = val;
            shifted.p[k] = 0.3 * val;
        }
        assert!((m.h1(&s) - m.h1(&shifted)).abs() < 1e-14);
    }

    #[test]
    fn coefficient_decay_check() {
        let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
        let spec = PerturbationSpec::default_family(1.0, 0.3, 0.5);
        // range-2 family: Gamma(2) = 0.025; need C >= 1/0.025
        assert!(spec.check_coefficient_decay(&gamma, 41.0).is_ok());
        assert!(spec.check_coefficient_decay(&gamma, 10.0).is_err());
    }

    #[test]
    fn path_validation() {
        let window = Arc::new(SiteWindow::interval(-4, 8));
        let good = PathSpec::line_1d(0, 3);
        assert!(good.validate(&window, 2).is_ok());
        let bad = PathSpec {
            sites: vec![Site::new_1d(0), Site::new_1d(2)],
        };
        assert!(bad.validate(&window, 1).is_err());
        let tight = PathSpec::line_1d(6, 3);
        assert!(tight.validate(&window, 2).is_err());
    }
}

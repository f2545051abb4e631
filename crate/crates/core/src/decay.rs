//! Decay functions on `Z^m`, decay-weighted vector and operator norms, and the
//! operator algebra on finite lattice windows (sub-multiplicativity of the
//! gamma seminorm, Neumann inversion).

use crate::{Error, Result};
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::Arc;

/// Maximum supported lattice dimension.
pub const MAX_DIM: usize = 4;

/// A lattice site (or offset) in `Z^m`, `m <= MAX_DIM`. Unused coordinates are
/// kept at zero so sites compare and hash consistently across dimensions.
#[derive(
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    Debug,
    PartialOrd,
    Ord,
    serde::Serialize,
    serde::Deserialize,
)]
pub struct Site(pub [i64; MAX_DIM]);

impl Site {
    pub fn new_1d(i: i64) -> Self {
        let mut c = [0i64; MAX_DIM];
        c[0] = i;
        Site(c)
    }

    pub fn from_coords(coords: &[i64]) -> Self {
        let mut c = [0i64; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site(c)
    }

    /// 1-norm `|i| = sum |i_k|`.
    pub fn norm1(&self) -> i64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn sub(&self, other: &Site) -> Site {
        let mut c = [0i64; MAX_DIM];
        for k in 0..MAX_DIM {
            c[k] = self.0[k] - other.0[k];
        }
        Site(c)
    }

    pub fn add(&self, other: &Site) -> Site {
        let mut c = [0i64; MAX_DIM];
        for k in 0..MAX_DIM {
            c[k] = self.0[k] + other.0[k];
        }
        Site(c)
    }

    pub fn x(&self) -> i64 {
        self.0[0]
    }
}

/// The weight `Gamma(i) = a` for `i = 0` and `a |i|^{-alpha} e^{-beta |i|}`
/// otherwise, governing spatial decay of couplings, states and operators.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecayFunction {
    /// Lattice dimension.
    pub m: usize,
    /// Polynomial exponent, must exceed `m`.
    pub alpha: f64,
    /// Exponential rate, non-negative.
    pub beta: f64,
    /// Normalization, positive.
    pub a: f64,
}

impl DecayFunction {
    pub fn new(m: usize, alpha: f64, beta: f64, a: f64) -> Result<Self> {
        if m == 0 || m > MAX_DIM {
            return Err(Error::InvalidDecay(format!("dimension {m} out of range")));
        }
        if alpha <= m as f64 {
            return Err(Error::InvalidDecay(format!(
                "alpha = {alpha} must exceed the lattice dimension {m}"
            )));
        }
        if beta < 0.0 || a <= 0.0 {
            return Err(Error::InvalidDecay("need beta >= 0 and a > 0".into()));
        }
        Ok(DecayFunction { m, alpha, beta, a })
    }

    /// `Gamma(i)`.
    pub fn value(&self, offset: Site) -> f64 {
        let n = offset.norm1();
        if n == 0 {
            self.a
        } else {
            let nf = n as f64;
            self.a * nf.powf(-self.alpha) * (-self.beta * nf).exp()
        }
    }

    /// `Gamma(i)` for a scalar 1-d offset.
    pub fn value_1d(&self, i: i64) -> f64 {
        self.value(Site::new_1d(i))
    }
}

/// Number of sites of `Z^m` at 1-norm distance exactly `n >= 1`.
fn shell_count(m: usize, n: i64) -> f64 {
    // N_m(n) = sum_k 2^k C(m,k) C(n-1,k-1)
    let mut total = 0.0;
    for k in 1..=m.min(n as usize) {
        let mut term = (1u64 << k) as f64;
        // C(m,k)
        let mut c = 1.0;
        for j in 0..k {
            c *= (m - j) as f64 / (j + 1) as f64;
        }
        term *= c;
        // C(n-1, k-1)
        let mut c2 = 1.0;
        for j in 0..(k - 1) {
            c2 *= (n - 1 - j as i64) as f64 / (j + 1) as f64;
        }
        term *= c2;
        total += term;
    }
    total
}

/// Window sum `sum_{1<=|i|<=R} |i|^{-alpha} e^{-beta|i|}` (without the `a`
/// factor) together with an analytic bound on the off-window tail.
pub fn shell_sum_and_tail(alpha: f64, beta: f64, m: usize, radius: i64) -> (f64, f64) {
    let mut s = 0.0;
    for n in 1..=radius {
        let nf = n as f64;
        s += shell_count(m, n) * nf.powf(-alpha) * (-beta * nf).exp();
    }
    // Tail: N_m(n) <= 2^m m n^{m-1}; the summand is decreasing in n for
    // alpha > m, so integral comparison applies from R+1.
    let c = (1u64 << m) as f64 * m as f64;
    let r1 = (radius + 1) as f64;
    let p = m as f64 - 1.0 - alpha; // p < -1
    let tail = if beta == 0.0 {
        // sum_{n >= R+1} n^p <= (R+1)^p + int_{R+1}^inf x^p dx
        c * (r1.powf(p) + r1.powf(p + 1.0) / (-(p + 1.0)))
    } else {
        c * r1.powf(p) * ((-beta * r1).exp() + (-beta * r1).exp() / beta)
    };
    (s, tail)
}

/// Largest normalization `a` such that the window sum plus the analytic tail
/// bound stays below one, making `sum_i Gamma(i) <= 1` checkable despite the
/// finite truncation.
pub fn max_normalization(alpha: f64, beta: f64, m: usize, radius: i64) -> Result<f64> {
    if alpha <= m as f64 {
        return Err(Error::InvalidDecay(format!(
            "alpha = {alpha} must exceed the lattice dimension {m}"
        )));
    }
    let (s, tail) = shell_sum_and_tail(alpha, beta, m, radius);
    Ok(1.0 / (1.0 + s + tail))
}

/// Largest normalization `a` for which the convolution inequality
/// `sum_j Gamma(i-j) Gamma(j-k) <= Gamma(i-k)` holds for every triple of
/// sites inside a ball of radius `radius` (hence on every window of that
/// extent). This is strictly smaller than [`max_normalization`]: the sum
/// condition alone does not imply the convolution inequality.
///
/// Since both sides are homogeneous (`a^2` vs `a`), the bound is
/// `a = min_n w(n) / S(n)` over offsets `n`, where `w` is the unnormalized
/// weight and `S` its discrete self-convolution restricted to the ball.
pub fn max_convolution_normalization(alpha: f64, beta: f64, m: usize, radius: i64) -> Result<f64> {
    if alpha <= m as f64 {
        return Err(Error::InvalidDecay(format!(
            "alpha = {alpha} must exceed the lattice dimension {m}"
        )));
    }
    let w = |s: Site| -> f64 {
        let n = s.norm1();
        if n == 0 {
            1.0
        } else {
            (n as f64).powf(-alpha) * (-beta * n as f64).exp()
        }
    };
    let mut ball = Vec::new();
    collect_ball(m, Site::new_1d(0), 2 * radius, &mut ball);
    let mut best = f64::INFINITY;
    for n in &ball {
        let mut s = 0.0;
        for j in &ball {
            s += w(n.sub(j)) * w(*j);
        }
        best = best.min(w(*n) / s);
    }
    Ok(best)
}

/// A finite set of sites with a bijective index map, used to truncate `Z^m`.
#[derive(Clone, Debug)]
pub struct SiteWindow {
    pub dim: usize,
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
}

impl SiteWindow {
    pub fn new(dim: usize, mut sites: Vec<Site>) -> Self {
        sites.sort();
        sites.dedup();
        let index = sites.iter().enumerate().map(|(k, s)| (*s, k)).collect();
        SiteWindow { dim, sites, index }
    }

    /// 1-d interval `[lo, hi]`.
    pub fn interval(lo: i64, hi: i64) -> Self {
        Self::new(1, (lo..=hi).map(Site::new_1d).collect())
    }

    /// All sites within 1-norm distance `margin` of some site in `path`.
    pub fn around(dim: usize, path: &[Site], margin: i64) -> Self {
        let mut sites = Vec::new();
        for s in path {
            collect_ball(dim, *s, margin, &mut sites);
        }
        Self::new(dim, sites)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, k: usize) -> Site {
        self.sites[k]
    }

    pub fn index_of(&self, s: Site) -> Option<usize> {
        self.index.get(&s).copied()
    }

    pub fn contains(&self, s: Site) -> bool {
        self.index.contains_key(&s)
    }

    /// Minimum distance from `s` to the window boundary (0 on the boundary).
    pub fn margin_of(&self, s: Site) -> i64 {
        let mut d = 0;
        loop {
            let mut ball = Vec::new();
            collect_ball(self.dim, s, d + 1, &mut ball);
            if ball.iter().any(|b| !self.contains(*b)) {
                return d;
            }
            d += 1;
            if d > 10_000 {
                return d;
            }
        }
    }
}

fn collect_ball(dim: usize, center: Site, radius: i64, out: &mut Vec<Site>) {
    fn rec(dim: usize, center: Site, radius: i64, axis: usize, cur: Site, out: &mut Vec<Site>) {
        if axis == dim {
            out.push(cur);
            return;
        }
        let used: i64 = (0..axis).map(|k| (cur.0[k] - center.0[k]).abs()).sum();
        let left = radius - used;
        for d in -left..=left {
            let mut nxt = cur;
            nxt.0[axis] = center.0[axis] + d;
            rec(dim, center, radius, axis + 1, nxt, out);
        }
    }
    rec(dim, center, radius, 0, center, out);
}

/// A vector over a window with a fixed per-site block size, measured in the
/// weighted sup norm anchored at some site.
#[derive(Clone, Debug)]
pub struct DecayVector {
    pub window: Arc<SiteWindow>,
    /// Components per site.
    pub per_site: usize,
    /// Flat storage, site-major.
    pub values: Vec<f64>,
}

impl DecayVector {
    pub fn zeros(window: Arc<SiteWindow>, per_site: usize) -> Self {
        let n = window.len() * per_site;
        DecayVector {
            window,
            per_site,
            values: vec![0.0; n],
        }
    }

    pub fn site_block(&self, k: usize) -> &[f64] {
        &self.values[k * self.per_site..(k + 1) * self.per_site]
    }

    pub fn site_block_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.per_site..(k + 1) * self.per_site]
    }

    /// Max-abs over all components of site `k`.
    pub fn site_abs(&self, k: usize) -> f64 {
        self.site_block(k).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `sup_k |v_k| Gamma(k - j)^{-1}`, the Sigma_{j,Gamma} norm on the window.
    pub fn decay_norm(&self, anchor: Site, gamma: &DecayFunction) -> f64 {
        let mut sup = 0.0f64;
        for k in 0..self.window.len() {
            let w = gamma.value(self.window.site(k).sub(&anchor));
            sup = sup.max(self.site_abs(k) / w);
        }
        sup
    }
}

/// A dense block operator over a window. Block `(i, j)` maps the `per_site`
/// components at site `j` to those at site `i`; block norms are sup-operator
/// norms, matching the ambient sup norm.
#[derive(Clone, Debug)]
pub struct DecayOperator {
    pub window: Arc<SiteWindow>,
    pub per_site: usize,
    pub matrix: DMatrix<f64>,
}

impl DecayOperator {
    pub fn zeros(window: Arc<SiteWindow>, per_site: usize) -> Self {
        let n = window.len() * per_site;
        DecayOperator {
            window,
            per_site,
            matrix: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(window: Arc<SiteWindow>, per_site: usize) -> Self {
        let n = window.len() * per_site;
        DecayOperator {
            window,
            per_site,
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn from_matrix(window: Arc<SiteWindow>, per_site: usize, matrix: DMatrix<f64>) -> Self {
        assert_eq!(matrix.nrows(), window.len() * per_site);
        assert_eq!(matrix.ncols(), window.len() * per_site);
        DecayOperator {
            window,
            per_site,
            matrix,
        }
    }

    /// Sup-operator norm of block `(i, j)`: max row sum of absolute values.
    pub fn block_norm(&self, i: usize, j: usize) -> f64 {
        let b = self.per_site;
        let mut worst = 0.0f64;
        for r in 0..b {
            let mut row = 0.0;
            for c in 0..b {
                row += self.matrix[(i * b + r, j * b + c)].abs();
            }
            worst = worst.max(row);
        }
        worst
    }

    /// The gamma seminorm `sup_{i,j} |A^i_j| Gamma(i-j)^{-1}`.
    pub fn gamma_norm(&self, gamma: &DecayFunction) -> f64 {
        let n = self.window.len();
        let mut sup = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let w = gamma.value(self.window.site(i).sub(&self.window.site(j)));
                sup = sup.max(self.block_norm(i, j) / w);
            }
        }
        sup
    }

    /// Operator norm induced by the ambient sup norm (max row sum).
    pub fn sup_operator_norm(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.matrix.nrows() {
            let mut row = 0.0;
            for c in 0..self.matrix.ncols() {
                row += self.matrix[(r, c)].abs();
            }
            worst = worst.max(row);
        }
        worst
    }

    pub fn apply(&self, v: &DecayVector) -> DecayVector {
        assert_eq!(self.per_site, v.per_site);
        let x = DMatrix::from_column_slice(v.values.len(), 1, &v.values);
        let y = &self.matrix * x;
        DecayVector {
            window: v.window.clone(),
            per_site: v.per_site,
            values: y.as_slice().to_vec(),
        }
    }

    pub fn compose(&self, other: &DecayOperator) -> DecayOperator {
        DecayOperator {
            window: self.window.clone(),
            per_site: self.per_site,
            matrix: &self.matrix * &other.matrix,
        }
    }
}

/// Inverse of `M = A + B` by the Neumann series around `A^{-1}`, valid when
/// `||A^{-1} B|| < 1` in the sup operator norm. Returns the inverse together
/// with the number of series terms used.
pub fn neumann_inverse(
    a: &DecayOperator,
    b: &DecayOperator,
    gamma: &DecayFunction,
    residual_tol: f64,
) -> Result<(DecayOperator, usize)> {
    let n = a.matrix.nrows();
    let a_inv = a
        .matrix
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Domain("base operator A is singular".into()))?;
    let a_inv_op = DecayOperator::from_matrix(a.window.clone(), a.per_site, a_inv.clone());
    if !a_inv_op.gamma_norm(gamma).is_finite() {
        return Err(Error::Domain("gamma(A^{-1}) is not finite".into()));
    }
    let k = &a_inv * &b.matrix; // A^{-1} B
    let k_op = DecayOperator::from_matrix(a.window.clone(), a.per_site, k.clone());
    let q = k_op.sup_operator_norm();
    if q >= 1.0 {
        return Err(Error::Hyperbolicity(format!(
            "Neumann contraction violated: ||A^{{-1}}B|| = {q:.3e} >= 1"
        )));
    }
    // M^{-1} = sum_k (-A^{-1}B)^k A^{-1}
    let mut term = a_inv.clone();
    let mut inv = a_inv.clone();
    let mut used = 0usize;
    for it in 1..=400 {
        term = -(&k * &term);
        inv += &term;
        used = it;
        if term.amax() < 1e-17 * inv.amax().max(1.0) {
            break;
        }
    }
    let m_mat = &a.matrix + &b.matrix;
    let resid = (&m_mat * &inv - DMatrix::<f64>::identity(n, n)).amax();
    if resid > residual_tol {
        return Err(Error::Integration(format!(
            "Neumann inverse residual {resid:.3e} exceeds tolerance {residual_tol:.1e}"
        )));
    }
    Ok((
        DecayOperator::from_matrix(a.window.clone(), a.per_site, inv),
        used,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gamma_default() -> DecayFunction {
        DecayFunction::new(1, 2.0, 0.0, 0.2).unwrap()
    }

    /// A decay function valid for the operator algebra (convolution
    /// inequality included) on windows up to radius 12.
    fn gamma_algebra() -> DecayFunction {
        let a = max_convolution_normalization(2.0, 0.0, 1, 12).unwrap();
        DecayFunction::new(1, 2.0, 0.0, a).unwrap()
    }

    #[test]
    fn decay_value_cases() {
        let g = gamma_default();
        assert_eq!(g.value_1d(0), 0.2);
        assert!((g.value_1d(2) - 0.05).abs() < 1e-15);
        let ge = DecayFunction::new(1, 2.0, 1.0, 0.2).unwrap();
        // direct evaluation oracle: 0.2 * 1^{-2} * e^{-1}
        let oracle = 0.2 * (-1.0f64).exp();
        assert!((ge.value_1d(1) - oracle).abs() < 1e-15);
        assert!((oracle - 0.073576).abs() < 1e-6);
    }

    #[test]
    fn normalization_matches_zeta_tail() {
        let a = max_normalization(2.0, 0.0, 1, 1_000_000).unwrap();
        let exact = 1.0 / (1.0 + 2.0 * std::f64::consts::PI * std::f64::consts::PI / 6.0);
        assert!(a <= exact + 1e-12, "a = {a}, exact = {exact}");
        assert!((a - exact).abs() < 1e-5, "a = {a}, exact = {exact}");
        assert!(max_normalization(1.0, 0.0, 1, 100).is_err());
        // beta large: only the tail vanishes and a -> 1
        let a_big = max_normalization(2.0, 50.0, 1, 100).unwrap();
        assert!(a_big > 1.0 - 1e-12);
    }

    #[test]
    fn normalization_full_sum_within_tail() {
        // brute force over a much larger window than the one used to pick a
        let a = max_normalization(2.0, 0.0, 1, 1000).unwrap();
        let g = DecayFunction::new(1, 2.0, 0.0, a).unwrap();
        let mut s = g.value_1d(0);
        for n in 1..=10_000_000i64 {
            s += 2.0 * g.value_1d(n);
        }
        assert!(s <= 1.0, "full sum {s} exceeds 1");
    }

    #[test]
    fn convolution_inequality_on_window() {
        let a = max_convolution_normalization(2.0, 0.0, 1, 12).unwrap();
        // the convolution-valid a also satisfies the sum condition
        assert!(a < max_normalization(2.0, 0.0, 1, 1_000_000).unwrap());
        let g = DecayFunction::new(1, 2.0, 0.0, a).unwrap();
        let w = SiteWindow::interval(-12, 12);
        for i in w.sites() {
            for k in w.sites() {
                let mut s = 0.0;
                for j in w.sites() {
                    s += g.value(i.sub(j)) * g.value(j.sub(k));
                }
                assert!(
                    s <= g.value(i.sub(k)) * (1.0 + 1e-12),
                    "convolution inequality fails at {:?},{:?}",
                    i,
                    k
                );
            }
        }
        // a sum-normalized-only a is too large for the convolution inequality
        let g_sum = gamma_default();
        let i = Site::new_1d(-12);
        let k = Site::new_1d(-10);
        let s: f64 = w
            .sites()
            .iter()
            .map(|j| g_sum.value(i.sub(j)) * g_sum.value(j.sub(&k)))
            .sum();
        assert!(s > g_sum.value(i.sub(&k)));
    }

    #[test]
    fn vector_norm_cases() {
        let g = gamma_default();
        let w = Arc::new(SiteWindow::interval(-8, 8));
        let j = Site::new_1d(0);
        let mut v = DecayVector::zeros(w.clone(), 1);
        assert_eq!(v.decay_norm(j, &g), 0.0);
        let jdx = w.index_of(j).unwrap();
        v.values[jdx] = 1.0;
        assert!((v.decay_norm(j, &g) - 1.0 / g.a).abs() < 1e-14);
        // profile v_k = Gamma(k - j) has norm exactly 1
        let mut prof = DecayVector::zeros(w.clone(), 1);
        for k in 0..w.len() {
            prof.values[k] = g.value(w.site(k).sub(&j));
        }
        assert!((prof.decay_norm(j, &g) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_norm_identity_and_zero() {
        let g = gamma_default();
        let w = Arc::new(SiteWindow::interval(-6, 6));
        let id = DecayOperator::identity(w.clone(), 2);
        assert!((id.gamma_norm(&g) - 1.0 / g.a).abs() < 1e-13);
        let z = DecayOperator::zeros(w, 2);
        assert_eq!(z.gamma_norm(&g), 0.0);
    }

    fn random_decay_operator(
        rng: &mut impl Rng,
        w: &Arc<SiteWindow>,
        g: &DecayFunction,
        scale: f64,
    ) -> DecayOperator {
        let mut op = DecayOperator::zeros(w.clone(), 1);
        let n = w.len();
        for i in 0..n {
            for j in 0..n {
                let wgt = g.value(w.site(i).sub(&w.site(j)));
                op.matrix[(i, j)] = scale * wgt * (rng.gen::<f64>() * 2.0 - 1.0);
            }
        }
        op
    }

    #[test]
    fn submultiplicativity_random() {
        let g = gamma_algebra();
        let w = Arc::new(SiteWindow::interval(-10, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_decay_operator(&mut rng, &w, &g, 1.0);
            let b = random_decay_operator(&mut rng, &w, &g, 1.0);
            let ba = b.compose(&a);
            assert!(ba.gamma_norm(&g) <= b.gamma_norm(&g) * a.gamma_norm(&g) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sigma_boundedness_random() {
        let g = gamma_algebra();
        let w = Arc::new(SiteWindow::interval(-10, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let anchor = Site::new_1d(-2);
        for _ in 0..30 {
            let a = random_decay_operator(&mut rng, &w, &g, 1.0);
            let mut v = DecayVector::zeros(w.clone(), 1);
            for k in 0..w.len() {
                v.values[k] =
                    g.value(w.site(k).sub(&anchor)) * (rng.gen::<f64>() * 2.0 - 1.0);
            }
            let av = a.apply(&v);
            assert!(
                av.decay_norm(anchor, &g)
                    <= a.gamma_norm(&g) * v.decay_norm(anchor, &g) * (1.0 + 1e-12)
            );
        }
    }

    #[test]
    fn anchor_change_blowup() {
        let g = gamma_default();
        let w = Arc::new(SiteWindow::interval(-10, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = DecayVector::zeros(w.clone(), 1);
        for k in 0..w.len() {
            v.values[k] = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let i = Site::new_1d(3);
        let j = Site::new_1d(-1);
        assert!(v.decay_norm(i, &g) <= v.decay_norm(j, &g) / g.value(i.sub(&j)) * (1.0 + 1e-12));
    }

    #[test]
    fn neumann_inverse_perturbation_bound() {
        let g = gamma_default();
        let w = Arc::new(SiteWindow::interval(-8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let id = DecayOperator::identity(w.clone(), 1);
        // B = eps * N with ||N|| <= 1
        let mut n_op = random_decay_operator(&mut rng, &w, &g, 1.0);
        let nn = n_op.sup_operator_norm();
        n_op.matrix /= nn.max(1.0);
        let eps = 0.1;
        let mut b = n_op.clone();
        b.matrix *= eps;
        let (inv, _) = neumann_inverse(&id, &b, &g, 1e-10).unwrap();
        // geometric-series remainder oracle: ||(I+eN)^{-1} - (I - eN)|| <= e^2/(1-e)
        let first_order = DMatrix::<f64>::identity(w.len(), w.len()) - &n_op.matrix * eps;
        let diff = DecayOperator::from_matrix(w.clone(), 1, inv.matrix.clone() - first_order);
        assert!(diff.sup_operator_norm() <= eps * eps / (1.0 - eps) + 1e-12);
        // dense LU oracle
        let m = DMatrix::<f64>::identity(w.len(), w.len()) + &b.matrix;
        let lu_inv = m.lu().try_inverse().unwrap();
        assert!((lu_inv - &inv.matrix).amax() < 1e-10);
        assert!(inv.gamma_norm(&g).is_finite());
        // B = 0 reproduces A^{-1}
        let z = DecayOperator::zeros(w.clone(), 1);
        let (inv0, _) = neumann_inverse(&id, &z, &g, 1e-10).unwrap();
        assert!((inv0.matrix - DMatrix::<f64>::identity(w.len(), w.len())).amax() < 1e-14);
    }

    #[test]
    fn neumann_rejects_large_perturbation() {
        let g = gamma_default();
        let w = Arc::new(SiteWindow::interval(-4, 4));
        let id = DecayOperator::identity(w.clone(), 1);
        let mut b = DecayOperator::identity(w.clone(), 1);
        b.matrix *= 1.5;
        assert!(neumann_inverse(&id, &b, &g, 1e-10).is_err());
    }

    #[test]
    fn window_margin() {
        let path = [Site::new_1d(0), Site::new_1d(1), Site::new_1d(2)];
        let w = SiteWindow::around(1, &path, 3);
        assert_eq!(w.len(), 9);
        assert!(w.margin_of(Site::new_1d(1)) >= 3);
    }
}

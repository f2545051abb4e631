//! Run configuration and run manifest for the command-line driver.
//!
//! A [`RunConfig`] is a JSON document describing the model, the energy path,
//! the numerical tolerances of every stage, and the output/seeding choices.
//! Every field has a default, so `{}` is a valid config describing the
//! shipped three-site transfer demonstration. Configs are validated before
//! use and hashed (SHA-256 of the canonical JSON serialization) so that
//! cached stage artifacts and output manifests can be tied to the exact
//! configuration that produced them.

use crate::chain::ChainConfig;
use crate::decay::{DecayFunction, SiteWindow};
use crate::lattice::{LatticeModel, PathSpec, PerturbationSpec};
use crate::manifold::GraphSolveOptions;
use crate::melnikov::MelnikovConfig;
use crate::shadow::ShadowConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

fn d_window() -> [i64; 2] {
    [-2, 6]
}
fn d_alpha() -> f64 {
    2.0
}
fn d_a() -> f64 {
    0.1
}
fn d_a2() -> f64 {
    1.0
}
fn d_a3() -> f64 {
    0.3
}
fn d_c() -> f64 {
    0.5
}
fn d_eps() -> f64 {
    5e-3
}
fn d_len() -> usize {
    4
}
fn d_h() -> f64 {
    1.0
}
/// Lattice model section: decay function, coupling family, coupling size.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Window of lattice sites kept in the computation, `[lo, hi]` inclusive.
    pub window: [i64; 2],
    /// Polynomial exponent of the decay function.
    pub alpha: f64,
    /// Exponential rate of the decay function.
    pub beta: f64,
    /// Normalization of the decay function.
    pub a: f64,
    /// Strength of the two-site coupling factor family.
    pub a2: f64,
    /// Strength of the three-site coupling factor family.
    pub a3: f64,
    /// Extra geometric decay per unit range of the coupling families.
    pub c: f64,
    /// Overall coupling size.
    pub eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            window: d_window(),
            alpha: d_alpha(),
            beta: 0.0,
            a: d_a(),
            a2: d_a2(),
            a3: d_a3(),
            c: d_c(),
            eps: d_eps(),
        }
    }
}

/// Energy path section: which sites the energy packet visits, at what level.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    /// First site of the path.
    pub start: i64,
    /// Number of consecutive sites on the path (three-site blocks need at
    /// least 3; `len` sites give `len - 2` transfer steps).
    pub len: usize,
    /// Energy level carried along the path.
    pub h: f64,
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection {
            start: 0,
            len: d_len(),
            h: d_h(),
        }
    }
}

/// Numerical tolerances and resolutions for every pipeline stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    /// Chart half-width of the invariant-manifold graphs.
    pub graph_delta: f64,
    /// Hyperbolic Chebyshev resolution of the graphs.
    pub graph_cheb_n: usize,
    /// Angular Fourier resolution of the graphs.
    pub graph_ang_n: usize,
    /// Time of the map iterated by the graph transform.
    pub graph_map_time: f64,
    /// Sup-norm convergence tolerance of the graph transform.
    pub graph_tol: f64,
    /// Truncation of the improper splitting integrals.
    pub melnikov_t_cut: f64,
    /// Absolute quadrature tolerance of the splitting integrals.
    pub melnikov_quad_tol: f64,
    /// Points per angle axis of the hypothesis verification grid.
    pub survey_grid_x: usize,
    /// Points on the rotor-energy axis of the verification grid.
    pub survey_grid_h: usize,
    /// Jump energy-gap factor (`gap <= kappa * eps`); omit to fit it from
    /// the measured splitting data.
    pub chain_kappa: Option<f64>,
    /// Ladder step as a fraction of `eps` times the measured transfer rate.
    pub chain_step_factor: f64,
    /// Stop each step plan after this many links, if set (partial plan).
    pub chain_max_links: Option<usize>,
    /// Hyperbolic matching tolerance at shadowing segment joints.
    pub shadow_joint_tol: f64,
    /// Entry-window tolerance for the torus phases at each departure.
    pub shadow_angle_tol: f64,
    /// Visit accuracy of the shadowing trajectory.
    pub shadow_eta: f64,
    /// Minimum dwell time on each torus between excursions.
    pub shadow_min_dwell: f64,
    /// Target spacing of the emitted time series.
    pub shadow_sample_dt: f64,
    /// Shadow an incomplete plan as far as it reaches instead of failing.
    pub shadow_allow_partial: bool,
    /// Local error tolerance of all trajectory integrations.
    pub integrator_tol: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        let g = ChainConfig::default();
        let s = ShadowConfig::default();
        NumericsSection {
            graph_delta: g.graph.delta,
            graph_cheb_n: g.graph.cheb_n,
            graph_ang_n: g.graph.ang_n,
            graph_map_time: g.graph.map_time,
            graph_tol: g.graph.tol,
            melnikov_t_cut: g.melnikov.t_cut,
            melnikov_quad_tol: g.melnikov.quad_tol,
            survey_grid_x: g.melnikov.grid_x,
            survey_grid_h: g.melnikov.grid_h,
            chain_kappa: None,
            chain_step_factor: g.arnold_step_factor,
            chain_max_links: None,
            shadow_joint_tol: s.joint_tol,
            shadow_angle_tol: s.angle_tol,
            shadow_eta: s.eta,
            shadow_min_dwell: s.min_dwell,
            shadow_sample_dt: s.sample_dt,
            shadow_allow_partial: false,
            integrator_tol: 1e-12,
        }
    }
}

/// Decay-audit section: size of the randomized operator-algebra suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    /// Number of random operators drawn.
    pub operators: usize,
    /// Site window `[-radius, radius]` of the audit operators.
    pub radius: i64,
    /// Also run the suite with an exponential decay component.
    pub with_exponential: bool,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            operators: 200,
            radius: 32,
            with_exponential: true,
        }
    }
}

/// Complete run configuration. All fields default, so `{}` is the shipped
/// three-site transfer demonstration.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub path: PathSection,
    pub numerics: NumericsSection,
    pub audit: AuditSection,
    /// Seed of the randomized audit suite.
    pub seed: u64,
}

impl RunConfig {
    /// Parse and validate a JSON config document.
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Structural validation beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.window[0] >= m.window[1] {
            return Err(Error::Config(format!(
                "window [{}, {}] is empty",
                m.window[0], m.window[1]
            )));
        }
        if !(m.alpha > 1.0) {
            return Err(Error::Config(format!(
                "decay exponent alpha must exceed the lattice dimension 1, got {}",
                m.alpha
            )));
        }
        if m.beta < 0.0 || m.a <= 0.0 {
            return Err(Error::Config(format!(
                "decay parameters need beta >= 0 and a > 0, got beta={} a={}",
                m.beta, m.a
            )));
        }
        if !(m.eps >= 0.0 && m.eps < 1.0) {
            return Err(Error::Config(format!(
                "coupling size eps must lie in [0, 1), got {}",
                m.eps
            )));
        }
        if m.c < 0.0 {
            return Err(Error::Config(format!(
                "coupling range decay c must be >= 0, got {}",
                m.c
            )));
        }
        let p = &self.path;
        if p.len < 3 {
            return Err(Error::Config(format!(
                "path needs at least 3 sites for one three-site block, got {}",
                p.len
            )));
        }
        if !(p.h > 0.0 && p.h < 2.0) {
            return Err(Error::Config(format!(
                "path energy must lie in the rotation range (0, 2), got {}",
                p.h
            )));
        }
        let last = p.start + p.len as i64 - 1;
        if p.start < m.window[0] || last > m.window[1] {
            return Err(Error::Config(format!(
                "path sites {}..={last} leave the window [{}, {}]",
                p.start, m.window[0], m.window[1]
            )));
        }
        let n = &self.numerics;
        for (name, v) in [
            ("graph_delta", n.graph_delta),
            ("graph_map_time", n.graph_map_time),
            ("graph_tol", n.graph_tol),
            ("melnikov_t_cut", n.melnikov_t_cut),
            ("melnikov_quad_tol", n.melnikov_quad_tol),
            ("chain_step_factor", n.chain_step_factor),
            ("shadow_joint_tol", n.shadow_joint_tol),
            ("shadow_angle_tol", n.shadow_angle_tol),
            ("shadow_eta", n.shadow_eta),
            ("shadow_min_dwell", n.shadow_min_dwell),
            ("shadow_sample_dt", n.shadow_sample_dt),
            ("integrator_tol", n.integrator_tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(k) = n.chain_kappa {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Config(format!(
                    "chain_kappa must lie in (0, 1], got {k}"
                )));
            }
        }
        for (name, v) in [
            ("graph_cheb_n", n.graph_cheb_n),
            ("graph_ang_n", n.graph_ang_n),
            ("survey_grid_x", n.survey_grid_x),
            ("survey_grid_h", n.survey_grid_h),
        ] {
            if v < 2 {
                return Err(Error::Config(format!("{name} must be at least 2, got {v}")));
            }
        }
        let a = &self.audit;
        if a.operators == 0 || a.radius < 2 {
            return Err(Error::Config(format!(
                "audit needs operators >= 1 and radius >= 2, got {} and {}",
                a.operators, a.radius
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, as lowercase hex.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serialization is infallible");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Instantiate the lattice model this config describes.
    pub fn build_model(&self) -> Result<LatticeModel> {
        let m = &self.model;
        let window = Arc::new(SiteWindow::interval(m.window[0], m.window[1]));
        let gamma = DecayFunction::new(1, m.alpha, m.beta, m.a)?;
        let perturbation = PerturbationSpec::default_family(m.a2, m.a3, m.c);
        let path = PathSpec::line_1d(self.path.start, self.path.len);
        LatticeModel::new(window, gamma, m.eps, perturbation, path)
    }

    pub fn graph_options(&self) -> GraphSolveOptions {
        let n = &self.numerics;
        GraphSolveOptions {
            delta: n.graph_delta,
            cheb_n: n.graph_cheb_n,
            ang_n: n.graph_ang_n,
            map_time: n.graph_map_time,
            tol: n.graph_tol,
            integrator_tol: n.integrator_tol,
            ..GraphSolveOptions::default()
        }
    }

    pub fn melnikov_config(&self) -> MelnikovConfig {
        let n = &self.numerics;
        MelnikovConfig {
            t_cut: n.melnikov_t_cut,
            quad_tol: n.melnikov_quad_tol,
            grid_x: n.survey_grid_x,
            grid_h: n.survey_grid_h,
            ..MelnikovConfig::default()
        }
    }

    pub fn chain_config(&self) -> ChainConfig {
        let n = &self.numerics;
        ChainConfig {
            graph: self.graph_options(),
            melnikov: self.melnikov_config(),
            kappa: n.chain_kappa,
            arnold_step_factor: n.chain_step_factor,
            max_links: n.chain_max_links,
            integrator_tol: n.integrator_tol,
            ..ChainConfig::default()
        }
    }

    pub fn shadow_config(&self) -> ShadowConfig {
        let n = &self.numerics;
        ShadowConfig {
            graph: self.graph_options(),
            eta: n.shadow_eta,
            joint_tol: n.shadow_joint_tol,
            angle_tol: n.shadow_angle_tol,
            min_dwell: n.shadow_min_dwell,
            sample_dt: n.shadow_sample_dt,
            allow_partial: n.shadow_allow_partial,
            integrator_tol: n.integrator_tol,
            ..ShadowConfig::default()
        }
    }

    /// Sites outside the active window but inside the kept window, useful for
    /// reporting how far the path is from the boundary.
    pub fn margin_sites(&self) -> (i64, i64) {
        let last = self.path.start + self.path.len as i64 - 1;
        (
            self.path.start - self.model.window[0],
            self.model.window[1] - last,
        )
    }
}

/// Wall-clock and diagnostic record of one executed stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Wall-clock seconds spent in the stage (excluded from determinism
    /// guarantees; only table outputs are byte-reproducible).
    pub seconds: f64,
    /// Whether the stage was served from the stage cache.
    pub cached: bool,
    /// Stage-specific diagnostic summary.
    pub summary: serde_json::Value,
}

/// Manifest written next to the outputs of every run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 hash of the configuration that produced the outputs.
    pub config_hash: String,
    /// Version of this package.
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, threads: usize) -> Self {
        RunManifest {
            config_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            stages: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

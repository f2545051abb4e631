//! Stage driver behind the command-line interface.
//!
//! Each subcommand maps to a [`Stage`]; a [`RunContext`] owns the validated
//! configuration, the output directory, and the growing [`RunManifest`].
//! Expensive intermediate artifacts (currently the transition-chain plan)
//! can be cached on disk keyed by the configuration hash; a cache file whose
//! recorded hash does not match the current configuration is refused and the
//! artifact is recomputed.
//!
//! Determinism: for a fixed seed and thread count, every table output
//! (CSV and JSON artifacts) is byte-identical across reruns. Only the
//! manifest's wall-clock timings vary.

use crate::chain::{build_chain, solve_manifolds, ChainPlan};
use crate::config::{RunConfig, RunManifest, StageRecord};
use crate::decay::{
    max_convolution_normalization, DecayFunction, DecayOperator, DecayVector, Site, SiteWindow,
};
use crate::manifold::{invariance_residual, Side, TorusSpec};
use crate::melnikov::hypothesis_survey;
use crate::shadow::shadow_chain;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

/// One executable pipeline stage, mirroring the CLI subcommands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    VerifyHypotheses,
    Manifold,
    Chain,
    Shadow,
    DemoTransfer,
    DecayAudit,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::VerifyHypotheses => "verify-hypotheses",
            Stage::Manifold => "manifold",
            Stage::Chain => "chain",
            Stage::Shadow => "shadow",
            Stage::DemoTransfer => "demo-transfer",
            Stage::DecayAudit => "decay-audit",
        }
    }
}

/// Map an error to the process exit code contract: 0 success, 2 invalid
/// configuration, 3 verification-hypothesis failure, 4 numerical failure,
/// 5 chain/shadowing construction failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidDecay(_) | Error::ModelRejected(_) | Error::Io(_) => 2,
        Error::Hypothesis(_) => 3,
        Error::RefineShooting(_)
        | Error::EtaFloor(_)
        | Error::SectionMiss(_)
        | Error::Transversality(_) => 5,
        _ => 4,
    }
}

/// Execution context of one CLI invocation.
pub struct RunContext {
    pub config: RunConfig,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    manifest: RunManifest,
}

#[derive(Serialize, Deserialize)]
struct CachedPlan {
    config_hash: String,
    plan: ChainPlan,
}

impl RunContext {
    pub fn new(
        config: RunConfig,
        out: PathBuf,
        cache: Option<PathBuf>,
        seed: u64,
        threads: usize,
    ) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&out)?;
        if let Some(c) = &cache {
            std::fs::create_dir_all(c)?;
        }
        let manifest = RunManifest::new(config.hash(), seed, threads);
        Ok(RunContext {
            config,
            out,
            cache,
            seed,
            threads,
            manifest,
        })
    }

    /// Run one stage end to end, record it in the manifest, and write the
    /// manifest to the output directory (also on failure, with the error
    /// recorded).
    pub fn run(&mut self, stage: Stage) -> Result<()> {
        let result = match stage {
            Stage::DemoTransfer => self
                .timed(Stage::VerifyHypotheses)
                .and_then(|_| self.timed(Stage::Chain))
                .and_then(|_| self.timed(Stage::Shadow)),
            s => self.timed(s),
        };
        if let Err(e) = &result {
            self.manifest.stages.push(StageRecord {
                stage: format!("{} (failed)", stage.name()),
                seconds: 0.0,
                cached: false,
                summary: json!({ "error": e.to_string() }),
            });
        }
        self.manifest.save(&self.out.join("manifest.json"))?;
        result
    }

    fn timed(&mut self, stage: Stage) -> Result<()> {
        let t0 = Instant::now();
        let (summary, cached) = match stage {
            Stage::VerifyHypotheses => (self.verify_hypotheses()?, false),
            Stage::Manifold => (self.manifold()?, false),
            Stage::Chain => self.chain()?,
            Stage::Shadow => self.shadow()?,
            Stage::DecayAudit => (self.decay_audit()?, false),
            Stage::DemoTransfer => unreachable!("composite stage handled by run()"),
        };
        self.manifest.stages.push(StageRecord {
            stage: stage.name().to_string(),
            seconds: t0.elapsed().as_secs_f64(),
            cached,
            summary,
        });
        Ok(())
    }

    // -- verify-hypotheses --------------------------------------------------

    fn verify_hypotheses(&self) -> Result<Value> {
        let model = self.config.build_model()?;
        let mel = self.config.melnikov_config();
        let h = self.config.path.h;
        let n_steps = model.path.sites.len() - 2;
        let mut reports = Vec::new();
        let mut cell_counts = Vec::new();
        for i in 0..n_steps {
            let (report, tables) = hypothesis_survey(&model, i, h, &mel)?;
            cell_counts.push((tables.torus.len(), tables.periodic.len()));
            reports.push(report);
        }
        let text = serde_json::to_string_pretty(&reports)
            .map_err(|e| Error::Config(format!("serialize hypothesis reports: {e}")))?;
        std::fs::write(self.out.join("hypotheses.json"), text)?;
        if let Some(bad) = reports.iter().find(|r| !r.pass) {
            return Err(Error::Hypothesis(format!(
                "step {} failed verification:\n{}",
                bad.step,
                bad.summary()
            )));
        }
        Ok(json!({
            "steps": n_steps,
            "grid_x": mel.grid_x,
            "grid_h": mel.grid_h,
            "cells": cell_counts.iter().map(|c| c.0 + c.1).sum::<usize>(),
            "all_pass": true,
        }))
    }

    // -- manifold -----------------------------------------------------------

    fn manifold(&self) -> Result<Value> {
        let model = self.config.build_model()?;
        let opt = self.config.graph_options();
        let sites = &model.path.sites;
        let active = [sites[0], sites[1], sites[2]];
        let torus = TorusSpec::periodic(sites[0], self.config.path.h);
        let data = solve_manifolds(&model, torus, active, &opt)?;
        let ru = invariance_residual(&data.chart, &data.unstable, opt.map_time, opt.integrator_tol)?;
        let rs = invariance_residual(&data.chart, &data.stable, opt.map_time, opt.integrator_tol)?;
        let side = |s: Side| {
            let d = match s {
                Side::Unstable => &data.diagnostics.0,
                Side::Stable => &data.diagnostics.1,
            };
            json!({
                "lambda": d.lambda,
                "beta": d.beta,
                "k_theta": d.k_theta,
                "contraction_condition": d.contraction_condition,
            })
        };
        let report = json!({
            "torus": { "site": sites[0].x(), "h": self.config.path.h },
            "unstable": side(Side::Unstable),
            "stable": side(Side::Stable),
            "invariance_residual": { "unstable": ru, "stable": rs },
        });
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("serialize manifold report: {e}")))?;
        std::fs::write(self.out.join("manifold.json"), text)?;
        Ok(report)
    }

    // -- chain (with stage cache) -------------------------------------------

    fn cache_file(&self) -> Option<PathBuf> {
        self.cache
            .as_ref()
            .map(|c| c.join(format!("{}.chain.json", &self.manifest.config_hash[..16])))
    }

    /// Load the cached plan if present and produced by this exact config;
    /// otherwise build it (and store it). Returns the plan and whether it
    /// came from the cache.
    fn obtain_plan(&self) -> Result<(ChainPlan, bool)> {
        if let Some(file) = self.cache_file() {
            if file.exists() {
                let text = std::fs::read_to_string(&file)?;
                let cached: CachedPlan = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("corrupt stage cache {}: {e}", file.display())))?;
                if cached.config_hash == self.manifest.config_hash {
                    return Ok((cached.plan, true));
                }
                eprintln!(
                    "stage cache {} is stale (config hash mismatch); recomputing",
                    file.display()
                );
            }
        }
        let model = self.config.build_model()?;
        let plan = build_chain(&model, self.config.path.h, &self.config.chain_config())?;
        if let Some(file) = self.cache_file() {
            let wrapper = CachedPlan {
                config_hash: self.manifest.config_hash.clone(),
                plan: plan.clone(),
            };
            let text = serde_json::to_string(&wrapper)
                .map_err(|e| Error::Config(format!("serialize stage cache: {e}")))?;
            std::fs::write(&file, text)?;
        }
        Ok((plan, false))
    }

    fn plan_summary(plan: &ChainPlan) -> Value {
        let mut min_sv = f64::INFINITY;
        let mut max_residual = 0.0f64;
        for step in &plan.steps {
            for link in &step.links {
                min_sv = min_sv.min(link.restricted_min_sv);
                max_residual = max_residual.max(link.residual);
            }
        }
        json!({
            "steps": plan.steps.len(),
            "links": plan.n_links(),
            "tori": plan.steps.iter().map(|s| s.tori.len()).sum::<usize>(),
            "min_restricted_sv": if min_sv.is_finite() { min_sv } else { 0.0 },
            "max_link_residual": max_residual,
            "failures": plan
                .steps
                .iter()
                .filter_map(|s| s.failure.clone())
                .collect::<Vec<_>>(),
        })
    }

    fn chain(&self) -> Result<(Value, bool)> {
        let (plan, cached) = self.obtain_plan()?;
        plan.save(&self.out.join("chain_plan.json"))?;
        let failures: Vec<&String> = plan.steps.iter().filter_map(|s| s.failure.as_ref()).collect();
        if !failures.is_empty() && !self.config.numerics.shadow_allow_partial {
            return Err(Error::RefineShooting(format!(
                "chain construction incomplete: {}",
                failures
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join("; ")
            )));
        }
        Ok((Self::plan_summary(&plan), cached))
    }

    // -- shadow -------------------------------------------------------------

    fn shadow(&self) -> Result<(Value, bool)> {
        let model = self.config.build_model()?;
        let (plan, cached) = self.obtain_plan()?;
        let run = shadow_chain(&model, &plan, &self.config.shadow_config())?;
        let mut csv = Vec::new();
        run.write_csv(&mut csv)?;
        std::fs::write(self.out.join("shadow.csv"), csv)?;
        std::fs::write(self.out.join("visits.json"), run.visits_json()?)?;
        Ok((
            json!({
                "visits": run.visits.len(),
                "segments": run.segments.len(),
                "samples": run.samples.len(),
                "eta": run.eta,
                "eta_achieved": run.eta_achieved,
                "max_joint_gap": run.max_joint_gap,
                "max_angle_slack": run.max_angle_slack,
                "max_off_energy": run.max_off_energy,
                "decay_norm_max": run.decay_norm_max,
                "duration": run.samples.last().map(|s| s.t).unwrap_or(0.0),
            }),
            cached,
        ))
    }

    // -- decay-audit --------------------------------------------------------

    /// Randomized audit of the decay-operator algebra: norm
    /// sub-multiplicativity under composition, boundedness on decaying
    /// vectors, the sup-norm bound, and the perturbative inverse. Seeded,
    /// so reruns are reproducible.
    fn decay_audit(&self) -> Result<Value> {
        let a_cfg = &self.config.audit;
        let alpha = self.config.model.alpha;
        let radius = a_cfg.radius;
        let w = Arc::new(SiteWindow::interval(-radius, radius));
        let betas: &[f64] = if a_cfg.with_exponential {
            &[0.0, 1.0]
        } else {
            &[0.0]
        };
        let anchor = Site::new_1d(-radius / 2);
        let mut violations: Vec<String> = Vec::new();
        let mut worst_submult = 0.0f64; // largest ratio ||BA|| / (||B|| ||A||)
        let mut worst_vector = 0.0f64; // largest ratio ||Av|| / (||A|| ||v||)
        let mut worst_sup = 0.0f64; // largest ratio sup-norm / gamma-norm
        let mut neumann_iters = Vec::new();

        for (bi, &beta) in betas.iter().enumerate() {
            let a_norm = max_convolution_normalization(alpha, beta, 1, radius)?;
            let g = DecayFunction::new(1, alpha, beta, a_norm)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(bi as u64));
            let n_ops = a_cfg.operators / betas.len() + a_cfg.operators % betas.len();
            for k in 0..n_ops {
                let a = random_operator(&mut rng, &w, &g, 1.0);
                let b = random_operator(&mut rng, &w, &g, 1.0);
                let (na, nb) = (a.gamma_norm(&g), b.gamma_norm(&g));
                let ba = b.compose(&a);
                let r = ba.gamma_norm(&g) / (na * nb);
                worst_submult = worst_submult.max(r);
                if r > 1.0 + 1e-12 {
                    violations.push(format!(
                        "beta={beta} op {k}: composition norm ratio {r:.6} exceeds 1"
                    ));
                }
                let rs = a.sup_operator_norm() / na;
                worst_sup = worst_sup.max(rs);
                if rs > 1.0 + 1e-12 {
                    violations.push(format!(
                        "beta={beta} op {k}: sup-norm ratio {rs:.6} exceeds 1"
                    ));
                }
                let mut v = DecayVector::zeros(w.clone(), 1);
                for s in 0..w.len() {
                    v.values[s] =
                        g.value(w.site(s).sub(&anchor)) * (rng.gen::<f64>() * 2.0 - 1.0);
                }
                let av = a.apply(&v);
                let rv = av.decay_norm(anchor, &g) / (na * v.decay_norm(anchor, &g));
                worst_vector = worst_vector.max(rv);
                if rv > 1.0 + 1e-12 {
                    violations.push(format!(
                        "beta={beta} op {k}: vector norm ratio {rv:.6} exceeds 1"
                    ));
                }
            }
            // Perturbative inverse: identity plus a small decaying operator.
            let id = DecayOperator::identity(w.clone(), 1);
            let raw = random_operator(&mut rng, &w, &g, 1.0);
            let scale = 0.3 / raw.sup_operator_norm();
            let b = DecayOperator::from_matrix(w.clone(), 1, raw.matrix * scale);
            let (inv, used) = crate::decay::neumann_inverse(&id, &b, &g, 1e-10)?;
            if !inv.gamma_norm(&g).is_finite() {
                violations.push(format!("beta={beta}: inverse left the operator algebra"));
            }
            neumann_iters.push(used);
        }
        if !violations.is_empty() {
            return Err(Error::Domain(format!(
                "decay-operator audit found {} violations; first: {}",
                violations.len(),
                violations[0]
            )));
        }
        let report = json!({
            "operators": a_cfg.operators,
            "window_sites": w.len(),
            "betas": betas,
            "worst_composition_ratio": worst_submult,
            "worst_vector_ratio": worst_vector,
            "worst_sup_ratio": worst_sup,
            "neumann_iterations": neumann_iters,
            "all_pass": true,
        });
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("serialize audit report: {e}")))?;
        std::fs::write(self.out.join("decay_audit.json"), text)?;
        Ok(report)
    }
}

/// Random operator whose entries respect the decay profile, so its weighted
/// norm is finite by construction.
fn random_operator(
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

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn quick_config() -> RunConfig {
        RunConfig::from_json(
            r#"{
                "audit": { "operators": 8, "radius": 8 },
                "numerics": { "survey_grid_x": 3, "survey_grid_h": 2 }
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn decay_audit_passes_and_reports() {
        let dir = tempdir().unwrap();
        let mut ctx = RunContext::new(
            quick_config(),
            dir.path().to_path_buf(),
            None,
            42,
            1,
        )
        .unwrap();
        ctx.run(Stage::DecayAudit).unwrap();
        assert!(dir.path().join("decay_audit.json").exists());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["stages"][0]["stage"], "decay-audit");
        assert_eq!(manifest["stages"][0]["summary"]["all_pass"], true);
        assert_eq!(manifest["seed"], 42);
    }

    #[test]
    fn decoupled_two_site_family_fails_verification_with_code_3() {
        let mut cfg = quick_config();
        cfg.model.a2 = 0.0;
        let dir = tempdir().unwrap();
        let mut ctx =
            RunContext::new(cfg, dir.path().to_path_buf(), None, 0, 1).unwrap();
        let err = ctx.run(Stage::VerifyHypotheses).unwrap_err();
        assert_eq!(exit_code(&err), 3, "got {err}");
        // the manifest still records the failed attempt
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("failed"));
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Hypothesis("x".into())), 3);
        assert_eq!(exit_code(&Error::Integration("x".into())), 4);
        assert_eq!(exit_code(&Error::NewtonDivergence("x".into())), 4);
        assert_eq!(exit_code(&Error::RefineShooting("x".into())), 5);
        assert_eq!(exit_code(&Error::EtaFloor("x".into())), 5);
    }
}

use pendulum_lattice::chain::{build_step_chain, ChainConfig};
use pendulum_lattice::decay::{DecayFunction, SiteWindow};
use pendulum_lattice::lattice::{LatticeModel, PathSpec, PerturbationSpec};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let eps: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let window = Arc::new(SiteWindow::interval(-4, 8));
    let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
    let model = LatticeModel::new(window, gamma, eps,
        PerturbationSpec::default_family(1.0, 0.3, 0.5), PathSpec::line_1d(0, 3)).unwrap();
    let mut cfg = ChainConfig::default();
    cfg.melnikov.grid_x = 4;
    cfg.melnikov.grid_h = 2;
    cfg.kappa = Some(0.25);
    let t0 = Instant::now();
    match build_step_chain(&model, 0, 1.0, &cfg) {
        Ok(plan) => eprintln!(
            "eps={eps:.1e}: {} links, failure={:?}, {:.1?}",
            plan.links.len(), plan.failure, t0.elapsed()
        ),
        Err(e) => eprintln!("eps={eps:.1e}: ERROR {e} after {:.1?}", t0.elapsed()),
    }
}

use pendulum_lattice::decay::{DecayFunction, SiteWindow};
use pendulum_lattice::lattice::{LatticeModel, PathSpec, PerturbationSpec};
use pendulum_lattice::melnikov::{hypothesis_survey, MelnikovConfig};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let window = Arc::new(SiteWindow::interval(-4, 8));
    let gamma = DecayFunction::new(1, 2.0, 0.0, 0.1).unwrap();
    let model = LatticeModel::new(
        window,
        gamma,
        2e-3,
        PerturbationSpec::default_family(1.0, 0.3, 0.5),
        PathSpec::line_1d(0, 3),
    )
    .unwrap();
    let cfg = MelnikovConfig { grid_x: 4, grid_h: 2, ..Default::default() };
    let t0 = Instant::now();
    let (rep, _tables) = hypothesis_survey(&model, 0, 1.0, &cfg).unwrap();
    eprintln!("pass = {}  ({:.1?})", rep.pass, t0.elapsed());
    eprintln!("{}", rep.summary());
}

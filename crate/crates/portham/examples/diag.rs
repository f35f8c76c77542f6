use nalgebra::DVector;
use portham::models::{build_timoshenko, TimoshenkoConfig};
use portham::ocp::{solve, ControlSet, OCPProblem};
use portham::sim::TimeGrid;
use portham::Error;
use std::time::Instant;

fn main() {
    env_logger::init();
    let sys = build_timoshenko(&TimoshenkoConfig::default()).unwrap();
    for profile in ["const", "linear_mix"] {
        let x0: DVector<f64> = match profile {
            "const" => DVector::from_element(sys.n(), 1.0),
            _ => {
                let mut x = DVector::zeros(sys.n());
                for f in 0..4 {
                    for i in sys.field_range(f) {
                        let z = sys.positions()[i];
                        x[i] = if f % 2 == 0 { z } else { 1.0 - z };
                    }
                }
                x
            }
        };
        let x_target = x0.clone();
        for (t, n) in [(5.0, 251usize), (10.0, 501), (20.0, 1001)] {
            let grid = TimeGrid::new(t, n).unwrap();
            let uset = ControlSet::box_uniform(2, 1e5).unwrap();
            let prob = OCPProblem::new(sys.clone(), x0.clone(), x_target.clone(), grid, uset)
                .unwrap()
                .with_terminal_tol(1e-2);
            let start = Instant::now();
            let result = match solve(&prob) {
                Ok(r) => r,
                Err(Error::NotConverged { result, .. }) => *result,
                Err(e) => {
                    println!("{profile} T={t} error: {e}");
                    continue;
                }
            };
            // field energies: coast window [T/3, 2T/3]
            let traj = &result.x_star;
            let h = sys.h();
            let field_sq = |x: &DVector<f64>, f: usize| -> f64 {
                sys.field_range(f).map(|i| x[i] * x[i]).sum::<f64>() * h
            };
            let n_nodes = grid.intervals();
            let (mut coast24, mut full24, mut coast3, mut coastn) = (0.0, 0.0, 0.0, 0usize);
            for k in 0..=n_nodes {
                let x = traj.state(k);
                let v24 = field_sq(x, 1) + field_sq(x, 3);
                full24 += v24;
                let tk = grid.node(k);
                if tk >= t / 3.0 && tk <= 2.0 * t / 3.0 {
                    coast24 += v24;
                    coast3 += field_sq(x, 2);
                    coastn += 1;
                }
            }
            let full_mean = full24 / (n_nodes + 1) as f64;
            let coast_mean = coast24 / coastn as f64;
            let coast3_mean = coast3 / coastn as f64;
            let x3_at0 = field_sq(traj.state(0), 2);
            println!(
                "{profile:10} T={t:4} N={n:4} {:5.1?} conv={} term={:.2e} cost={:.4e} |u|max={:.1e} | coast24/full24={:.4} coast3/x3(0)={:.3}",
                start.elapsed(), result.converged, result.terminal_error, result.cost_equiv,
                result.u_star.values().amax(),
                coast_mean / full_mean, coast3_mean / x3_at0
            );
        }
    }
}

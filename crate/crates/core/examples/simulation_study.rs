//! Sampling distribution of the variance estimator and the calibration
//! curve over replicate datasets on one design.

use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::pipeline::simulate_study;
use inspection_bl::simulator::{SystemModel, Truth};

fn main() -> inspection_bl::Result<()> {
    let mut prior = offshore_prior();
    prior.sigma_r_candidates = (2..=8).map(|k| (0.025 * k as f64).powi(2)).collect();
    let model = SystemModel::new(prior, offshore_topology())?;
    let truth = Truth {
        mu_wx: 0.01,
        sigma_r: 0.01,
    };
    let study = simulate_study(&model, &offshore_design(), truth, 10, true)?;
    let (m, lo, hi) = study.estimator_summary();
    println!("E(M(W_X)) over replicates: mean {:.4}^2, 5% {:.4}^2, 95% {:.4}^2", m.sqrt(), lo.sqrt(), hi.sqrt());
    if let Some(curve) = &study.curve {
        for r in &curve.rows {
            let (a, b) = r.band.unwrap_or((r.h, r.h));
            println!("sigma_r {:.3}^2: H {:.3} [{a:.3}, {b:.3}]", r.sigma_r.sqrt(), r.h);
        }
    }
    Ok(())
}

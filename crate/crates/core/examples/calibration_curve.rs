//! Choosing the local-effect variance by the discrepancy-ratio curve.

use inspection_bl::calibration::{calibrate, h_curve};
use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::simulator::{simulate_dataset, SystemModel, Truth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inspection_bl::Result<()> {
    let mut prior = offshore_prior();
    prior.sigma_r_candidates = (1..=8).map(|k| (0.05 * k as f64).powi(2)).collect();
    let model = SystemModel::new(prior, offshore_topology())?;
    let truth = Truth {
        mu_wx: 0.01,
        sigma_r: 0.2f64.powi(2),
    };
    let (data, _) = simulate_dataset(&model, &offshore_design(), &truth, &mut ChaCha8Rng::seed_from_u64(9))?;

    let result = calibrate(&model, &data)?;
    println!("sigma_r      M(W_X)    H");
    for row in h_curve(&result) {
        println!("{:.4}^2  {:.5}  {:.3}", row.sigma_r.sqrt(), row.adjusted_mu_wx, row.h);
    }
    let sel = result.selected_row();
    println!("selected {:.3}^2 (truth 0.200^2)", sel.sigma_r.sqrt());
    Ok(())
}

//! Forecasting minimum thickness and the month it first drops below the
//! critical value, with and without variance learning.

use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::forecast::compare_with_without_variance_learning;
use inspection_bl::simulator::{simulate_dataset, trajectory_targets, Quantity, SystemModel, Truth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inspection_bl::Result<()> {
    let mut prior = offshore_prior();
    prior.critical_thickness = 7.0;
    let model = SystemModel::new(prior.clone(), offshore_topology())?;
    let truth = Truth {
        mu_wx: 0.01,
        sigma_r: 16.0 * prior.sigma_r,
    };
    let (data, _) = simulate_dataset(&model, &offshore_design(), &truth, &mut ChaCha8Rng::seed_from_u64(4))?;

    let components = [0, 17, 34, 51];
    let targets = trajectory_targets(Quantity::Zmin, &components, 83 + 60);
    let cmp = compare_with_without_variance_learning(&model, &data, &targets)?;
    if let Some(c) = &cmp.calibration {
        println!("learned sigma_r {:.3}^2 (prior {:.3}^2)", c.selected_row().sigma_r.sqrt(), prior.sigma_r.sqrt());
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |m| format!("{m:.1}"));
    println!("component  earliest/mean crossing without  with learning");
    for (a, b) in cmp.life_without.rows.iter().zip(&cmp.life_with.rows) {
        println!(
            "{:9}  {:>7} / {:<7}              {:>7} / {:<7}",
            a.component,
            fmt(a.lower),
            fmt(a.mean),
            fmt(b.lower),
            fmt(b.mean)
        );
    }
    println!("bands: {}", cmp.life_with.convention);
    Ok(())
}

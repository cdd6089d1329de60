//! Learning the population evolution variance from irregular inspections.

use inspection_bl::calibration::learn_wx;
use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::simulator::{estimate_moments, simulate_dataset, SystemModel, Truth};
use inspection_bl::variance_learning::{build_scheme, compute_dbar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inspection_bl::Result<()> {
    let prior = offshore_prior();
    let model = SystemModel::new(prior.clone(), offshore_topology())?;
    let design = offshore_design();
    let truth = Truth {
        mu_wx: 0.02,
        sigma_r: prior.sigma_r,
    };
    let (data, _) = simulate_dataset(&model, &design, &truth, &mut ChaCha8Rng::seed_from_u64(3))?;

    let scheme = build_scheme(&data, prior.hyper.lambda);
    let dbar = compute_dbar(&data, &scheme);
    println!(
        "{} components contribute {} difference terms ({} skipped)",
        scheme.components().len(),
        scheme.entries().len(),
        scheme.skipped().len()
    );
    println!("D-bar of the first component: {:.4}", dbar[0]);

    let moments = estimate_moments(&model, &design, &[], prior.ensemble_size, prior.rng_seed)?;
    let wx = learn_wx(&data, &moments, &prior.hyper)?;
    println!(
        "M(W_X): prior {:.4}, adjusted {:.4} (truth {:.4}), adjusted sd {:.4}",
        wx.prior_mean,
        wx.adjusted_mean,
        truth.mu_wx,
        wx.adjusted_variance.sqrt()
    );
    Ok(())
}

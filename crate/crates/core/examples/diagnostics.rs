//! Checking data against the prior and finding a bad reading.

use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::diagnostics::{data_discrepancy, Grouping, DEFAULT_THRESHOLD};
use inspection_bl::simulator::{estimate_moments, simulate_dataset, SystemModel, Truth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inspection_bl::Result<()> {
    let prior = offshore_prior();
    let model = SystemModel::new(prior.clone(), offshore_topology())?;
    let design = offshore_design();
    let truth = Truth {
        mu_wx: prior.hyper.mu_wx,
        sigma_r: prior.sigma_r,
    };
    let (data, _) = simulate_dataset(&model, &design, &truth, &mut ChaCha8Rng::seed_from_u64(5))?;
    let m = estimate_moments(&model, &design, &[], prior.ensemble_size, prior.rng_seed)?;

    // A transcription error: 2 mm too thin.
    let mut y: Vec<f64> = data.records().iter().map(|r| r.thickness).collect();
    y[40] -= 2.0;
    let bad = data.records()[40];
    println!("corrupted reading: c{} t{}", bad.component, bad.time);
    let data = data.with_values(&y)?;

    for g in [Grouping::Global, Grouping::PerComponent, Grouping::PerObservation] {
        let report = data_discrepancy(&data, &m, g, DEFAULT_THRESHOLD)?;
        println!("{g:?}: {} groups, {} flagged", report.rows.len(), report.flagged().count());
        for row in report.flagged().take(8) {
            println!("  {} -> {:.2}", row.group, row.value.unwrap_or(f64::NAN));
        }
    }
    Ok(())
}

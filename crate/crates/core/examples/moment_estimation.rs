//! Prior moments of the observations and of forecast targets, including
//! months beyond the data.

use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::simulator::{estimate_moments, forecast_extend, Quantity, SystemModel, Target};

fn main() -> inspection_bl::Result<()> {
    let mut prior = offshore_prior();
    prior.ensemble_size = 500;
    let model = SystemModel::new(prior, offshore_topology())?;
    let design = forecast_extend(&offshore_design(), 24);
    let targets = [
        Target::new(Quantity::Zmin, 5, 83),
        Target::new(Quantity::Zmin, 5, 107),
        Target::new(Quantity::Rate, 5, 107),
    ];
    let m = estimate_moments(&model, &design, &targets, 500, 42)?;

    println!("{} observations, {} realizations", m.e_y.len(), m.n_realizations);
    println!("first observation: mean {:.3} mm, sd {:.3} mm", m.e_y[0], m.var_y[(0, 0)].sqrt());
    for (k, t) in targets.iter().enumerate() {
        let strongest = m.cov_targets_y.row(k).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        println!(
            "{} c{} month {}: mean {:.3}, sd {:.3}, largest |cov| with data {:.2e}",
            t.quantity.name(),
            t.component,
            t.time,
            m.e_targets[k],
            m.var_targets[k].sqrt(),
            strongest
        );
    }
    if let Some(d) = &m.dbar {
        println!("D-bar over {} components, E = {:.4} for the first", d.mean.len(), d.mean[0]);
    }
    Ok(())
}

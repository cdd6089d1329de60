//! One forward run of the corrosion model on the offshore design, with the
//! trajectories written as `t,c,X,Zmin` CSV.

use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::simulator::{simulate_realization, SystemModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inspection_bl::Result<()> {
    let model = SystemModel::new(offshore_prior(), offshore_topology())?;
    let design = offshore_design();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let real = simulate_realization(&model, &design, &mut rng);

    println!("drawn M(W_X) = {:.5}", real.variances.population_mean);
    for c in [0, 20, 40] {
        let last = real.horizon();
        println!(
            "component {c}: X {:.3} -> {:.3} mm, true minimum at month {last} {:.3} mm",
            real.x[(c, 0)],
            real.x[(c, last - 1)],
            real.zmin[(c, last - 1)]
        );
    }
    let mut out = Vec::new();
    real.write_csv(&mut out, model.topology()).expect("writing to memory");
    println!("{} CSV rows", out.iter().filter(|&&b| b == b'\n').count() - 1);
    Ok(())
}

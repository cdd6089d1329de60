//! Writing and reading topology, inspection and configuration files, then
//! running the full analysis as the command line does.

use std::fs;

use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology};
use inspection_bl::io::{emit_inspections, emit_topology, load_inputs};
use inspection_bl::pipeline::run_analysis;
use inspection_bl::simulator::{simulate_dataset, SystemModel, Truth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inspection_bl::Result<()> {
    let dir = std::env::temp_dir().join("inspection-bl-example");
    fs::create_dir_all(&dir).expect("temp dir");
    let topo = offshore_topology();
    let prior = offshore_prior();
    let model = SystemModel::new(prior.clone(), topo.clone())?;
    let truth = Truth {
        mu_wx: 0.01,
        sigma_r: 0.01,
    };
    let (data, _) = simulate_dataset(&model, &offshore_design(), &truth, &mut ChaCha8Rng::seed_from_u64(6))?;
    fs::write(dir.join("topology.csv"), emit_topology(&topo, &prior.x0, &prior.alpha0)).expect("write");
    fs::write(dir.join("inspections.csv"), emit_inspections(&data, &topo)).expect("write");
    fs::write(
        dir.join("run.toml"),
        "topology = \"topology.csv\"\ninspections = \"inspections.csv\"\norigin_month = \"1998-01\"\n\
         horizon = 83\nextend_months = 24\nmu_WX = 0.01\nsigma_WX = 1e-3\ngamma_WX = 5e-4\nlambda = 0.02\n\
         sigma_y = 0.0256\nsigma_r = 0.01\nrho0 = 0.2\nrhoC = 0.5\nrhoD = 0.3\nrealizations = 400\n",
    )
    .expect("write");

    let inputs = load_inputs(&dir.join("run.toml"))?;
    println!("read {} inspections of {} components", inputs.dataset.len(), inputs.topology.len());
    let analysis = run_analysis(&inputs)?;
    let out = analysis.outputs();
    out.commit(&dir.join("out"))?;
    for (name, text) in &out.files {
        println!("{name}: {} lines", text.lines().count());
    }
    print!("{}", analysis.summary());
    Ok(())
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! A failing criterion is reported, not turned into a test failure; only an
//! internal error (panic) makes the target fail.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use inspection_bl::bayes_linear::{whitening_factor, DEFAULT_RTOL};
use inspection_bl::design::{offshore_design, offshore_prior, offshore_topology, OFFSHORE_HORIZON};
use inspection_bl::diagnostics::{data_discrepancy, Grouping, DEFAULT_THRESHOLD};
use inspection_bl::io::{emit_inspections, parse_inspections_str, MonthMapping, RunInputs};
use inspection_bl::pipeline::{run_analysis, simulate_study};
use inspection_bl::simulator::{
    derive_seed, estimate_moments, simulate_dataset, simulate_realization, thickness_kernel, EnsembleSampler, Quantity,
    SystemModel, Truth,
};
use inspection_bl::stats::{mean, variance};
use inspection_bl::system::{InspectionDataset, PriorSpecification, SystemTopology};
use inspection_bl::variance_learning::{build_scheme, compute_dbar, expected_dbar, lag_weight};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const TRUTH: Truth = Truth {
    mu_wx: 0.01,
    sigma_r: 0.01,
};

fn offshore_model(prior: PriorSpecification) -> SystemModel {
    SystemModel::new(prior, offshore_topology()).unwrap()
}

/// Estimator distribution on the offshore design.
fn estimator_reproduction() -> Outcome {
    let model = offshore_model(offshore_prior());
    let study = simulate_study(&model, &offshore_design(), TRUTH, 50, false).unwrap();
    let (m, lo, hi) = study.estimator_summary();
    let (p_lo, p_hi) = (0.0872f64.powi(2), 0.1128f64.powi(2));
    let mean_ok = (0.095f64.powi(2)..=0.104f64.powi(2)).contains(&m);
    let within = |v: f64, p: f64| (v - p).abs() <= 0.2 * p;
    let pass = mean_ok && within(lo, p_lo) && within(hi, p_hi);
    outcome(
        pass,
        format!(
            "mean {m:.5} ({:.4}^2, band [0.095^2, 0.104^2] {}), 5% {lo:.5} ({:.4}^2) vs {p_lo:.5} +/-20% {}, \
             95% {hi:.5} ({:.4}^2) vs {p_hi:.5} +/-20% {}; on the sd scale 5% {:.1}% and 95% {:.1}% off",
            m.sqrt(),
            if mean_ok { "ok" } else { "missed" },
            lo.sqrt(),
            if within(lo, p_lo) { "ok" } else { "missed" },
            hi.sqrt(),
            if within(hi, p_hi) { "ok" } else { "missed" },
            100.0 * (lo.sqrt() / 0.0872 - 1.0),
            100.0 * (hi.sqrt() / 0.1128 - 1.0),
        ),
    )
}

/// Regular inspection reduces to the plain second difference.
fn regular_reduction() -> Outcome {
    let topology = SystemTopology::from_circuit_sizes(&[3, 3]).unwrap();
    let mut prior = PriorSpecification::offshore(6, 10.0, -0.02);
    let lambda = prior.hyper.lambda;
    let horizon = 24;
    let design = InspectionDataset::design(horizon, (0..6).flat_map(|c| (1..=horizon).map(move |t| (c, t))));
    let model = SystemModel::new(prior.clone(), topology.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (data, _) = simulate_dataset(&model, &design, &TRUTH, &mut rng).unwrap();
    let scheme = build_scheme(&data, lambda);
    let dbar = compute_dbar(&data, &scheme);
    let mut exact = true;
    for c in 0..6 {
        let y: Vec<f64> = data.records().iter().filter(|r| r.component == c).map(|r| r.thickness).collect();
        let mut want = 0.0;
        for t in 2..y.len() {
            let (y1, y2) = (y[t] - y[t - 1], y[t] - y[t - 2]);
            want += (y2 - 2.0 * y1).powi(2) / (lambda + 2.0);
        }
        exact &= dbar[c] == want;
    }

    prior.sigma_r = 0.0;
    prior.sigma_y = 0.0;
    let quiet = SystemModel::new(prior.clone(), topology).unwrap();
    let m = estimate_moments(&quiet, &design, &[], 200, 5).unwrap();
    let local_zero = m.m_moments.iter().all(|mm| mm.m1_sq == 0.0 && mm.m2_sq == 0.0 && mm.m1_m2 == 0.0);
    let e = expected_dbar(&m.scheme, &prior.hyper, &m.m_moments).unwrap();
    let want = (lambda + 2.0) * prior.hyper.mu_wx;
    let worst = (0..6)
        .map(|c| {
            let per_term = e[c] / (horizon - 2) as f64 * lag_weight(1, 2, lambda);
            ((per_term - want) / want).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        exact && local_zero && worst <= 1e-12,
        format!(
            "D-bar equals (Y2 - 2Y1)^2/(lambda+2) exactly: {exact}; local moments vanish: {local_zero}; \
             per-term expectation vs (lambda+2) mu_WX: max relative error {worst:.2e}"
        ),
    )
}

struct CovarianceCheck {
    component: usize,
    observations: usize,
    sample: f64,
    target: f64,
    sample_se: f64,
    exact_se: f64,
}

/// Sample `cov(M(W_X), D̄_c)` per component from `n` realizations, with its
/// sample standard error and the exact one.
///
/// The exact standard error is `sd((M − μ)(D̄_c − E D̄_c)) / √n` in closed
/// form. Write `W_c = M·U`, the evolution part of term `i` as `√W_c·g_i` with
/// `g` Gaussian of covariance `G` (lag kernel), and the local part as `v_i`.
/// Then `D̄_c = M·U·S + 2Σ√W_c g_i v_i/K_i + L` with `S = Σ g_i²/K_i`, and
/// `E[(M−μ)²(D̄_c − E D̄_c)²] = E[a²M²]E[U²]E[S²] − 2μn²E[a²M] + μ²n²Γ
/// + E[a²M]·4Σ G_ij E[v_i v_j]/(K_i K_j) + Γ·var(L)`, `a = M − μ`, `n = T_c − 2`.
/// Lognormal moments supply `E[Mᵏ]`; the light-tailed local moments come from
/// the same simulation.
fn covariance_checks(model: &SystemModel, design: &InspectionDataset, n: u64, seed: u64) -> Vec<CovarianceCheck> {
    let hyper = model.prior().hyper;
    let lambda = hyper.lambda;
    let scheme = build_scheme(design, lambda);
    let times: BTreeSet<usize> = design.records().iter().map(|r| r.time).collect();
    let sampler = EnsembleSampler::new(model, design, &times, &BTreeSet::new(), seed).unwrap();
    let entries = scheme.entries();
    let coef = |e: &inspection_bl::variance_learning::SchemeEntry| {
        let (k, l) = (e.k as f64, e.l as f64);
        [-k, l, k - l]
    };
    let time_of = |rec: usize| design.records()[rec].time;
    let mut m = Vec::with_capacity(n as usize);
    let mut d: Vec<Vec<f64>> = vec![Vec::new(); scheme.components().len()];
    let mut local: Vec<Vec<f64>> = vec![Vec::new(); scheme.components().len()];
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); entries.len()];
    for i in 0..n {
        let draw = sampler.draw(i);
        let dbar = scheme.dbar_from_values(&sampler.observations(&draw));
        let lbar = scheme.dbar_from_values(&draw.local_obs);
        m.push(draw.variances.population_mean);
        for k in 0..dbar.len() {
            d[k].push(dbar[k]);
            local[k].push(lbar[k]);
        }
        for (j, e) in entries.iter().enumerate() {
            let a = coef(e);
            v[j].push((0..3).map(|p| a[p] * draw.local_obs[e.records[p]]).sum());
        }
    }

    let (mu, gamma) = (hyper.mu_wx, hyper.gamma_wx);
    let moment = |k: i32| mu.powi(k) * (1.0 + gamma / (mu * mu)).powi(k * (k - 1) / 2);
    let a2m2 = moment(4) - 2.0 * mu * moment(3) + mu * mu * moment(2);
    let a2m = moment(3) - 2.0 * mu * moment(2) + mu.powi(3);
    let u2 = 1.0 + (hyper.sigma_wx - gamma).max(0.0) / (gamma + mu * mu);
    let mm = mean(&m);
    scheme
        .components()
        .iter()
        .zip(scheme.observation_counts())
        .enumerate()
        .map(|(k, (&c, &tc))| {
            let md = mean(&d[k]);
            let prod: Vec<f64> = m.iter().zip(&d[k]).map(|(a, b)| (a - mm) * (b - md)).collect();
            let own: Vec<usize> = (0..entries.len()).filter(|&j| entries[j].component == c).collect();
            let g = |i: usize, j: usize| -> f64 {
                let (ei, ej) = (&entries[i], &entries[j]);
                let (ai, aj) = (coef(ei), coef(ej));
                let mut s = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        s += ai[p] * aj[q] * thickness_kernel(time_of(ei.records[p]), time_of(ej.records[q]), lambda);
                    }
                }
                s
            };
            let (mut s2, mut cross) = (0.0, 0.0);
            for &i in &own {
                for &j in &own {
                    let (gij, ki, kj) = (g(i, j), entries[i].weight, entries[j].weight);
                    s2 += 1.0 + 2.0 * gij * gij / (ki * kj);
                    let evv = mean(&v[i].iter().zip(&v[j]).map(|(x, y)| x * y).collect::<Vec<_>>());
                    cross += 4.0 * gij * evv / (ki * kj);
                }
            }
            let nc = (tc - 2) as f64;
            let second = a2m2 * u2 * s2 - 2.0 * mu * nc * nc * a2m + mu * mu * nc * nc * gamma
                + a2m * cross
                + gamma * variance(&local[k]);
            let target = nc * gamma;
            CovarianceCheck {
                component: c,
                observations: tc,
                sample: mean(&prod) * n as f64 / (n - 1) as f64,
                target,
                sample_se: (variance(&prod) / n as f64).sqrt(),
                exact_se: ((second - target * target) / n as f64).sqrt(),
            }
        })
        .collect()
}

const COVARIANCE_DESIGNS: [&[(usize, usize)]; 3] = [
    &[(0, 1), (0, 2), (0, 3), (1, 4), (1, 6), (1, 9), (1, 10), (1, 14), (3, 2), (3, 3), (3, 5)],
    &[(0, 3), (0, 6), (0, 8), (2, 1), (2, 5), (2, 6), (2, 7), (2, 20), (2, 21), (4, 30)],
    &[(1, 10), (1, 11), (1, 14), (4, 2), (4, 9), (4, 12), (4, 30), (5, 5), (5, 40)],
];

/// Sample `cov(M(W_X), D̄_c)` against `(T_c − 2)·Γ_WX` on three designs.
fn population_mean_covariance() -> Outcome {
    let topology = SystemTopology::from_circuit_sizes(&[3, 3]).unwrap();
    let model = SystemModel::new(PriorSpecification::offshore(6, 10.0, -0.02), topology).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (di, pts) in COVARIANCE_DESIGNS.iter().enumerate() {
        let design = InspectionDataset::design(40, pts.iter().copied());
        for r in covariance_checks(&model, &design, 10_000, 100 + di as u64) {
            let z = (r.sample - r.target) / r.exact_se;
            pass &= z.abs() <= 3.0;
            parts.push(format!(
                "d{}c{}(T={}): {:.3e} vs {:.3e}, {z:+.2} exact se ({:+.2} sample se)",
                di + 1,
                r.component,
                r.observations,
                r.sample,
                r.target,
                (r.sample - r.target) / r.sample_se
            ));
        }
    }
    outcome(pass, parts.join(", "))
}

/// Σ_r calibration over replicates on a grid of (0.02k)².
fn calibration_recovery() -> Outcome {
    let mut prior = offshore_prior();
    prior.sigma_r_candidates = (2..=10).map(|k| (0.02 * k as f64).powi(2)).collect();
    let truth_idx = 3;
    let model = offshore_model(prior);
    let study = simulate_study(&model, &offshore_design(), TRUTH, 20, true).unwrap();
    let cals: Vec<_> = study.replicates.iter().map(|r| r.calibration.as_ref().unwrap()).collect();
    let near = cals.iter().filter(|c| c.selected.abs_diff(truth_idx) <= 1).count();
    let h_truth = mean(&cals.iter().map(|c| c.rows[truth_idx].h).collect::<Vec<_>>());
    let share = near as f64 / cals.len() as f64;
    let picks: Vec<String> = cals.iter().map(|c| format!("{:.2}", c.selected_row().sigma_r.sqrt())).collect();
    outcome(
        share >= 0.7 && (0.8..=1.2).contains(&h_truth),
        format!(
            "selected within one step of 0.1^2 in {near}/20 ({:.0}%, need 70%); mean H at truth {h_truth:.3} \
             (need [0.8, 1.2]); selected sd by replicate [{}]",
            100.0 * share,
            picks.join(" ")
        ),
    )
}

/// Discrepancy diagnostics on data drawn from the prior itself, plus an
/// injected outlier; data with `M(W_X)` fixed at its prior mean for reference.
fn diagnostics_calibration() -> Outcome {
    let prior = offshore_prior();
    let model = offshore_model(prior.clone());
    let design = offshore_design();
    let m = estimate_moments(&model, &design, &[], prior.ensemble_size, prior.rng_seed).unwrap();
    let at_mean = Truth {
        mu_wx: prior.hyper.mu_wx,
        sigma_r: prior.sigma_r,
    };
    let global = |d: &InspectionDataset| {
        data_discrepancy(d, &m, Grouping::Global, DEFAULT_THRESHOLD).unwrap().rows[0].value.unwrap()
    };
    let (mut h, mut h_fixed) = (Vec::new(), Vec::new());
    let (mut clean_flags, mut clean_total, mut fixed_flags) = (0, 0, 0);
    let mut outlier_flagged = true;
    for r in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prior.rng_seed, 0xD1A6 + r));
        let real = simulate_realization(&model, &design, &mut rng);
        let data = design.with_values(&real.y).unwrap();
        h.push(global(&data));
        let i = (r as usize * 37) % design.len();
        let mut y = real.y.clone();
        y[i] = m.e_y[i] - 10.0 * m.var_y[(i, i)].sqrt();
        let dirty = data.with_values(&y).unwrap();
        let rep = data_discrepancy(&dirty, &m, Grouping::PerObservation, DEFAULT_THRESHOLD).unwrap();
        outlier_flagged &= rep.rows[i].flagged;
        clean_flags += rep.rows.iter().enumerate().filter(|(j, row)| *j != i && row.flagged).count();
        clean_total += rep.rows.len() - 1;

        let (fixed, _) = simulate_dataset(&model, &design, &at_mean, &mut rng).unwrap();
        h_fixed.push(global(&fixed));
        let rep = data_discrepancy(&fixed, &m, Grouping::PerObservation, DEFAULT_THRESHOLD).unwrap();
        fixed_flags += rep.flagged().count();
    }
    let mh = mean(&h);
    let white = whitening_factor(&m.var_y, DEFAULT_RTOL).unwrap();
    let long: Vec<f64> = (0..1000u64)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prior.rng_seed, 0x10_0000 + r));
            let y = nalgebra::DVector::from_vec(simulate_realization(&model, &design, &mut rng).y);
            white.whiten(&(y - &m.e_y)).norm_squared() / white.rank() as f64
        })
        .collect();
    let unflagged = 1.0 - clean_flags as f64 / clean_total as f64;
    outcome(
        (mh - 1.0).abs() <= 0.1 && outlier_flagged && unflagged >= 0.95,
        format!(
            "global discrepancy mean {mh:.3} (replicate sd {:.3}); 10-sigma outlier flagged in every replicate: \
             {outlier_flagged}; clean observations unflagged {:.1}%; with M(W_X) fixed at its prior mean: \
             mean {:.3} (sd {:.3}), unflagged {:.1}%; 1000 prior-predictive replicates: mean {:.3} +/- {:.3}",
            variance(&h).sqrt(),
            100.0 * unflagged,
            mean(&h_fixed),
            variance(&h_fixed).sqrt(),
            100.0 * (1.0 - fixed_flags as f64 / (50 * design.len()) as f64),
            mean(&long),
            (variance(&long) / long.len() as f64).sqrt(),
        ),
    )
}

/// Randomised Bayes linear algebra properties up to dimension 50.
fn algebra_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut cases = 0;
    for seed in 0..200u64 {
        let n = 1 + (seed as usize * 7) % 50;
        let k = 1 + (seed as usize * 13) % n;
        let nb = 1 + (seed as usize * 5) % 25;
        let nd = 1 + (seed as usize * 11) % 25;
        let checks = [
            ("penrose", common::penrose(seed, n, k)),
            ("monotone", common::monotone(seed, nb, nd, 1 + (seed as usize * 3) % 50)),
            ("no-op", common::no_op(seed, nb, nd)),
            ("self-adjustment", common::self_adjustment(seed, n)),
        ];
        for (name, r) in checks {
            cases += 1;
            if let Err(e) = r {
                failures.push(format!("{name} seed {seed}: {e}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{cases} randomized cases (dimensions 1..50) satisfy all four properties")
        } else {
            failures.join("; ")
        },
    )
}

/// Variance learning on data whose local variance is 16 times the prior's.
fn learning_effect() -> Outcome {
    let prior = offshore_prior();
    let model = offshore_model(prior.clone());
    let truth = Truth {
        mu_wx: prior.hyper.mu_wx,
        sigma_r: 16.0 * prior.sigma_r,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prior.rng_seed, 0x16));
    let (data, _) = simulate_dataset(&model, &offshore_design(), &truth, &mut rng).unwrap();
    let extend = 24;
    let inputs = RunInputs {
        topology: offshore_topology(),
        dataset: data,
        prior: prior.clone(),
        extend_months: extend,
        threshold: DEFAULT_THRESHOLD,
    };
    let a = run_analysis(&inputs).unwrap();
    let selected = a.calibration.as_ref().map_or(prior.sigma_r, |c| c.selected_row().sigma_r);
    let last = OFFSHORE_HORIZON + extend;
    let width = |b: &inspection_bl::forecast::AdjustedBelief, t: usize| -> Vec<f64> {
        b.beliefs
            .iter()
            .filter(|x| x.target.quantity == Quantity::Zmin && x.target.time == t)
            .map(|x| {
                let (lo, _, hi) = x.band();
                hi - lo
            })
            .collect()
    };
    let wider_share = |t: usize| {
        let (w0, w1) = (width(&a.without, t), width(&a.with, t));
        w0.iter().zip(&w1).filter(|(a, b)| b > a).count() as f64 / w0.len() as f64
    };
    let censor = (last + 1) as f64;
    let crossing = |e: &inspection_bl::forecast::RemnantLifeEstimate| {
        mean(&e.rows.iter().map(|r| r.lower.unwrap_or(censor)).collect::<Vec<_>>())
    };
    let (c0, c1) = (crossing(&a.life_without), crossing(&a.life_with));
    let wider = wider_share(last);
    outcome(
        selected > prior.sigma_r && wider >= 0.9 && c1 < c0,
        format!(
            "selected sigma_r {selected:.4} ({:.3}^2) vs prior {:.4}; Zmin band wider with learning at month {last} \
             for {:.0}% of components (at month {OFFSHORE_HORIZON}: {:.0}%); mean lower-band crossing of {} mm \
             (censored at {censor}) {c1:.2} with learning vs {c0:.2} without",
            selected.sqrt(),
            prior.sigma_r,
            100.0 * wider,
            100.0 * wider_share(OFFSHORE_HORIZON),
            prior.critical_thickness,
        ),
    )
}

/// Identical seeds give identical outputs; inspection files round-trip.
fn determinism() -> Outcome {
    let mut prior = offshore_prior();
    prior.ensemble_size = 300;
    prior.sigma_r_candidates = vec![0.0025, 0.01, 0.04];
    let model = offshore_model(prior.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (data, _) = simulate_dataset(&model, &offshore_design(), &TRUTH, &mut rng).unwrap();
    let inputs = RunInputs {
        topology: offshore_topology(),
        dataset: data.clone(),
        prior,
        extend_months: 12,
        threshold: DEFAULT_THRESHOLD,
    };
    let same_analysis = run_analysis(&inputs).unwrap().outputs() == run_analysis(&inputs).unwrap().outputs();
    let s1 = simulate_study(&model, &offshore_design(), TRUTH, 3, true).unwrap().outputs();
    let s2 = simulate_study(&model, &offshore_design(), TRUTH, 3, true).unwrap().outputs();
    let topo = offshore_topology();
    let mapping = MonthMapping {
        origin: None,
        horizon: Some(OFFSHORE_HORIZON),
    };
    let back = parse_inspections_str(&emit_inspections(&data, &topo), "mem", &topo, mapping).unwrap();
    let round_trip = back == data;
    outcome(
        same_analysis && s1 == s2 && round_trip,
        format!(
            "analysis outputs identical: {same_analysis}; study outputs identical: {}; inspection round-trip: \
             {round_trip}",
            s1 == s2
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("estimator reproduction", estimator_reproduction),
        ("regular-inspection reduction", regular_reduction),
        ("population-mean covariance oracle", population_mean_covariance),
        ("calibration recovery", calibration_recovery),
        ("diagnostics calibration", diagnostics_calibration),
        ("Bayes linear algebra properties", algebra_suite),
        ("variance-learning effect", learning_effect),
        ("determinism and round-trip", determinism),
    ];
    let mut passed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        passed += o.pass as usize;
        println!(
            "criterion {} {name}: {} ({:.1}s) {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {passed}/{} criteria pass", criteria.len());
}

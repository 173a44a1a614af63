// temporary diagnostics; removed before release

use hiertmle::data::{build_weights, CommunityWeightPolicy, ObsWeightPolicy};
use hiertmle::density::{BinMethod, BinningConfig};
use hiertmle::formula::Formula;
use hiertmle::hierarchy::{run, CommunityStep, EstimationConfig, StrategyConfig};
use hiertmle::intervention::McConfig;
use hiertmle::sim::{continuous_sample_shift_intervention, gen_continuous_exposure_sample};

#[test]
fn debug_iptw_h() {
    let ds = gen_continuous_exposure_sample(5000, 3003, 0).unwrap();
    let weights = build_weights(
        &ds,
        ObsWeightPolicy::EqualWithinPop,
        CommunityWeightPolicy::SizeCommunity,
        None,
        None,
    )
    .unwrap();
    let gform = Formula::parse("A ~ W1 + W3 * W4").unwrap();
    let cfg = EstimationConfig {
        interventions: vec![continuous_sample_shift_intervention(2.0, 10.0)],
        hform_g0: Some(gform.clone()),
        hform_gstar: Some(gform),
        binning: BinningConfig {
            method: BinMethod::EqualMass,
            nbins: Some(5),
            max_n_per_bin: 5000,
            ..Default::default()
        },
        mc: McConfig { n_sims: 1, seed: 42 },
        ..EstimationConfig::default()
    };
    let report = run(
        &ds,
        &weights,
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap();
    let r = report.single().unwrap();
    let ir = &r.interventions[0];
    println!("estimates: {:?}", ir.estimates);
    println!("diag: {:?}", ir.diagnostics);
    println!("epsilon: {} converged {}", ir.epsilon, ir.fluctuation_converged);
    let a = ds.frame().column("A").unwrap();
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amean = a.iter().sum::<f64>() / a.len() as f64;
    println!("A: min {amin:.3} mean {amean:.3} max {amax:.3}");
    let y = ds.frame().column("Y").unwrap();
    println!("Y mean: {:.4}", y.iter().sum::<f64>() / y.len() as f64);
}

#[test]
#[ignore]
fn debug_sim1_bias_levels() {
    use hiertmle::sim::{default_battery, run_study, DgpSpec, Study};
    let dgp = DgpSpec::sim1(1000, false, 5005);
    let full = default_battery(Study::Sim1Stoch);
    let battery = vec![full[0].clone(), full[2].clone()];
    let result = run_study(&dgp, 40, &battery, None, 40_000, false).unwrap();
    println!("truth: {}", result.metrics.truth);
    for row in &result.metrics.rows {
        println!(
            "{}: mean {:.5} bias*100 {:+.3} mean_se*100 {:.3} cover {:.3}",
            row.estimator,
            row.mean_estimate,
            row.bias * 100.0,
            row.mean_se * 100.0,
            row.coverage
        );
    }
}

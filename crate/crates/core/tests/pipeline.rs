//! End-to-end estimation pipeline checks: strategy consistency, the
//! savetime shortcut, fitted-density reuse, deterministic-outcome masking,
//! and contrast behavior.

use hiertmle::data::{build_weights, CommunityWeightPolicy, HierDataset, NodeRoles, ObsWeightPolicy};
use hiertmle::density::BinningConfig;
use hiertmle::formula::Formula;
use hiertmle::frame::Frame;
use hiertmle::hierarchy::{run, CommunityStep, EstimationConfig, RunOutput, StrategyConfig};
use hiertmle::intervention::{InterventionKind, InterventionSpec, McConfig};
use hiertmle::rng::{substream, Domain};
use hiertmle::tmle::TargetMethod;
use rand::Rng;

fn binary_toy(n: usize, seed: u64, clustered: bool) -> HierDataset {
    let mut rng = substream(seed, Domain::Dgp, 0, 0);
    let mut w = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for i in 0..n {
        let wi = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let pa = 0.25 + 0.5 * wi;
        let ai = if rng.random::<f64>() < pa { 1.0 } else { 0.0 };
        let py = 0.2 + 0.3 * ai + 0.25 * wi;
        let yi = if rng.random::<f64>() < py { 1.0 } else { 0.0 };
        w.push(wi);
        a.push(ai);
        y.push(yi);
        keys.push(format!("c{i}"));
    }
    let mut frame = Frame::new();
    frame.push_column("Y", y).unwrap();
    frame.push_column("A", a).unwrap();
    frame.push_column("W", w).unwrap();
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: vec!["W".into()],
        community_id: clustered.then(|| "id".into()),
        ynode_det: None,
    };
    HierDataset::new(frame, roles, clustered.then_some(keys)).unwrap()
}

fn default_weights(ds: &HierDataset) -> hiertmle::WeightScheme {
    build_weights(
        ds,
        ObsWeightPolicy::EqualWithinPop,
        CommunityWeightPolicy::SizeCommunity,
        None,
        None,
    )
    .unwrap()
}

fn static_pair() -> Vec<InterventionSpec> {
    vec![
        InterventionSpec::constant("gstar1", vec![1.0]),
        InterventionSpec::constant("gstar2", vec![0.0]),
    ]
}

#[test]
fn singleton_communities_match_flat_analysis() {
    // N_j = 1 for every community: community_level must equal no_community
    let flat = binary_toy(300, 5, false);
    let clustered = binary_toy(300, 5, true);
    let cfg = EstimationConfig {
        interventions: static_pair(),
        ..EstimationConfig::default()
    };
    let flat_report = run(
        &flat,
        &default_weights(&flat),
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap();
    let clus_report = run(
        &clustered,
        &default_weights(&clustered),
        &StrategyConfig::new(CommunityStep::CommunityLevel),
        &cfg,
    )
    .unwrap();
    let (a, b) = (flat_report.single().unwrap(), clus_report.single().unwrap());
    for (x, y) in a.interventions.iter().zip(&b.interventions) {
        assert!((x.estimates.tmle - y.estimates.tmle).abs() < 1e-12);
        assert!((x.estimates.iptw - y.estimates.iptw).abs() < 1e-12);
        assert!((x.estimates.gcomp - y.estimates.gcomp).abs() < 1e-12);
    }
    let (ia, ib) = (a.ate.as_ref().unwrap(), b.ate.as_ref().unwrap());
    assert!((ia.estimates.tmle - ib.estimates.tmle).abs() < 1e-12);

    // individual_level also coincides when every community is a singleton
    let ind_report = run(
        &clustered,
        &default_weights(&clustered),
        &StrategyConfig::new(CommunityStep::IndividualLevel),
        &cfg,
    )
    .unwrap();
    let c = ind_report.single().unwrap();
    assert!(
        (a.ate.as_ref().unwrap().estimates.tmle - c.ate.as_ref().unwrap().estimates.tmle).abs()
            < 1e-10
    );
}

#[test]
fn same_intervention_contrast_is_exactly_zero() {
    let ds = binary_toy(200, 7, false);
    let cfg = EstimationConfig {
        interventions: vec![
            InterventionSpec::constant("gstar1", vec![1.0]),
            InterventionSpec::constant("gstar2", vec![1.0]),
        ],
        ..EstimationConfig::default()
    };
    let out = run(
        &ds,
        &default_weights(&ds),
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap();
    let ate = out.single().unwrap().ate.clone().unwrap();
    assert_eq!(ate.estimates.tmle, 0.0);
    assert_eq!(ate.estimates.iptw, 0.0);
    assert_eq!(ate.estimates.gcomp, 0.0);
    assert_eq!(ate.vars.tmle, 0.0);
}

#[test]
fn savetime_shortcut_equals_full_run_with_observed_gstar() {
    let ds = binary_toy(250, 9, false);
    let weights = default_weights(&ds);
    let strategy = StrategyConfig::new(CommunityStep::NoCommunity);

    // shortcut: no intervention, intercept targeting, savetime on
    let shortcut_cfg = EstimationConfig {
        savetime: true,
        target: TargetMethod::TmleIntercept,
        ..EstimationConfig::default()
    };
    let shortcut = run(&ds, &weights, &strategy, &shortcut_cfg).unwrap();
    let sr = shortcut.single().unwrap();
    assert!(sr.interventions[0].diagnostics.g0_models.is_none());
    assert!(sr.interventions[0].diagnostics.gstar_models.is_none());

    // full pipeline with g* = the observed exposures
    let observed_a = ds.frame().column("A").unwrap().to_vec();
    let full_cfg = EstimationConfig {
        interventions: vec![InterventionSpec {
            name: "gstar1".into(),
            kind: InterventionKind::Table {
                columns: vec![observed_a],
            },
        }],
        target: TargetMethod::TmleIntercept,
        ..EstimationConfig::default()
    };
    let full = run(&ds, &weights, &strategy, &full_cfg).unwrap();
    let fr = full.single().unwrap();
    assert!(fr.interventions[0].diagnostics.g0_models.is_some());

    type Get = fn(&hiertmle::tmle::InterventionReport) -> f64;
    let checks: [(Get, &str); 3] = [
        (|r| r.estimates.tmle, "tmle"),
        (|r| r.estimates.iptw, "iptw"),
        (|r| r.estimates.gcomp, "gcomp"),
    ];
    for (get, name) in checks {
        let d = (get(&sr.interventions[0]) - get(&fr.interventions[0])).abs();
        assert!(d < 1e-12, "{name} differs by {d}");
    }
}

#[test]
fn fitted_density_reuse_reproduces_report() {
    let ds = binary_toy(300, 11, false);
    let weights = default_weights(&ds);
    let strategy = StrategyConfig::new(CommunityStep::NoCommunity);
    let cfg = EstimationConfig {
        interventions: static_pair(),
        ..EstimationConfig::default()
    };
    let first = run(&ds, &weights, &strategy, &cfg).unwrap();

    // refit the densities standalone and reuse them
    let hform = Formula::parse("A ~ W").unwrap();
    let g0 = hiertmle::density::fit_density(
        ds.frame(),
        &["A".to_string()],
        None,
        &hform,
        Some(&weights.obs_weights),
        &BinningConfig::default(),
        hiertmle::density::DEFAULT_LBOUND,
    )
    .unwrap();
    let json = g0.to_json().unwrap();
    let reloaded = hiertmle::FittedDensity::from_json(&json).unwrap();

    let reuse_cfg = EstimationConfig {
        interventions: static_pair(),
        reuse_g0: Some(reloaded),
        ..EstimationConfig::default()
    };
    let second = run(&ds, &weights, &strategy, &reuse_cfg).unwrap();
    let (a, b) = (first.single().unwrap(), second.single().unwrap());
    for (x, y) in a.interventions.iter().zip(&b.interventions) {
        assert_eq!(x.estimates.tmle, y.estimates.tmle);
        assert_eq!(x.estimates.iptw, y.estimates.iptw);
        assert_eq!(x.estimates.gcomp, y.estimates.gcomp);
    }
}

#[test]
fn reuse_with_mismatched_columns_errors() {
    let ds = binary_toy(100, 13, false);
    let weights = default_weights(&ds);
    let mut frame = Frame::new();
    frame
        .push_column("Other", vec![0.0, 1.0, 0.5, 0.25])
        .unwrap();
    frame.push_column("A", vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let fd = hiertmle::density::fit_density(
        &frame,
        &["A".to_string()],
        None,
        &Formula::parse("A ~ Other").unwrap(),
        None,
        &BinningConfig::default(),
        hiertmle::density::DEFAULT_LBOUND,
    )
    .unwrap();
    let cfg = EstimationConfig {
        interventions: static_pair(),
        reuse_g0: Some(fd),
        ..EstimationConfig::default()
    };
    let err = run(
        &ds,
        &weights,
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap_err();
    assert!(err.to_string().contains("Other"), "{err}");
}

#[test]
fn det_masked_rows_are_excluded_from_targeting() {
    // duplicate dataset where the det-masked copy carries wild outcomes:
    // estimates must match the analysis that never saw those rows
    let base = binary_toy(150, 17, false);
    let n = base.n_obs();
    let mut frame = Frame::new();
    let mut y = base.frame().column("Y").unwrap().to_vec();
    let mut a = base.frame().column("A").unwrap().to_vec();
    let mut w = base.frame().column("W").unwrap().to_vec();
    let mut det = vec![0.0; n];
    // poisoned rows
    for i in 0..30 {
        y.push(1.0);
        a.push(i as f64 % 2.0);
        w.push(1.0);
        det.push(1.0);
    }
    frame.push_column("Y", y).unwrap();
    frame.push_column("A", a).unwrap();
    frame.push_column("W", w).unwrap();
    frame.push_column("D", det).unwrap();
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: vec!["W".into()],
        community_id: None,
        ynode_det: Some("D".into()),
    };
    let masked = HierDataset::new(frame, roles, None).unwrap();

    let cfg = EstimationConfig {
        interventions: static_pair(),
        ..EstimationConfig::default()
    };
    let masked_out = run(
        &masked,
        &default_weights(&masked),
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap();
    let clean_out = run(
        &base,
        &default_weights(&base),
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap();
    let (m, c) = (masked_out.single().unwrap(), clean_out.single().unwrap());
    // same Y bounds in both runs (binary outcome), so estimates must agree
    // to float noise even though the masked run carries poisoned rows
    let d = (m.ate.as_ref().unwrap().estimates.tmle - c.ate.as_ref().unwrap().estimates.tmle).abs();
    assert!(d < 1e-9, "det rows leaked into estimation: {d}");
    assert_eq!(m.ate.as_ref().unwrap().ic.tmle.len(), 150);
}

#[test]
fn per_community_single_community_matches_flat() {
    let flat = binary_toy(120, 19, false);
    // one community holding every row
    let mut frame = Frame::new();
    for (name, col) in flat.frame().iter() {
        frame.push_column(name, col.to_vec()).unwrap();
    }
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: vec!["W".into()],
        community_id: Some("id".into()),
        ynode_det: None,
    };
    let one = HierDataset::new(frame, roles, Some(vec!["all".into(); 120])).unwrap();

    let cfg = EstimationConfig {
        interventions: static_pair(),
        ..EstimationConfig::default()
    };
    let flat_out = run(
        &flat,
        &default_weights(&flat),
        &StrategyConfig::new(CommunityStep::NoCommunity),
        &cfg,
    )
    .unwrap();
    let strat_out = run(
        &one,
        &default_weights(&one),
        &StrategyConfig::new(CommunityStep::PerCommunity),
        &cfg,
    )
    .unwrap();
    let flat_report = flat_out.single().unwrap();
    match strat_out {
        RunOutput::PerCommunity { output } => {
            assert_eq!(output.communities.len(), 1);
            let pooled = &output.pooled_ate.as_ref().unwrap().estimates;
            let want = &flat_report.ate.as_ref().unwrap().estimates;
            assert!((pooled.tmle - want.tmle).abs() < 1e-12);
            assert!((pooled.gcomp - want.gcomp).abs() < 1e-12);
        }
        _ => panic!("expected per-community output"),
    }
}

#[test]
fn per_community_rejects_constant_exposure() {
    let ds = {
        let mut frame = Frame::new();
        frame.push_column("Y", vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        frame.push_column("A", vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        frame.push_column("W", vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let roles = NodeRoles {
            ynode: Some("Y".into()),
            anodes: vec!["A".into()],
            wenodes: vec!["W".into()],
            community_id: Some("id".into()),
            ynode_det: None,
        };
        HierDataset::new(
            frame,
            roles,
            Some(vec!["a".into(), "a".into(), "b".into(), "b".into()]),
        )
        .unwrap()
    };
    let cfg = EstimationConfig {
        interventions: static_pair(),
        ..EstimationConfig::default()
    };
    let err = run(
        &ds,
        &default_weights(&ds),
        &StrategyConfig::new(CommunityStep::PerCommunity),
        &cfg,
    )
    .unwrap_err();
    assert!(err.to_string().contains("constant within community"), "{err}");
}

#[test]
fn missing_community_id_coerces_to_flat_analysis() {
    let ds = binary_toy(100, 23, false);
    let cfg = EstimationConfig {
        interventions: static_pair(),
        ..EstimationConfig::default()
    };
    let out = run(
        &ds,
        &default_weights(&ds),
        &StrategyConfig::new(CommunityStep::CommunityLevel),
        &cfg,
    )
    .unwrap();
    assert_eq!(out.single().unwrap().strategy, "no_community");
}

#[test]
fn full_report_is_bit_identical_under_fixed_seed() {
    let ds = binary_toy(200, 29, true);
    let weights = default_weights(&ds);
    let cfg = EstimationConfig {
        interventions: vec![
            InterventionSpec {
                name: "gstar1".into(),
                kind: InterventionKind::Sampler(hiertmle::SamplerSpec::Bernoulli { prob: 0.3 }),
            },
            InterventionSpec::constant("gstar2", vec![0.0]),
        ],
        mc: McConfig { n_sims: 3, seed: 77 },
        ..EstimationConfig::default()
    };
    let strategy = StrategyConfig::new(CommunityStep::CommunityLevel);
    let a = run(&ds, &weights, &strategy, &cfg).unwrap();
    let b = run(&ds, &weights, &strategy, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

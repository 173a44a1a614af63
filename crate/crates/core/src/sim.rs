//! Simulation harness: the three benchmark data-generating processes, truth
//! calibration by large-sample counterfactual means, and the replication
//! driver that produces bias/SE/rMSE/coverage tables.

use crate::data::{build_weights, CommunityWeightPolicy, HierDataset, NodeRoles, ObsWeightPolicy};
use crate::error::{Error, Result};
use crate::formula::{Formula, Term};
use crate::frame::Frame;
use crate::glm::expit;
use crate::hierarchy::{run, CommunityStep, EstimationConfig, StrategyConfig};
use crate::intervention::{InterventionKind, InterventionSpec, MeanModel, McConfig, SamplerSpec};
use crate::rng::{derive_seed, substream, Domain};
use crate::tmle::{EstimationReport, Estimator, ESTIMATORS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Hierarchical data, continuous community exposure, truncated-shift
    /// stochastic intervention.
    Sim1Stoch,
    /// Hierarchical data, binary community exposure, static 1-vs-0 ATE.
    Sim2Static,
    /// One observation per community, continuous exposure, truncated-shift
    /// stochastic intervention.
    Sim3N1,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DgpSpec {
    pub study: Study,
    /// Number of communities (= observations for `Sim3N1`).
    pub j: usize,
    /// Mean community size (ignored by `Sim3N1`).
    pub n_mean: f64,
    /// Whether the no-covariate-interference working model holds.
    pub working_model: bool,
    pub shift: f64,
    pub trunc_bound: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn sim1(j: usize, working_model: bool, seed: u64) -> Self {
        DgpSpec {
            study: Study::Sim1Stoch,
            j,
            n_mean: 50.0,
            working_model,
            shift: 1.0,
            trunc_bound: 5.0,
            seed,
        }
    }

    pub fn sim2(j: usize, working_model: bool, seed: u64) -> Self {
        DgpSpec {
            study: Study::Sim2Static,
            j,
            n_mean: 50.0,
            working_model,
            shift: 0.0,
            trunc_bound: 0.0,
            seed,
        }
    }

    pub fn sim3(n: usize, seed: u64) -> Self {
        DgpSpec {
            study: Study::Sim3N1,
            j: n,
            n_mean: 1.0,
            working_model: true,
            shift: 2.0,
            trunc_bound: 10.0,
            seed,
        }
    }
}

/// Dataset plus the per-community counterfactual target values (the mean
/// post-intervention outcome, or the Y(1)-Y(0) difference for the static
/// study) used for truth calibration.
pub struct GeneratedData {
    pub dataset: HierDataset,
    pub community_targets: Vec<f64>,
}

/// Draw one dataset for replication `rep`.
pub fn generate(dgp: &DgpSpec, rep: u64) -> Result<HierDataset> {
    Ok(generate_with_targets(dgp, rep)?.dataset)
}

/// Draw one dataset along with its counterfactual calibration targets.
pub fn generate_with_targets(dgp: &DgpSpec, rep: u64) -> Result<GeneratedData> {
    match dgp.study {
        Study::Sim1Stoch => generate_sim1(dgp, rep),
        Study::Sim2Static => generate_sim2(dgp, rep),
        Study::Sim3N1 => generate_sim3(dgp, rep),
    }
}

fn community_size(rng: &mut ChaCha8Rng, n_mean: f64) -> usize {
    let normal = Normal::new(n_mean, 10.0).unwrap();
    let n = normal.sample(rng).round_ties_even();
    n.max(1.0) as usize
}

fn bern(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn generate_sim1(dgp: &DgpSpec, rep: u64) -> Result<GeneratedData> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut id = Vec::new();
    let mut e1c = Vec::new();
    let mut e2c = Vec::new();
    let mut w1c = Vec::new();
    let mut w2c = Vec::new();
    let mut w3c = Vec::new();
    let mut ac = Vec::new();
    let mut yc = Vec::new();
    let mut targets = Vec::with_capacity(dgp.j);

    // outcome coefficients on (1, A, E1, E2, mean W1, mean W2, mean W3, W1, W2, W3)
    let bs: [f64; 10] = if dgp.working_model {
        [-1.7, 1.7, 0.5, -1.2, 0.0, 0.0, 0.0, 1.1, 1.3, -0.4]
    } else {
        [-1.7, 1.2, -0.2, 1.1, 5.8, -3.1, -1.0, 0.4, 0.2, -0.4]
    };

    for j in 0..dgp.j {
        let mut rng = substream(dgp.seed, Domain::Dgp, rep, j as u64);
        let n = community_size(&mut rng, dgp.n_mean);
        let e1: f64 = rng.random();
        let e2 = 0.2 * (((rng.random::<f64>() * 4.0) as usize).min(3) + 1) as f64;

        let p_w1 = expit(-0.4 + 1.2 * e1 - 1.3 * e2);
        let w1: Vec<f64> = (0..n).map(|_| bern(&mut rng, p_w1)).collect();
        let m2 = 1.0 - 0.8 * e1 - 0.4 * e2;
        let m3 = 0.5 + 0.2 * e1;
        let mut w2 = Vec::with_capacity(n);
        let mut w3 = Vec::with_capacity(n);
        for _ in 0..n {
            let z1 = std_normal.sample(&mut rng);
            let z2 = std_normal.sample(&mut rng);
            w2.push(m2 + z1);
            w3.push(m3 + 0.6 * z1 + (1.0f64 - 0.36).sqrt() * z2);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let a_mu = -1.2 + 0.8 * e1 + 0.21 * e2 + 3.0 * mean(&w1) - 0.7 * mean(&w2)
            + 0.3 * mean(&w3);
        let a = Normal::new(a_mu, 1.0).unwrap().sample(&mut rng);

        let untrunc = a + dgp.shift;
        let ratio = (1.5 * dgp.shift * (untrunc - a_mu - dgp.shift / 4.0)).exp();
        let a_star = if ratio > dgp.trunc_bound { a } else { untrunc };

        let lin = |aa: f64, i: usize| {
            bs[0] + bs[1] * aa
                + bs[2] * e1
                + bs[3] * e2
                + bs[4] * mean(&w1)
                + bs[5] * mean(&w2)
                + bs[6] * mean(&w3)
                + bs[7] * w1[i]
                + bs[8] * w2[i]
                + bs[9] * w3[i]
        };
        let y: Vec<f64> = (0..n).map(|i| bern(&mut rng, expit(lin(a, i)))).collect();
        let y_star: Vec<f64> = (0..n)
            .map(|i| bern(&mut rng, expit(lin(a_star, i))))
            .collect();
        targets.push(y_star.iter().sum::<f64>() / n as f64);

        for i in 0..n {
            id.push((j + 1).to_string());
            e1c.push(e1);
            e2c.push(e2);
            w1c.push(w1[i]);
            w2c.push(w2[i]);
            w3c.push(w3[i]);
            ac.push(a);
            yc.push(y[i]);
        }
    }

    let mut frame = Frame::new();
    frame.push_column("E1", e1c)?;
    frame.push_column("E2", e2c)?;
    frame.push_column("W1", w1c)?;
    frame.push_column("W2", w2c)?;
    frame.push_column("W3", w3c)?;
    frame.push_column("A", ac)?;
    frame.push_column("Y", yc)?;
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: ["E1", "E2", "W1", "W2", "W3"].iter().map(|s| s.to_string()).collect(),
        community_id: Some("id".into()),
        ynode_det: None,
    };
    Ok(GeneratedData {
        dataset: HierDataset::new(frame, roles, Some(id))?,
        community_targets: targets,
    })
}

fn generate_sim2(dgp: &DgpSpec, rep: u64) -> Result<GeneratedData> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut id = Vec::new();
    let mut w1c = Vec::new();
    let mut w2c = Vec::new();
    let mut ac = Vec::new();
    let mut yc = Vec::new();
    let mut targets = Vec::with_capacity(dgp.j);

    for j in 0..dgp.j {
        let mut rng = substream(dgp.seed, Domain::Dgp, rep, j as u64);
        let n = community_size(&mut rng, dgp.n_mean);
        let w1: Vec<f64> = (0..n).map(|_| bern(&mut rng, 0.6)).collect();
        let w2: Vec<f64> = (0..n).map(|_| std_normal.sample(&mut rng)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let a = bern(&mut rng, expit(mean(&w1) + 0.56 * mean(&w2)));

        let lin = |aa: f64, i: usize| {
            if dgp.working_model {
                0.15 + 0.3 * aa + 0.1 * mean(&w1) + 2.0 * w1[i] + 0.9 * w2[i]
            } else {
                0.15 + 0.3 * aa + 3.0 * mean(&w1) - 0.9 * mean(&w2) - 0.3 * w1[i] + w2[i]
            }
        };
        let y: Vec<f64> = (0..n).map(|i| bern(&mut rng, expit(lin(a, i)))).collect();
        let y1: Vec<f64> = (0..n).map(|i| bern(&mut rng, expit(lin(1.0, i)))).collect();
        let y0: Vec<f64> = (0..n).map(|i| bern(&mut rng, expit(lin(0.0, i)))).collect();
        targets.push((y1.iter().sum::<f64>() - y0.iter().sum::<f64>()) / n as f64);

        for i in 0..n {
            id.push((j + 1).to_string());
            w1c.push(w1[i]);
            w2c.push(w2[i]);
            ac.push(a);
            yc.push(y[i]);
        }
    }

    let mut frame = Frame::new();
    frame.push_column("W1", w1c)?;
    frame.push_column("W2", w2c)?;
    frame.push_column("A", ac)?;
    frame.push_column("Y", yc)?;
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: vec!["W1".into(), "W2".into()],
        community_id: Some("id".into()),
        ynode_det: None,
    };
    Ok(GeneratedData {
        dataset: HierDataset::new(frame, roles, Some(id))?,
        community_targets: targets,
    })
}

fn generate_sim3(dgp: &DgpSpec, rep: u64) -> Result<GeneratedData> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n = dgp.j;
    let mut cols: [Vec<f64>; 6] = Default::default();
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(dgp.seed, Domain::Dgp, rep, i as u64);
        let e1 = bern(&mut rng, 0.5);
        let e2 = bern(&mut rng, 0.3);
        let e3 = 0.25 * std_normal.sample(&mut rng);
        let e4: f64 = rng.random();
        let mu = 0.86 * e1 + 0.41 * e2 - 0.34 * e3 + 0.93 * e4;
        let a = mu + std_normal.sample(&mut rng);
        let y_mean = |aa: f64| 3.63 + 0.11 * aa - 0.52 * e1 - 0.36 * e2 + 0.12 * e3 - 0.13 * e4;
        let y = y_mean(a) + std_normal.sample(&mut rng);
        let untrunc = a + dgp.shift;
        let ratio = (0.5 * dgp.shift * (untrunc - mu - dgp.shift / 2.0)).exp();
        let a_star = if ratio > dgp.trunc_bound { a } else { untrunc };
        let y_star = y_mean(a_star) + std_normal.sample(&mut rng);
        targets.push(y_star);
        for (c, v) in cols.iter_mut().zip([e1, e2, e3, e4, a, y]) {
            c.push(v);
        }
    }
    let mut frame = Frame::new();
    let [e1, e2, e3, e4, a, y] = cols;
    frame.push_column("E1", e1)?;
    frame.push_column("E2", e2)?;
    frame.push_column("E3", e3)?;
    frame.push_column("E4", e4)?;
    frame.push_column("A", a)?;
    frame.push_column("Y", y)?;
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: ["E1", "E2", "E3", "E4"].iter().map(|s| s.to_string()).collect(),
        community_id: None,
        ynode_det: None,
    };
    Ok(GeneratedData {
        dataset: HierDataset::new(frame, roles, None)?,
        community_targets: targets,
    })
}

/// Monte-Carlo calibration of the true target value: the mean counterfactual
/// community outcome over `n_large` freshly drawn communities. Returns the
/// estimate and its standard error.
pub fn calibrate_truth(dgp: &DgpSpec, n_large: usize) -> Result<(f64, f64)> {
    let mut big = *dgp;
    big.j = n_large;
    // replication index 2^27 keeps calibration draws out of every study
    // rep's stream (reps stay far below that)
    let data = generate_with_targets(&big, 1 << 27)?;
    let t = &data.community_targets;
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t.len() - 1) as f64;
    Ok((mean, (var / t.len() as f64).sqrt()))
}

/// The stochastic intervention the estimators are pointed at, per study.
pub fn study_interventions(dgp: &DgpSpec) -> Vec<InterventionSpec> {
    match dgp.study {
        Study::Sim1Stoch => vec![InterventionSpec {
            name: "gstar1".into(),
            kind: InterventionKind::Sampler(SamplerSpec::ShiftTruncate {
                shift: dgp.shift,
                trunc_bound: dgp.trunc_bound,
                // the benchmark's intervention summarizes the individual
                // covariates by their dataset-wide means
                mean: MeanModel {
                    intercept: -1.2,
                    terms: vec![
                        (Term::Main("E1".into()), 0.8),
                        (Term::Main("E2".into()), 0.21),
                    ],
                    grand_terms: vec![
                        (Term::Main("W1".into()), 3.0),
                        (Term::Main("W2".into()), -0.7),
                        (Term::Main("W3".into()), 0.3),
                    ],
                },
                sd: 1.0,
                ratio_scale: 1.5,
                ratio_frac: 0.25,
            }),
        }],
        Study::Sim2Static => vec![
            InterventionSpec::constant("gstar1", vec![1.0]),
            InterventionSpec::constant("gstar2", vec![0.0]),
        ],
        Study::Sim3N1 => vec![InterventionSpec {
            name: "gstar1".into(),
            kind: InterventionKind::Sampler(SamplerSpec::ShiftTruncate {
                shift: dgp.shift,
                trunc_bound: dgp.trunc_bound,
                mean: MeanModel {
                    intercept: 0.0,
                    terms: vec![
                        (Term::Main("E1".into()), 0.86),
                        (Term::Main("E2".into()), 0.41),
                        (Term::Main("E3".into()), -0.34),
                        (Term::Main("E4".into()), 0.93),
                    ],
                    grand_terms: vec![],
                },
                sd: 1.0,
                ratio_scale: 0.5,
                ratio_frac: 0.5,
            }),
        }],
    }
}

/// One analysis arm of a study battery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub step: CommunityStep,
    pub pooled_q: bool,
    pub qform: Option<String>,
    pub hform_g0: Option<String>,
    pub hform_gstar: Option<String>,
}

/// The analysis battery each study is benchmarked with.
pub fn default_battery(study: Study) -> Vec<Arm> {
    match study {
        Study::Sim1Stoch | Study::Sim2Static => vec![
            Arm {
                label: "Ia".into(),
                step: CommunityStep::CommunityLevel,
                pooled_q: false,
                qform: None,
                hform_g0: None,
                hform_gstar: None,
            },
            Arm {
                label: "Ib".into(),
                step: CommunityStep::CommunityLevel,
                pooled_q: true,
                qform: None,
                hform_g0: None,
                hform_gstar: None,
            },
            Arm {
                label: "II".into(),
                step: CommunityStep::IndividualLevel,
                pooled_q: false,
                qform: None,
                hform_g0: None,
                hform_gstar: None,
            },
        ],
        Study::Sim3N1 => vec![
            Arm {
                label: "CC".into(),
                step: CommunityStep::NoCommunity,
                pooled_q: false,
                qform: None,
                hform_g0: None,
                hform_gstar: None,
            },
            // CM: misspecified exposure mechanism (the intervention density
            // inherits the same misspecified form, as hform.gstar defaults
            // to hform.g0)
            Arm {
                label: "CM".into(),
                step: CommunityStep::NoCommunity,
                pooled_q: false,
                qform: None,
                hform_g0: Some("A ~ E3".into()),
                hform_gstar: None,
            },
            Arm {
                label: "MC".into(),
                step: CommunityStep::NoCommunity,
                pooled_q: false,
                qform: Some("Y ~ A + E3".into()),
                hform_g0: None,
                hform_gstar: None,
            },
        ],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: u64,
    pub estimator: String,
    pub estimate: f64,
    pub var: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: String,
    pub mean_estimate: f64,
    pub bias: f64,
    pub mean_se: f64,
    pub rmse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    pub study: Study,
    pub truth: f64,
    pub truth_se: f64,
    pub replications: usize,
    pub failures: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "study: {:?}   truth: {:.6} (mc se {:.2e})   replications: {} (failed: {})\n",
            self.study, self.truth, self.truth_se, self.replications, self.failures
        ));
        out.push_str(&format!(
            "{:<12} {:>12} {:>10} {:>10} {:>10} {:>8}\n",
            "estimator", "mean", "bias", "mean_se", "rmse", "cover"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>12.6} {:>10.6} {:>10.6} {:>10.6} {:>8.3}\n",
                r.estimator, r.mean_estimate, r.bias, r.mean_se, r.rmse, r.coverage
            ));
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub metrics: MetricsTable,
    pub reps: Vec<RepRecord>,
}

impl StudyResult {
    /// Per-replication estimates as CSV (for external box plots).
    pub fn reps_csv(&self) -> String {
        let mut out = String::from("rep,estimator,estimate,var,ci_lo,ci_hi\n");
        for r in &self.reps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.rep, r.estimator, r.estimate, r.var, r.ci_lo, r.ci_hi
            ));
        }
        out
    }
}

fn estimator_name(which: Estimator) -> &'static str {
    match which {
        Estimator::Tmle => "TMLE",
        Estimator::Iptw => "IPTW",
        Estimator::Gcomp => "GCOMP",
    }
}

fn arm_config(dgp: &DgpSpec, arm: &Arm, mc_seed: u64) -> Result<EstimationConfig> {
    let mut cfg = EstimationConfig {
        interventions: study_interventions(dgp),
        mc: McConfig {
            n_sims: 1,
            seed: mc_seed,
        },
        ..EstimationConfig::default()
    };
    if dgp.study == Study::Sim3N1 {
        // the N=1 benchmark discretizes the exposure into 5 equal-mass bins
        // at every sample size
        cfg.binning.nbins = Some(5);
        cfg.binning.max_n_per_bin = usize::MAX;
    }
    if let Some(q) = &arm.qform {
        cfg.qform = Some(Formula::parse(q)?);
    }
    if let Some(h) = &arm.hform_g0 {
        cfg.hform_g0 = Some(Formula::parse(h)?);
    }
    if let Some(h) = &arm.hform_gstar {
        cfg.hform_gstar = Some(Formula::parse(h)?);
    }
    Ok(cfg)
}

/// Extract the benchmark estimand from a run report: the ATE for the static
/// study, the single-intervention mean otherwise.
fn extract(report: &EstimationReport, which: Estimator) -> Result<(f64, f64, [f64; 2])> {
    if let Some(ate) = &report.ate {
        Ok((
            ate.estimates.get(which),
            ate.vars.get(which),
            match which {
                Estimator::Tmle => ate.cis.tmle,
                Estimator::Iptw => ate.cis.iptw,
                Estimator::Gcomp => ate.cis.gcomp,
            },
        ))
    } else {
        let ir = report
            .interventions
            .first()
            .ok_or_else(|| Error::numeric("report carries no interventions"))?;
        Ok((
            ir.estimates.get(which),
            ir.vars.get(which),
            match which {
                Estimator::Tmle => ir.cis.tmle,
                Estimator::Iptw => ir.cis.iptw,
                Estimator::Gcomp => ir.cis.gcomp,
            },
        ))
    }
}

fn run_one_rep(dgp: &DgpSpec, battery: &[Arm], rep: u64) -> Result<Vec<RepRecord>> {
    let ds = generate(dgp, rep)?;
    let (obs_policy, comm_policy) = match dgp.study {
        Study::Sim3N1 => (ObsWeightPolicy::EqualWithinPop, CommunityWeightPolicy::SizeCommunity),
        _ => (
            ObsWeightPolicy::EqualWithinCommunity,
            CommunityWeightPolicy::SizeCommunity,
        ),
    };
    let weights = build_weights(&ds, obs_policy, comm_policy, None, None)?;
    let mut records = Vec::new();
    for arm in battery {
        let cfg = arm_config(dgp, arm, derive_seed(dgp.seed, rep + 1))?;
        let strategy = StrategyConfig {
            step: arm.step,
            pooled_q: arm.pooled_q,
        };
        let output = run(&ds, &weights, &strategy, &cfg)?;
        let report = output.single()?;
        for which in ESTIMATORS {
            let (est, var, ci) = extract(report, which)?;
            records.push(RepRecord {
                rep,
                estimator: format!("{}-{}", estimator_name(which), arm.label),
                estimate: est,
                var,
                ci_lo: ci[0],
                ci_hi: ci[1],
            });
        }
    }
    Ok(records)
}

/// Run a replication study. `truth` may be supplied to skip calibration;
/// otherwise it is computed from `calibration_size` fresh communities.
pub fn run_study(
    dgp: &DgpSpec,
    replications: usize,
    battery: &[Arm],
    truth: Option<f64>,
    calibration_size: usize,
    parallel: bool,
) -> Result<StudyResult> {
    if battery.is_empty() {
        return Err(Error::config("estimator battery must not be empty"));
    }
    let (truth, truth_se) = match truth {
        Some(t) => (t, 0.0),
        None => calibrate_truth(dgp, calibration_size)?,
    };

    let rep_results: Vec<Result<Vec<RepRecord>>> = if parallel {
        (0..replications as u64)
            .into_par_iter()
            .map(|rep| run_one_rep(dgp, battery, rep))
            .collect()
    } else {
        (0..replications as u64)
            .map(|rep| run_one_rep(dgp, battery, rep))
            .collect()
    };

    let mut reps: Vec<RepRecord> = Vec::new();
    let mut failures = 0usize;
    for r in rep_results {
        match r {
            Ok(mut recs) => reps.append(&mut recs),
            Err(_) => failures += 1,
        }
    }

    let mut rows = Vec::new();
    for arm in battery {
        for which in ESTIMATORS {
            let name = format!("{}-{}", estimator_name(which), arm.label);
            let ests: Vec<&RepRecord> = reps.iter().filter(|r| r.estimator == name).collect();
            if ests.is_empty() {
                continue;
            }
            let k = ests.len() as f64;
            let mean = ests.iter().map(|r| r.estimate).sum::<f64>() / k;
            let mse = ests
                .iter()
                .map(|r| (r.estimate - truth) * (r.estimate - truth))
                .sum::<f64>()
                / k;
            let mean_se = ests.iter().map(|r| r.var.sqrt()).sum::<f64>() / k;
            let coverage = ests
                .iter()
                .filter(|r| r.ci_lo <= truth && truth <= r.ci_hi)
                .count() as f64
                / k;
            rows.push(MetricRow {
                estimator: name,
                mean_estimate: mean,
                bias: mean - truth,
                mean_se,
                rmse: mse.sqrt(),
                coverage,
            });
        }
    }

    Ok(StudyResult {
        metrics: MetricsTable {
            study: dgp.study,
            truth,
            truth_se,
            replications,
            failures,
            rows,
        },
        reps,
    })
}

// ---------------------------------------------------------------------------
// Worked-example sample datasets (iid, no hierarchy): a binary-exposure /
// continuous-outcome sample whose true ATE is 2.80 by construction, and a
// continuous-exposure / continuous-outcome sample for the truncated-shift
// intervention.
// ---------------------------------------------------------------------------

/// iid sample with binary exposure and continuous outcome. The exposure
/// model is logistic in all four covariates and the outcome is linear with
/// an A-coefficient of 2.8, so the true ATE is exactly 2.80.
pub fn gen_binary_exposure_sample(n: usize, seed: u64, rep: u64) -> Result<HierDataset> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut cols: [Vec<f64>; 6] = Default::default();
    for i in 0..n {
        let mut rng = substream(seed, Domain::Dgp, rep, i as u64);
        let w1 = std_normal.sample(&mut rng);
        let w2 = bern(&mut rng, 0.5);
        let w3 = std_normal.sample(&mut rng);
        let w4: f64 = rng.random();
        let a = bern(&mut rng, expit(-0.6 + 0.3 * w1 + 0.7 * w2 + 0.55 * w3 + 0.6 * w4));
        let y = 1.0
            + 2.8 * a
            + 0.7 * w1
            + 1.2 * w2
            + 0.9 * w3
            + 0.8 * w4
            + std_normal.sample(&mut rng);
        for (c, v) in cols.iter_mut().zip([w1, w2, w3, w4, a, y]) {
            c.push(v);
        }
    }
    let mut frame = Frame::new();
    let [w1, w2, w3, w4, a, y] = cols;
    frame.push_column("W1", w1)?;
    frame.push_column("W2", w2)?;
    frame.push_column("W3", w3)?;
    frame.push_column("W4", w4)?;
    frame.push_column("A", a)?;
    frame.push_column("Y", y)?;
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: ["W1", "W2", "W3", "W4"].iter().map(|s| s.to_string()).collect(),
        community_id: None,
        ynode_det: None,
    };
    HierDataset::new(frame, roles, None)
}

pub const BINARY_SAMPLE_TRUE_ATE: f64 = 2.80;

/// iid sample with continuous exposure A ~ N(0.86 W1 + 0.93 W3 W4 + 0.41 W4, 1)
/// and a linear continuous outcome. Under the truncated-shift intervention
/// with shift 2 and bound 10 the true mean counterfactual outcome is 3.46601
/// (see [`continuous_sample_truth`]).
pub fn gen_continuous_exposure_sample(n: usize, seed: u64, rep: u64) -> Result<HierDataset> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut cols: [Vec<f64>; 6] = Default::default();
    for i in 0..n {
        let mut rng = substream(seed, Domain::Dgp, rep, i as u64);
        let (w1, w2, w3, w4, a, y) = continuous_sample_row(&mut rng, &std_normal).0;
        for (c, v) in cols.iter_mut().zip([w1, w2, w3, w4, a, y]) {
            c.push(v);
        }
    }
    let mut frame = Frame::new();
    let [w1, w2, w3, w4, a, y] = cols;
    frame.push_column("W1", w1)?;
    frame.push_column("W2", w2)?;
    frame.push_column("W3", w3)?;
    frame.push_column("W4", w4)?;
    frame.push_column("A", a)?;
    frame.push_column("Y", y)?;
    let roles = NodeRoles {
        ynode: Some("Y".into()),
        anodes: vec!["A".into()],
        wenodes: ["W1", "W2", "W3", "W4"].iter().map(|s| s.to_string()).collect(),
        community_id: None,
        ynode_det: None,
    };
    HierDataset::new(frame, roles, None)
}

type SampleRow = ((f64, f64, f64, f64, f64, f64), f64);

fn continuous_sample_row(rng: &mut ChaCha8Rng, std_normal: &Normal<f64>) -> SampleRow {
    let w1 = std_normal.sample(rng);
    let w2 = bern(rng, 0.3);
    let w3 = std_normal.sample(rng);
    let w4: f64 = rng.random();
    let mu = 0.86 * w1 + 0.93 * w3 * w4 + 0.41 * w4;
    let a = mu + std_normal.sample(rng);
    let y_mean = |aa: f64| 2.8536 + 0.2 * aa + 0.8 * w1 + 0.2 * w2 + 0.35 * w3 + 0.3 * w4;
    let noise = std_normal.sample(rng);
    let y = y_mean(a) + noise;
    (
        (w1, w2, w3, w4, a, y),
        mu, // callers re-derive counterfactuals from mu
    )
}

/// The truncated-shift intervention matching the continuous sample's
/// exposure mechanism (mean model 0.86 W1 + 0.93 W3 W4 + 0.41 W4).
pub fn continuous_sample_shift_intervention(shift: f64, trunc_bound: f64) -> InterventionSpec {
    InterventionSpec {
        name: "gstar1".into(),
        kind: InterventionKind::Sampler(SamplerSpec::ShiftTruncate {
            shift,
            trunc_bound,
            mean: MeanModel {
                intercept: 0.0,
                terms: vec![
                    (Term::Main("W1".into()), 0.86),
                    (Term::Interaction("W3".into(), "W4".into()), 0.93),
                    (Term::Main("W4".into()), 0.41),
                ],
                grand_terms: vec![],
            },
            sd: 1.0,
            ratio_scale: 0.5,
            ratio_frac: 0.5,
        }),
    }
}

/// Nominal truth for the continuous sample under shift 2 / bound 10.
pub const CONTINUOUS_SAMPLE_TRUE_PSI: f64 = 3.46601;

/// Large-sample Monte-Carlo calibration of the continuous sample's mean
/// counterfactual outcome under the truncated-shift intervention.
pub fn continuous_sample_truth(n_large: usize, seed: u64, shift: f64, trunc_bound: f64) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0.0;
    for i in 0..n_large {
        let mut rng = substream(seed, Domain::Dgp, (1 << 27) as u64, i as u64);
        let ((w1, w2, w3, w4, a, _y), mu) = continuous_sample_row(&mut rng, &std_normal);
        let untrunc = a + shift;
        let ratio = (0.5 * shift * (untrunc - mu - shift / 2.0)).exp();
        let a_star = if ratio > trunc_bound { a } else { untrunc };
        let y_star = 2.8536 + 0.2 * a_star + 0.8 * w1 + 0.2 * w2 + 0.35 * w3 + 0.3 * w4
            + std_normal.sample(&mut rng);
        total += y_star;
    }
    total / n_large as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic() {
        let dgp = DgpSpec::sim2(20, true, 42);
        let a = generate(&dgp, 3).unwrap();
        let b = generate(&dgp, 3).unwrap();
        assert_eq!(a.n_obs(), b.n_obs());
        assert_eq!(a.frame().column("Y").unwrap(), b.frame().column("Y").unwrap());
        let c = generate(&dgp, 4).unwrap();
        assert_ne!(a.frame().column("Y").unwrap(), c.frame().column("Y").unwrap());
    }

    #[test]
    fn sim1_row_counts_track_community_sizes() {
        let dgp = DgpSpec::sim1(200, false, 7);
        let data = generate(&dgp, 0).unwrap();
        assert_eq!(data.n_communities(), 200);
        let mean_size = data.n_obs() as f64 / 200.0;
        assert!((mean_size - 50.0).abs() < 5.0, "mean size {mean_size}");
    }

    #[test]
    fn sim2_covariate_mean_matches_bernoulli_rate() {
        let dgp = DgpSpec::sim2(300, true, 11);
        let data = generate(&dgp, 0).unwrap();
        let w1 = data.frame().column("W1").unwrap();
        let mean = w1.iter().sum::<f64>() / w1.len() as f64;
        let n = w1.len() as f64;
        let bound = 3.0 * (0.6 * 0.4 / n).sqrt();
        assert!((mean - 0.6).abs() < bound, "mean {mean} outside 3-sigma");
    }

    #[test]
    fn sim3_truth_calibrates_near_reference() {
        let dgp = DgpSpec::sim3(1000, 5);
        let (truth, se) = calibrate_truth(&dgp, 400_000).unwrap();
        assert!(se < 0.01);
        assert!((truth - 3.505).abs() < 0.01, "sim3 truth {truth}");
    }

    #[test]
    fn sim1_truths_near_reference_values() {
        // reference truths calibrated with large communities
        let mut holds = DgpSpec::sim1(0, true, 3);
        holds.n_mean = 1000.0;
        let (t_holds, _) = calibrate_truth(&holds, 4000).unwrap();
        assert!((t_holds - 0.5557).abs() < 0.012, "holds truth {t_holds}");

        let mut fails = DgpSpec::sim1(0, false, 3);
        fails.n_mean = 1000.0;
        let (t_fails, _) = calibrate_truth(&fails, 4000).unwrap();
        assert!((t_fails - 0.5578).abs() < 0.012, "fails truth {t_fails}");
    }

    #[test]
    fn sim2_truths_near_reference_values() {
        let (t_holds, _) = calibrate_truth(&DgpSpec::sim2(0, true, 3), 60_000).unwrap();
        assert!((t_holds - 0.0416).abs() < 0.002, "holds ATE {t_holds}");
        let (t_fails, _) = calibrate_truth(&DgpSpec::sim2(0, false, 3), 60_000).unwrap();
        assert!((t_fails - 0.0371).abs() < 0.002, "fails ATE {t_fails}");
    }

    #[test]
    fn continuous_sample_truth_near_nominal() {
        let t = continuous_sample_truth(400_000, 9, 2.0, 10.0);
        assert!(
            (t - CONTINUOUS_SAMPLE_TRUE_PSI).abs() < 0.01,
            "calibrated {t}"
        );
    }

    #[test]
    fn degenerate_constant_outcome_truth() {
        // all-one outcomes: the counterfactual mean must be exactly 1
        let dgp = DgpSpec::sim2(50, true, 13);
        let data = generate_with_targets(&dgp, 0).unwrap();
        for t in &data.community_targets {
            assert!((-1.0..=1.0).contains(t));
        }
    }

    #[test]
    fn single_rep_study_bias_is_single_error() {
        let dgp = DgpSpec::sim2(30, true, 21);
        let battery = vec![default_battery(Study::Sim2Static)[0].clone()];
        let result = run_study(&dgp, 1, &battery, Some(0.0416), 0, false).unwrap();
        let row = result.metrics.row("TMLE-Ia").unwrap();
        assert!((row.bias - (row.mean_estimate - 0.0416)).abs() < 1e-12);
        assert_eq!(result.metrics.replications, 1);
        assert_eq!(result.reps.len(), 3);
    }

    #[test]
    fn rmse_decomposition_identity() {
        let dgp = DgpSpec::sim2(25, true, 22);
        let battery = vec![default_battery(Study::Sim2Static)[0].clone()];
        let result = run_study(&dgp, 8, &battery, Some(0.04), 0, false).unwrap();
        for row in &result.metrics.rows {
            let ests: Vec<f64> = result
                .reps
                .iter()
                .filter(|r| r.estimator == row.estimator)
                .map(|r| r.estimate)
                .collect();
            let mean = ests.iter().sum::<f64>() / ests.len() as f64;
            let var = ests.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / ests.len() as f64;
            let lhs = row.rmse * row.rmse;
            let rhs = row.bias * row.bias + var;
            assert!((lhs - rhs).abs() < 1e-10, "{}: {lhs} vs {rhs}", row.estimator);
        }
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let dgp = DgpSpec::sim2(20, true, 23);
        let battery = vec![default_battery(Study::Sim2Static)[0].clone()];
        let seq = run_study(&dgp, 4, &battery, Some(0.04), 0, false).unwrap();
        let par = run_study(&dgp, 4, &battery, Some(0.04), 0, true).unwrap();
        assert_eq!(
            serde_json::to_string(&seq.metrics).unwrap(),
            serde_json::to_string(&par.metrics).unwrap()
        );
    }

    #[test]
    fn binary_sample_misspec_bias_direction() {
        // sanity: the binary-exposure sample is genuinely confounded
        let ds = gen_binary_exposure_sample(4000, 31, 0).unwrap();
        let a = ds.frame().column("A").unwrap();
        let y = ds.frame().column("Y").unwrap();
        let mean_a = a.iter().sum::<f64>() / a.len() as f64;
        let naive = y
            .iter()
            .zip(a)
            .filter(|(_, &ai)| ai == 1.0)
            .map(|(y, _)| y)
            .sum::<f64>()
            / a.iter().filter(|&&x| x == 1.0).count() as f64
            - y.iter()
                .zip(a)
                .filter(|(_, &ai)| ai == 0.0)
                .map(|(y, _)| y)
                .sum::<f64>()
                / a.iter().filter(|&&x| x == 0.0).count() as f64;
        assert!(mean_a > 0.4 && mean_a < 0.65);
        assert!(naive - 2.8 > 0.4, "naive contrast {naive} should overshoot");
    }
}

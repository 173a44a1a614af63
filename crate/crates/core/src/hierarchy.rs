//! Strategy dispatch: wires the data model, exposure-density machinery, and
//! the targeting engine into the four community analysis modes.

use crate::data::{aggregate_to_community, HierDataset, WeightScheme};
use crate::density::{fit_density, BinningConfig, FittedDensity};
use crate::error::{Error, Result};
use crate::formula::Formula;
use crate::frame::Frame;
use crate::intervention::{sample_gstar, InterventionKind, InterventionSpec, McConfig};
use crate::rng::Domain;
use crate::tmle::{
    contrast, estimate_intervention, fit_initial_q, normal_quantile, AnalysisUnits, CiTriple,
    ContrastReport, EngineContext, EstimateTriple, EstimationReport, ExposureDraws,
    InterventionInput, InterventionReport, ObservedExposures, OutcomeScale, QPlan, TargetMethod,
    DEFAULT_QBOUNDS_ALPHA, ESTIMATORS,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunityStep {
    NoCommunity,
    CommunityLevel,
    IndividualLevel,
    PerCommunity,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub step: CommunityStep,
    /// Community-level analysis only: replace the community-level outcome
    /// fit with a pooled individual-level fit averaged within community.
    pub pooled_q: bool,
}

impl StrategyConfig {
    pub fn new(step: CommunityStep) -> Self {
        StrategyConfig {
            step,
            pooled_q: false,
        }
    }
}

/// Full estimation configuration (the library-level mirror of the run
/// config the CLI reads).
#[derive(Debug, Clone)]
pub struct EstimationConfig {
    /// Zero, one, or two interventions. Zero means "evaluate under the
    /// observed exposures" (eligible for the savetime shortcut).
    pub interventions: Vec<InterventionSpec>,
    /// Optional known treatment mechanism; its samples augment the g0
    /// fitting data with equal weight.
    pub f_g0: Option<InterventionSpec>,
    pub qform: Option<Formula>,
    pub hform_g0: Option<Formula>,
    pub hform_gstar: Option<Formula>,
    pub qbounds: Option<[f64; 2]>,
    pub alpha: f64,
    pub binning: BinningConfig,
    pub lbound: f64,
    pub target: TargetMethod,
    pub mc: McConfig,
    pub ci_alpha: f64,
    /// Skip exposure-mechanism fitting (h == 1) when no intervention is
    /// given and the targeting step is the weighted intercept.
    pub savetime: bool,
    pub reuse_g0: Option<FittedDensity>,
    pub reuse_gstar: Vec<Option<FittedDensity>>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            interventions: Vec::new(),
            f_g0: None,
            qform: None,
            hform_g0: None,
            hform_gstar: None,
            qbounds: None,
            alpha: DEFAULT_QBOUNDS_ALPHA,
            binning: BinningConfig::default(),
            lbound: crate::density::DEFAULT_LBOUND,
            target: TargetMethod::TmleIntercept,
            mc: McConfig::default(),
            ci_alpha: 0.05,
            savetime: true,
            reuse_g0: None,
            reuse_gstar: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryBlock {
    pub name: String,
    pub estimates: EstimateTriple,
    pub vars: EstimateTriple,
    pub cis: CiTriple,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommunityEntry {
    pub key: String,
    pub report: EstimationReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerCommunityOutput {
    pub communities: Vec<CommunityEntry>,
    pub pooled: Vec<SummaryBlock>,
    pub pooled_ate: Option<SummaryBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutput {
    Single { report: EstimationReport },
    PerCommunity { output: PerCommunityOutput },
}

impl RunOutput {
    pub fn single(&self) -> Result<&EstimationReport> {
        match self {
            RunOutput::Single { report } => Ok(report),
            RunOutput::PerCommunity { .. } => {
                Err(Error::numeric("expected a single report, got per-community"))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Run the configured analysis.
pub fn run(
    ds: &HierDataset,
    weights: &WeightScheme,
    strategy: &StrategyConfig,
    cfg: &EstimationConfig,
) -> Result<RunOutput> {
    // a missing community id forces the flat analysis
    let step = if ds.has_hierarchy() {
        strategy.step
    } else {
        CommunityStep::NoCommunity
    };
    if cfg.interventions.len() > 2 {
        return Err(Error::config("at most two interventions are supported"));
    }

    match step {
        CommunityStep::PerCommunity => run_per_community(ds, weights, cfg),
        _ => {
            let report = run_single(ds, weights, step, strategy.pooled_q, cfg)?;
            Ok(RunOutput::Single { report })
        }
    }
}

fn strategy_name(step: CommunityStep, pooled_q: bool) -> String {
    let base = match step {
        CommunityStep::NoCommunity => "no_community",
        CommunityStep::CommunityLevel => "community_level",
        CommunityStep::IndividualLevel => "individual_level",
        CommunityStep::PerCommunity => "per_community",
    };
    if pooled_q && step == CommunityStep::CommunityLevel {
        format!("{base}+pooled_q")
    } else {
        base.to_string()
    }
}

fn run_single(
    ds: &HierDataset,
    weights: &WeightScheme,
    step: CommunityStep,
    pooled_q: bool,
    cfg: &EstimationConfig,
) -> Result<EstimationReport> {
    let ynode = ds.ynode()?.to_string();
    let y_raw = ds.frame().try_column(&ynode)?;
    let scale = OutcomeScale::from_data(y_raw, cfg.qbounds, cfg.alpha)?;
    let anodes = ds.roles().anodes.clone();
    let alpha_rows = weights.alpha(ds)?;
    let community_of_row = ds.community_of_row();
    let det_rows = ds.det_mask();

    // analysis units per strategy
    let units = match step {
        CommunityStep::NoCommunity => AnalysisUnits {
            frame: ds.frame().clone(),
            y_star: y_raw.iter().map(|&y| scale.transform(y)).collect(),
            weight: weights.obs_weights.clone(),
            det: det_rows.clone(),
            ic_group: (0..ds.n_obs()).collect(),
            n_groups: ds.n_obs(),
            group_weight: weights.obs_weights.clone(),
            alpha: vec![1.0; ds.n_obs()],
        },
        CommunityStep::CommunityLevel => {
            let agg = aggregate_to_community(ds, weights)?;
            let y_agg = agg.try_column(&ynode)?.to_vec();
            let j = ds.n_communities();
            let det: Vec<bool> = ds
                .communities()
                .iter()
                .map(|c| c.rows.iter().all(|&r| det_rows[r]))
                .collect();
            AnalysisUnits {
                y_star: y_agg.iter().map(|&y| scale.transform(y)).collect(),
                frame: agg,
                weight: weights.community_weights.clone(),
                det,
                ic_group: (0..j).collect(),
                n_groups: j,
                group_weight: weights.community_weights.clone(),
                alpha: vec![1.0; j],
            }
        }
        CommunityStep::IndividualLevel => {
            let w: Vec<f64> = (0..ds.n_obs())
                .map(|i| weights.community_weights[community_of_row[i]] * alpha_rows[i])
                .collect();
            AnalysisUnits {
                frame: ds.frame().clone(),
                y_star: y_raw.iter().map(|&y| scale.transform(y)).collect(),
                weight: w,
                det: det_rows.clone(),
                ic_group: community_of_row.clone(),
                n_groups: ds.n_communities(),
                group_weight: weights.community_weights.clone(),
                alpha: alpha_rows.clone(),
            }
        }
        CommunityStep::PerCommunity => unreachable!("handled by run()"),
    };

    // formulas
    let predictors: Vec<String> = anodes
        .iter()
        .chain(ds.roles().wenodes.iter())
        .cloned()
        .collect();
    let qform = match &cfg.qform {
        Some(f) => f.clone(),
        None => Formula::main_effects(Some(&ynode), &predictors),
    };
    let hform_g0 = match &cfg.hform_g0 {
        Some(f) => f.clone(),
        None => Formula::main_effects(None, &ds.roles().wenodes),
    };
    let hform_gstar = cfg.hform_gstar.clone().unwrap_or_else(|| hform_g0.clone());

    // initial Q
    let use_pooled = pooled_q && step == CommunityStep::CommunityLevel;
    let pooled_y_star: Vec<f64> = y_raw.iter().map(|&y| scale.transform(y)).collect();
    let pooled_weight: Vec<f64> = (0..ds.n_obs())
        .map(|i| weights.community_weights[community_of_row[i]] * alpha_rows[i])
        .collect();
    let q_plan = if use_pooled {
        QPlan::PooledIndividual {
            frame: ds.frame(),
            y_star: pooled_y_star,
            weight: pooled_weight,
            det: det_rows.clone(),
            unit_of_row: community_of_row.clone(),
            alpha: alpha_rows.clone(),
            qform: qform.clone(),
        }
    } else {
        QPlan::Direct {
            qform: qform.clone(),
        }
    };
    let q = fit_initial_q(&units, q_plan, &anodes, scale)?;

    // interventions (empty -> evaluate under observed exposures)
    let shortcut = cfg.interventions.is_empty()
        && cfg.target == TargetMethod::TmleIntercept
        && cfg.savetime;
    let specs: Vec<InterventionSpec> = if cfg.interventions.is_empty() {
        vec![InterventionSpec::observed("gstar1")]
    } else {
        cfg.interventions.clone()
    };

    // observed exposures at row and unit level
    let obs_rows: Vec<Vec<f64>> = anodes
        .iter()
        .map(|a| ds.frame().try_column(a).map(|c| c.to_vec()))
        .collect::<Result<_>>()?;
    let obs_unit = rows_to_units(&obs_rows, ds, step)?;
    let observed = ObservedExposures {
        unit: obs_unit.clone(),
        individual: if use_pooled {
            Some(obs_rows.clone())
        } else {
            None
        },
    };

    // estimation weights: deterministic-outcome units carry no mass
    let fit_weight: Vec<f64> = units
        .weight
        .iter()
        .zip(&units.det)
        .map(|(&w, &d)| if d { 0.0 } else { w })
        .collect();

    // g0 fit shared across interventions
    let g0: Option<FittedDensity> = if shortcut {
        None
    } else if let Some(reused) = &cfg.reuse_g0 {
        validate_reuse(reused, &anodes, &units.frame)?;
        Some(reused.clone())
    } else {
        hform_g0.validate_against(&units.frame)?;
        let mut stack_idx: Vec<usize> = (0..units.n_rows()).collect();
        let mut a_cols = obs_unit.clone();
        let mut w = fit_weight.clone();
        if let Some(fg0) = &cfg.f_g0 {
            let sims = sample_gstar(fg0, ds, &cfg.mc, Domain::G0)?;
            for sim in &sims {
                let unit_a = rows_to_units(sim, ds, step)?;
                stack_idx.extend(0..units.n_rows());
                for (dst, src) in a_cols.iter_mut().zip(&unit_a) {
                    dst.extend_from_slice(src);
                }
                w.extend_from_slice(&fit_weight);
            }
        }
        let frame = if stack_idx.len() == units.n_rows() {
            units.frame.clone()
        } else {
            units.frame.select_rows(&stack_idx)
        };
        Some(fit_density(
            &frame,
            &anodes,
            Some(&a_cols),
            &hform_g0,
            Some(&w),
            &cfg.binning,
            cfg.lbound,
        )?)
    };

    let ctx = EngineContext {
        units: &units,
        scale,
        method: cfg.target,
        ci_alpha: cfg.ci_alpha,
    };

    let mut reports: Vec<InterventionReport> = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let row_sims = sample_gstar(spec, ds, &cfg.mc, Domain::Gstar)?;
        let mut unit_sims = Vec::with_capacity(row_sims.len());
        for sim in &row_sims {
            unit_sims.push(rows_to_units(sim, ds, step)?);
        }
        let draws = ExposureDraws {
            unit: unit_sims,
            individual: if use_pooled { Some(row_sims) } else { None },
        };

        let gstar: Option<FittedDensity> = if shortcut {
            None
        } else if let Some(Some(reused)) = cfg.reuse_gstar.get(k) {
            validate_reuse(reused, &anodes, &units.frame)?;
            Some(reused.clone())
        } else {
            hform_gstar.validate_against(&units.frame)?;
            let n_units = units.n_rows();
            let n_sims = draws.unit.len();
            let stack_idx: Vec<usize> = (0..n_sims).flat_map(|_| 0..n_units).collect();
            let frame = if n_sims == 1 {
                units.frame.clone()
            } else {
                units.frame.select_rows(&stack_idx)
            };
            let mut a_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n_units * n_sims); anodes.len()];
            for sim in &draws.unit {
                for (dst, src) in a_cols.iter_mut().zip(sim) {
                    dst.extend_from_slice(src);
                }
            }
            let w: Vec<f64> = stack_idx.iter().map(|&i| fit_weight[i]).collect();
            // share g0's discretization so bin widths cancel in the
            // clever-covariate ratio
            let template = g0
                .as_ref()
                .ok_or_else(|| Error::numeric("g* fit requires a fitted g0"))?;
            Some(crate::density::fit_density_with_template(
                &frame,
                &anodes,
                &a_cols,
                &hform_gstar,
                Some(&w),
                template,
            )?)
        };

        let input = InterventionInput {
            name: spec.name.clone(),
            draws: &draws,
            g0: g0.as_ref(),
            gstar: gstar.as_ref(),
            lbound: cfg.lbound,
        };
        reports.push(estimate_intervention(&ctx, &q, &observed, &input)?);
    }

    let ate: Option<ContrastReport> = if reports.len() == 2 {
        Some(contrast(&ctx, &reports[0], &reports[1])?)
    } else {
        None
    };

    Ok(EstimationReport {
        strategy: strategy_name(step, use_pooled),
        n_units: units.n_groups,
        outcome_bounds: [scale.lower, scale.upper],
        ci_alpha: cfg.ci_alpha,
        interventions: reports,
        ate,
    })
}

/// Map row-level exposure columns to analysis-unit-level columns.
fn rows_to_units(
    a_rows: &[Vec<f64>],
    ds: &HierDataset,
    step: CommunityStep,
) -> Result<Vec<Vec<f64>>> {
    match step {
        CommunityStep::NoCommunity | CommunityStep::IndividualLevel => Ok(a_rows.to_vec()),
        CommunityStep::CommunityLevel => {
            let mut out = Vec::with_capacity(a_rows.len());
            for col in a_rows {
                let mut unit_col = Vec::with_capacity(ds.n_communities());
                for c in ds.communities() {
                    let first = col[c.rows[0]];
                    if c.rows.iter().any(|&r| col[r] != first) {
                        return Err(Error::data(format!(
                            "intervention exposures vary within community `{}`",
                            c.key
                        )));
                    }
                    unit_col.push(first);
                }
                out.push(unit_col);
            }
            Ok(out)
        }
        CommunityStep::PerCommunity => unreachable!(),
    }
}

fn validate_reuse(fd: &FittedDensity, anodes: &[String], frame: &Frame) -> Result<()> {
    if fd.anodes != anodes {
        return Err(Error::config(format!(
            "reused density was fitted for exposures {:?}, run has {:?}",
            fd.anodes, anodes
        )));
    }
    fd.validate_columns(frame)?;
    Ok(())
}

fn run_per_community(
    ds: &HierDataset,
    weights: &WeightScheme,
    cfg: &EstimationConfig,
) -> Result<RunOutput> {
    // degenerate g guard: stratified analysis needs within-community
    // exposure variation
    for a in &ds.roles().anodes {
        let col = ds.frame().try_column(a)?;
        for c in ds.communities() {
            let first = col[c.rows[0]];
            if c.rows.iter().all(|&r| col[r] == first) {
                return Err(Error::data(format!(
                    "per-community analysis is degenerate: exposure `{a}` is constant within community `{}`",
                    c.key
                )));
            }
        }
    }

    let mut entries: Vec<CommunityEntry> = Vec::new();
    for (j, community) in ds.communities().iter().enumerate() {
        let sub = ds.community_subset(j)?;
        let sub_weights = WeightScheme {
            obs_weights: community.rows.iter().map(|&r| weights.obs_weights[r]).collect(),
            community_weights: vec![1.0; community.size()],
            obs_policy: weights.obs_policy,
            community_policy: weights.community_policy,
        };
        let mut sub_cfg = cfg.clone();
        sub_cfg.interventions = cfg
            .interventions
            .iter()
            .map(|s| subset_intervention(s, &community.rows))
            .collect::<Result<_>>()?;
        sub_cfg.f_g0 = cfg
            .f_g0
            .as_ref()
            .map(|s| subset_intervention(s, &community.rows))
            .transpose()?;
        let report = run_single(&sub, &sub_weights, CommunityStep::NoCommunity, false, &sub_cfg)?;
        entries.push(CommunityEntry {
            key: community.key.clone(),
            report,
        });
    }

    // community-weighted pooled summary
    let w = &weights.community_weights;
    let w_total: f64 = w.iter().sum();
    let z = normal_quantile(1.0 - cfg.ci_alpha / 2.0);
    let pool = |extract: &dyn Fn(&EstimationReport) -> Option<(EstimateTriple, EstimateTriple)>|
     -> Option<SummaryBlock> {
        let mut est = [0.0; 3];
        let mut var = [0.0; 3];
        for (entry, &wj) in entries.iter().zip(w) {
            let (e, v) = extract(&entry.report)?;
            let share = wj / w_total;
            for (k, which) in ESTIMATORS.iter().enumerate() {
                est[k] += share * e.get(*which);
                var[k] += share * share * v.get(*which);
            }
        }
        Some(SummaryBlock {
            name: String::new(),
            estimates: EstimateTriple {
                tmle: est[0],
                iptw: est[1],
                gcomp: est[2],
            },
            vars: EstimateTriple {
                tmle: var[0],
                iptw: var[1],
                gcomp: var[2],
            },
            cis: CiTriple {
                tmle: ci_of(est[0], var[0], z),
                iptw: ci_of(est[1], var[1], z),
                gcomp: ci_of(est[2], var[2], z),
            },
        })
    };

    let n_interventions = entries
        .first()
        .map(|e| e.report.interventions.len())
        .unwrap_or(0);
    let mut pooled = Vec::new();
    for k in 0..n_interventions {
        let mut block = pool(&|r: &EstimationReport| {
            r.interventions.get(k).map(|ir| (ir.estimates, ir.vars))
        })
        .ok_or_else(|| Error::numeric("per-community reports are not aligned"))?;
        block.name = entries[0].report.interventions[k].name.clone();
        pooled.push(block);
    }
    let pooled_ate = if n_interventions == 2 {
        pool(&|r: &EstimationReport| r.ate.as_ref().map(|a| (a.estimates, a.vars))).map(|mut b| {
            b.name = "ate".to_string();
            b
        })
    } else {
        None
    };

    Ok(RunOutput::PerCommunity {
        output: PerCommunityOutput {
            communities: entries,
            pooled,
            pooled_ate,
        },
    })
}

fn ci_of(est: f64, var: f64, z: f64) -> [f64; 2] {
    let se = var.sqrt();
    [est - z * se, est + z * se]
}

fn subset_intervention(spec: &InterventionSpec, rows: &[usize]) -> Result<InterventionSpec> {
    let kind = match &spec.kind {
        InterventionKind::Table { columns } => InterventionKind::Table {
            columns: columns
                .iter()
                .map(|col| {
                    if col.len() == 1 {
                        col.clone()
                    } else {
                        rows.iter().map(|&r| col[r]).collect()
                    }
                })
                .collect(),
        },
        other => other.clone(),
    };
    Ok(InterventionSpec {
        name: spec.name.clone(),
        kind,
    })
}

/// Standalone conditional-density fit (the non-hierarchical entry point):
/// fits P(A | W) on the observation rows, under the observed exposures or
/// under a supplied intervention.
pub fn fit_generic_density(
    ds: &HierDataset,
    f_gstar: Option<&InterventionSpec>,
    gform: Option<&Formula>,
    binning: &BinningConfig,
    lbound: f64,
    mc: &McConfig,
) -> Result<FittedDensity> {
    let anodes = ds.roles().anodes.clone();
    let hform = match gform {
        Some(f) => f.clone(),
        None => Formula::main_effects(None, &ds.roles().wenodes),
    };
    hform.validate_against(ds.frame())?;
    match f_gstar {
        None => fit_density(
            ds.frame(),
            &anodes,
            None,
            &hform,
            None,
            binning,
            lbound,
        ),
        Some(spec) => {
            let sims = sample_gstar(spec, ds, mc, Domain::Gstar)?;
            let n = ds.n_obs();
            let n_sims = sims.len();
            let stack_idx: Vec<usize> = (0..n_sims).flat_map(|_| 0..n).collect();
            let frame = if n_sims == 1 {
                ds.frame().clone()
            } else {
                ds.frame().select_rows(&stack_idx)
            };
            let mut a_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n * n_sims); anodes.len()];
            for sim in &sims {
                for (dst, src) in a_cols.iter_mut().zip(sim) {
                    dst.extend_from_slice(src);
                }
            }
            fit_density(&frame, &anodes, Some(&a_cols), &hform, None, binning, lbound)
        }
    }
}

/// Pooled individual-level exposure fit for the individual-level strategy
/// (the empirical analog of marginalizing the joint mechanism over the
/// other members' covariates).
pub fn marginalize_individual_g(
    ds: &HierDataset,
    weights: &WeightScheme,
    hform: Option<&Formula>,
    binning: &BinningConfig,
    lbound: f64,
) -> Result<FittedDensity> {
    let hform = match hform {
        Some(f) => f.clone(),
        None => Formula::main_effects(None, &ds.roles().wenodes),
    };
    let alpha = weights.alpha(ds)?;
    let community_of_row = ds.community_of_row();
    let w: Vec<f64> = (0..ds.n_obs())
        .map(|i| weights.community_weights[community_of_row[i]] * alpha[i])
        .collect();
    fit_density(
        ds.frame(),
        &ds.roles().anodes,
        None,
        &hform,
        Some(&w),
        binning,
        lbound,
    )
}

//! The estimation core: bounded-outcome transform, initial outcome
//! regression, clever covariate, targeting step, substitution/IPTW/GCOMP
//! estimators, and influence-curve based variance.
//!
//! Everything runs on the transformed outcome scale Y* = (Y - a)/(b - a);
//! estimates, influence curves, and variances are mapped back to the
//! original scale at the end, so confidence intervals land on the user's
//! scale and all three estimators are equivariant under affine relabeling
//! of the outcome.

use crate::density::{eval_density_diag, FittedDensity};
use crate::error::{Error, Result};
use crate::formula::Formula;
use crate::frame::Frame;
use crate::glm::{self, expit, logit, Family, FitControl, GlmFit, PredictKind};
use serde::{Deserialize, Serialize};

/// Bounded-outcome scale. `lower`/`upper` bound the raw outcome; `alpha`
/// keeps initial predictions away from {0,1} (clamped into
/// `(1 - alpha, alpha)`) so the logistic fluctuation stays finite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutcomeScale {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

pub const DEFAULT_QBOUNDS_ALPHA: f64 = 0.995;

impl OutcomeScale {
    /// Default bounds: the outcome range widened by 10% of the range at
    /// each end (a constant outcome gets a unit-width guard interval).
    pub fn from_data(y: &[f64], qbounds: Option<[f64; 2]>, alpha: f64) -> Result<OutcomeScale> {
        if !(0.5 < alpha && alpha < 1.0) {
            return Err(Error::config("alpha must lie in (0.5, 1)"));
        }
        let (lower, upper) = match qbounds {
            Some([a, b]) => {
                if a >= b {
                    return Err(Error::config("qbounds must satisfy lower < upper"));
                }
                (a, b)
            }
            None => {
                let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let range = max - min;
                if range > 0.0 {
                    (min - 0.1 * range, max + 0.1 * range)
                } else {
                    (min - 0.5, max + 0.5)
                }
            }
        };
        Ok(OutcomeScale { lower, upper, alpha })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Map a raw outcome into [0, 1] (clamping to the bounds first).
    pub fn transform(&self, y: f64) -> f64 {
        ((y.clamp(self.lower, self.upper)) - self.lower) / self.width()
    }

    pub fn back(&self, y_star: f64) -> f64 {
        self.lower + self.width() * y_star
    }

    /// Clamp a predicted mean into (1 - alpha, alpha).
    pub fn clamp_prediction(&self, p: f64) -> f64 {
        p.clamp(1.0 - self.alpha, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMethod {
    /// Weighted intercept-only fluctuation: offset logit(Q), weights h.
    TmleIntercept,
    /// Unweighted covariate fluctuation: offset logit(Q), covariate h.
    TmleCovariate,
}

/// Analysis units the engine runs on. For community-level analyses rows are
/// communities; for individual-level analyses rows are individuals grouped
/// by community (influence curves aggregate within `ic_group`).
#[derive(Debug, Clone)]
pub struct AnalysisUnits {
    pub frame: Frame,
    pub y_star: Vec<f64>,
    /// Per-row analysis weight (community weight, times alpha for
    /// individual-level rows).
    pub weight: Vec<f64>,
    pub det: Vec<bool>,
    /// IC aggregation group of each row (identity for community rows).
    pub ic_group: Vec<usize>,
    pub n_groups: usize,
    /// Per-group weight (community weight).
    pub group_weight: Vec<f64>,
    /// Within-group share of each row (alpha; 1 for community rows).
    pub alpha: Vec<f64>,
}

impl AnalysisUnits {
    pub fn n_rows(&self) -> usize {
        self.y_star.len()
    }
}

/// How the initial outcome regression is fit and turned into unit-level
/// predictions.
pub enum QPlan<'a> {
    /// Fit directly on the analysis units.
    Direct { qform: Formula },
    /// Pooled individual-level regression; predictions are alpha-averaged
    /// within community to give unit-level values.
    PooledIndividual {
        frame: &'a Frame,
        y_star: Vec<f64>,
        weight: Vec<f64>,
        det: Vec<bool>,
        unit_of_row: Vec<usize>,
        alpha: Vec<f64>,
        qform: Formula,
    },
}

/// Exposure values for one intervention: per-simulation matrices at both
/// the analysis-unit level and (when a pooled Q is in play) the individual
/// row level.
#[derive(Debug, Clone)]
pub struct ExposureDraws {
    /// `unit[s][k][row]`: sim s, exposure k, analysis row.
    pub unit: Vec<Vec<Vec<f64>>>,
    /// Individual-row-level draws aligned with the pooled-Q frame.
    pub individual: Option<Vec<Vec<Vec<f64>>>>,
}

/// Fitted initial outcome model plus the machinery to predict unit-level
/// clamped means at arbitrary exposure values.
pub struct InitialQ<'a> {
    fit: GlmFit,
    plan: QPlan<'a>,
    anodes: Vec<String>,
    scale: OutcomeScale,
}

pub fn fit_initial_q<'a>(
    units: &AnalysisUnits,
    plan: QPlan<'a>,
    anodes: &[String],
    scale: OutcomeScale,
) -> Result<InitialQ<'a>> {
    let control = FitControl::default();
    let fit = match &plan {
        QPlan::Direct { qform } => {
            let w: Vec<f64> = units
                .weight
                .iter()
                .zip(&units.det)
                .map(|(&w, &d)| if d { 0.0 } else { w })
                .collect();
            glm::fit_with_response(
                Family::BinomialLogit,
                qform,
                &units.frame,
                &units.y_star,
                Some(&w),
                None,
                &control,
            )?
        }
        QPlan::PooledIndividual {
            frame,
            y_star,
            weight,
            det,
            qform,
            ..
        } => {
            let w: Vec<f64> = weight
                .iter()
                .zip(det)
                .map(|(&w, &d)| if d { 0.0 } else { w })
                .collect();
            glm::fit_with_response(
                Family::BinomialLogit,
                qform,
                frame,
                y_star,
                Some(&w),
                None,
                &control,
            )?
        }
    };
    Ok(InitialQ {
        fit,
        plan,
        anodes: anodes.to_vec(),
        scale,
    })
}

impl InitialQ<'_> {
    /// Clamped unit-level predictions at the given exposures.
    pub fn predict_units(
        &self,
        units: &AnalysisUnits,
        unit_a: &[Vec<f64>],
        individual_a: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        match &self.plan {
            QPlan::Direct { .. } => {
                let frame = with_exposures(&units.frame, &self.anodes, unit_a)?;
                let preds = self.fit.predict(&frame, None, PredictKind::Response)?;
                Ok(preds
                    .into_iter()
                    .map(|p| self.scale.clamp_prediction(p))
                    .collect())
            }
            QPlan::PooledIndividual {
                frame,
                unit_of_row,
                alpha,
                ..
            } => {
                let a = individual_a.ok_or_else(|| {
                    Error::numeric("pooled Q prediction needs individual-level exposures")
                })?;
                let pf = with_exposures(frame, &self.anodes, a)?;
                let preds = self.fit.predict(&pf, None, PredictKind::Response)?;
                let mut agg = vec![0.0; units.n_rows()];
                for (i, &u) in unit_of_row.iter().enumerate() {
                    agg[u] += alpha[i] * preds[i];
                }
                Ok(agg
                    .into_iter()
                    .map(|p| self.scale.clamp_prediction(p))
                    .collect())
            }
        }
    }

    pub fn fit(&self) -> &GlmFit {
        &self.fit
    }
}

/// Substitute exposure columns into a frame copy.
pub fn with_exposures(frame: &Frame, anodes: &[String], a: &[Vec<f64>]) -> Result<Frame> {
    if a.len() != anodes.len() {
        return Err(Error::data("exposure matrix column count mismatch"));
    }
    let mut out = frame.clone();
    for (name, col) in anodes.iter().zip(a) {
        out.set_column(name, col.clone())?;
    }
    Ok(out)
}

/// Clever covariate: density ratio g*(a|x) / g(a|x) with the denominator
/// floored at `lbound` and the ratio capped at `1/lbound`.
#[derive(Debug, Clone)]
pub struct CleverCovariate {
    pub h: Vec<f64>,
    /// Fraction of rows where flooring or capping bit.
    pub truncated: Vec<bool>,
}

pub fn compute_h(g0: &[f64], gstar: &[f64], lbound: f64) -> CleverCovariate {
    let cap = 1.0 / lbound;
    let mut h = Vec::with_capacity(g0.len());
    let mut truncated = Vec::with_capacity(g0.len());
    for (&d, &n) in g0.iter().zip(gstar) {
        let denom = d.max(lbound);
        let raw = n / denom;
        let capped = raw.min(cap);
        truncated.push(denom != d || capped != raw);
        h.push(capped);
    }
    CleverCovariate { h, truncated }
}

/// Result of the targeting step.
#[derive(Debug, Clone)]
pub struct Fluctuation {
    pub epsilon: f64,
    pub converged: bool,
}

/// Fit the fluctuation and return epsilon. Deterministic-outcome rows are
/// excluded. On non-convergence epsilon falls back to 0 (the targeted
/// estimator then degrades to GCOMP).
pub fn target(
    units: &AnalysisUnits,
    q_obs: &[f64],
    h_obs: &[f64],
    method: TargetMethod,
) -> Result<Fluctuation> {
    let n = units.n_rows();
    let offset: Vec<f64> = q_obs.iter().map(|&q| logit(q)).collect();
    let control = FitControl::fluctuation();
    let (cols, names, w): (Vec<Vec<f64>>, Vec<String>, Vec<f64>) = match method {
        TargetMethod::TmleCovariate => (
            vec![h_obs.to_vec()],
            vec!["h".to_string()],
            units
                .weight
                .iter()
                .zip(&units.det)
                .map(|(&w, &d)| if d { 0.0 } else { w })
                .collect(),
        ),
        TargetMethod::TmleIntercept => (
            vec![vec![1.0; n]],
            vec!["(Intercept)".to_string()],
            units
                .weight
                .iter()
                .zip(h_obs)
                .zip(&units.det)
                .map(|((&w, &h), &d)| if d { 0.0 } else { w * h })
                .collect(),
        ),
    };
    if !w.iter().any(|&v| v > 0.0) {
        return Ok(Fluctuation {
            epsilon: 0.0,
            converged: false,
        });
    }
    let fit = glm::fit_design(
        Family::BinomialLogit,
        &names,
        &cols,
        &units.y_star,
        Some(&w),
        Some(&offset),
        &control,
    )?;
    if fit.converged {
        Ok(Fluctuation {
            epsilon: fit.coefficients[0],
            converged: true,
        })
    } else {
        Ok(Fluctuation {
            epsilon: 0.0,
            converged: false,
        })
    }
}

/// Apply the fluctuation to clamped initial predictions.
pub fn fluctuate(q: &[f64], h: &[f64], eps: f64, method: TargetMethod) -> Vec<f64> {
    match method {
        TargetMethod::TmleCovariate => q
            .iter()
            .zip(h)
            .map(|(&qi, &hi)| expit(logit(qi) + eps * hi))
            .collect(),
        TargetMethod::TmleIntercept => q.iter().map(|&qi| expit(logit(qi) + eps)).collect(),
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimateTriple {
    pub tmle: f64,
    pub iptw: f64,
    pub gcomp: f64,
}

impl EstimateTriple {
    pub fn get(&self, which: Estimator) -> f64 {
        match which {
            Estimator::Tmle => self.tmle,
            Estimator::Iptw => self.iptw,
            Estimator::Gcomp => self.gcomp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Tmle,
    Iptw,
    Gcomp,
}

pub const ESTIMATORS: [Estimator; 3] = [Estimator::Tmle, Estimator::Iptw, Estimator::Gcomp];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiTriple {
    pub tmle: [f64; 2],
    pub iptw: [f64; 2],
    pub gcomp: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcTriple {
    pub tmle: Vec<f64>,
    pub iptw: Vec<f64>,
    pub gcomp: Vec<f64>,
}

/// Positivity and model-size diagnostics for one intervention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub h_min: f64,
    pub h_max: f64,
    pub h_mean: f64,
    pub truncation_fraction: f64,
    /// Fitted bin/level model counts per exposure factor; absent when the
    /// exposure mechanism was skipped entirely.
    pub g0_models: Option<Vec<usize>>,
    pub gstar_models: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionReport {
    pub name: String,
    pub estimates: EstimateTriple,
    pub vars: EstimateTriple,
    pub cis: CiTriple,
    pub epsilon: f64,
    pub fluctuation_converged: bool,
    pub diagnostics: Diagnostics,
    pub ic: IcTriple,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastReport {
    pub name: String,
    pub estimates: EstimateTriple,
    pub vars: EstimateTriple,
    pub cis: CiTriple,
    pub ic: IcTriple,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationReport {
    pub strategy: String,
    pub n_units: usize,
    pub outcome_bounds: [f64; 2],
    pub ci_alpha: f64,
    pub interventions: Vec<InterventionReport>,
    pub ate: Option<ContrastReport>,
}

impl EstimationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Observed exposures at the analysis-unit level (and individual level
/// when a pooled Q fit needs them).
#[derive(Debug, Clone)]
pub struct ObservedExposures {
    pub unit: Vec<Vec<f64>>,
    pub individual: Option<Vec<Vec<f64>>>,
}

/// Everything the engine needs to estimate one intervention.
pub struct InterventionInput<'a> {
    pub name: String,
    pub draws: &'a ExposureDraws,
    /// Fitted g0 and g* (None means the savetime shortcut: h == 1).
    pub g0: Option<&'a FittedDensity>,
    pub gstar: Option<&'a FittedDensity>,
    pub lbound: f64,
}

pub struct EngineContext<'a> {
    pub units: &'a AnalysisUnits,
    pub scale: OutcomeScale,
    pub method: TargetMethod,
    pub ci_alpha: f64,
}

/// Estimate one intervention: initial Q is shared across interventions,
/// the clever covariate / fluctuation / estimates are per-intervention.
pub fn estimate_intervention(
    ctx: &EngineContext,
    q: &InitialQ,
    obs: &ObservedExposures,
    input: &InterventionInput,
) -> Result<InterventionReport> {
    let units = ctx.units;
    let n = units.n_rows();
    let n_sims = input.draws.unit.len();
    if n_sims == 0 {
        return Err(Error::numeric("no exposure draws supplied"));
    }

    // clever covariate at the observed exposures, and at each draw
    let (h_obs, truncated, h_star, g_diag): (Vec<f64>, Vec<bool>, Vec<Vec<f64>>, bool) =
        match (input.g0, input.gstar) {
            (Some(g0), Some(gstar)) => {
                let d0 = eval_density_diag(g0, &units.frame, &obs.unit)?;
                let ds = eval_density_diag(gstar, &units.frame, &obs.unit)?;
                let clever = compute_h(&d0.values, &ds.values, input.lbound);
                let mut h_star = Vec::with_capacity(n_sims);
                for s in 0..n_sims {
                    let a = &input.draws.unit[s];
                    let d0s = eval_density_diag(g0, &units.frame, a)?;
                    let dss = eval_density_diag(gstar, &units.frame, a)?;
                    h_star.push(compute_h(&d0s.values, &dss.values, input.lbound).h);
                }
                let trunc: Vec<bool> = clever
                    .truncated
                    .iter()
                    .zip(&d0.truncated)
                    .zip(&ds.truncated)
                    .map(|((&a, &b), &c)| a || b || c)
                    .collect();
                (clever.h, trunc, h_star, true)
            }
            (None, None) => {
                // savetime shortcut: h == 1 everywhere
                (vec![1.0; n], vec![false; n], vec![vec![1.0; n]; n_sims], false)
            }
            _ => {
                return Err(Error::numeric(
                    "g0 and gstar must both be present or both absent",
                ))
            }
        };

    // initial predictions at observed exposures and at each draw
    let q_obs = q.predict_units(units, &obs.unit, obs.individual.as_deref())?;
    let mut q_init_star = Vec::with_capacity(n_sims);
    for s in 0..n_sims {
        let ind = input
            .draws
            .individual
            .as_ref()
            .map(|m| m[s].as_slice());
        q_init_star.push(q.predict_units(units, &input.draws.unit[s], ind)?);
    }

    // targeting
    let fluct = target(units, &q_obs, &h_obs, ctx.method)?;
    let q_star_obs = fluctuate(&q_obs, &h_obs, fluct.epsilon, ctx.method);
    let q_star_star: Vec<Vec<f64>> = (0..n_sims)
        .map(|s| fluctuate(&q_init_star[s], &h_star[s], fluct.epsilon, ctx.method))
        .collect();

    // per-unit substitution terms: E_{g*}[Q(A*, .)] via the shared draws
    let qbar_star = mean_over_sims(&q_star_star);
    let qbar_init = mean_over_sims(&q_init_star);

    let include: Vec<bool> = units.det.iter().map(|&d| !d).collect();
    let w_total: f64 = units
        .weight
        .iter()
        .zip(&include)
        .filter(|(_, inc)| **inc)
        .map(|(w, _)| w)
        .sum();
    if w_total <= 0.0 {
        return Err(Error::numeric("no analysis units with positive weight"));
    }
    let wmean = |vals: &[f64]| -> f64 {
        units
            .weight
            .iter()
            .zip(vals)
            .zip(&include)
            .filter(|(_, inc)| **inc)
            .map(|((w, v), _)| w * v)
            .sum::<f64>()
            / w_total
    };

    let psi_tmle = wmean(&qbar_star);
    let psi_gcomp = wmean(&qbar_init);
    let hy: Vec<f64> = h_obs
        .iter()
        .zip(&units.y_star)
        .map(|(&h, &y)| h * y)
        .collect();
    let psi_iptw = wmean(&hy);

    // group-level influence curves
    let ic_tmle = group_ic(units, &include, |i| {
        h_obs[i] * (units.y_star[i] - q_star_obs[i]) + qbar_star[i] - psi_tmle
    });
    let ic_iptw = group_ic(units, &include, |i| hy[i] - psi_iptw);
    let ic_gcomp = group_ic(units, &include, |i| qbar_init[i] - psi_gcomp);

    let width = ctx.scale.width();
    let z = normal_quantile(1.0 - ctx.ci_alpha / 2.0);
    let finalize = |psi_star: f64, ic: Vec<f64>| -> (f64, f64, [f64; 2], Vec<f64>) {
        let est = ctx.scale.back(psi_star);
        let ic_orig: Vec<f64> = ic.iter().map(|v| v * width).collect();
        let var = ic_variance(&ic_orig);
        let se = var.sqrt();
        (est, var, [est - z * se, est + z * se], ic_orig)
    };
    let (est_t, var_t, ci_t, ic_t) = finalize(psi_tmle, ic_tmle);
    let (est_i, var_i, ci_i, ic_i) = finalize(psi_iptw, ic_iptw);
    let (est_g, var_g, ci_g, ic_g) = finalize(psi_gcomp, ic_gcomp);

    let active: Vec<f64> = h_obs
        .iter()
        .zip(&include)
        .filter(|(_, inc)| **inc)
        .map(|(&h, _)| h)
        .collect();
    let n_active = active.len().max(1);
    let trunc_count = truncated
        .iter()
        .zip(&include)
        .filter(|(&t, &inc)| t && inc)
        .count();
    let diagnostics = Diagnostics {
        h_min: active.iter().cloned().fold(f64::INFINITY, f64::min),
        h_max: active.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        h_mean: active.iter().sum::<f64>() / n_active as f64,
        truncation_fraction: trunc_count as f64 / n_active as f64,
        g0_models: if g_diag {
            input.g0.map(|g| g.models_per_factor())
        } else {
            None
        },
        gstar_models: if g_diag {
            input.gstar.map(|g| g.models_per_factor())
        } else {
            None
        },
    };

    Ok(InterventionReport {
        name: input.name.clone(),
        estimates: EstimateTriple {
            tmle: est_t,
            iptw: est_i,
            gcomp: est_g,
        },
        vars: EstimateTriple {
            tmle: var_t,
            iptw: var_i,
            gcomp: var_g,
        },
        cis: CiTriple {
            tmle: ci_t,
            iptw: ci_i,
            gcomp: ci_g,
        },
        epsilon: fluct.epsilon,
        fluctuation_converged: fluct.converged,
        diagnostics,
        ic: IcTriple {
            tmle: ic_t,
            iptw: ic_i,
            gcomp: ic_g,
        },
    })
}

fn mean_over_sims(per_sim: &[Vec<f64>]) -> Vec<f64> {
    let n_sims = per_sim.len();
    let n = per_sim[0].len();
    let mut out = vec![0.0; n];
    for sim in per_sim {
        for (o, v) in out.iter_mut().zip(sim) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= n_sims as f64;
    }
    out
}

/// Aggregate per-row contributions into per-group influence-curve values:
/// IC_j = (w_j / mean w) * sum_{i in j} alpha_i * contrib(i), dropping
/// det-masked rows and groups with no live rows.
fn group_ic(
    units: &AnalysisUnits,
    include: &[bool],
    contrib: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let mut sums = vec![0.0; units.n_groups];
    let mut live = vec![false; units.n_groups];
    for i in 0..units.n_rows() {
        if include[i] {
            sums[units.ic_group[i]] += units.alpha[i] * contrib(i);
            live[units.ic_group[i]] = true;
        }
    }
    let live_groups: Vec<usize> = (0..units.n_groups).filter(|&g| live[g]).collect();
    let wbar: f64 = live_groups
        .iter()
        .map(|&g| units.group_weight[g])
        .sum::<f64>()
        / live_groups.len().max(1) as f64;
    live_groups
        .iter()
        .map(|&g| units.group_weight[g] / wbar * sums[g])
        .collect()
}

/// Centered sample variance of the IC over units, divided by the unit
/// count: Var(psi-hat) = s^2(IC) / J.
pub fn ic_variance(ic: &[f64]) -> f64 {
    let j = ic.len();
    if j == 0 {
        return 0.0;
    }
    let mean = ic.iter().sum::<f64>() / j as f64;
    let ss = ic.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / j as f64;
    ss / j as f64
}

/// Contrast two interventions estimated on the same units (ATE when both
/// are static).
pub fn contrast(
    ctx: &EngineContext,
    r1: &InterventionReport,
    r2: &InterventionReport,
) -> Result<ContrastReport> {
    if r1.ic.tmle.len() != r2.ic.tmle.len() {
        return Err(Error::numeric(
            "cannot contrast reports with different unit counts",
        ));
    }
    let z = normal_quantile(1.0 - ctx.ci_alpha / 2.0);
    let mut estimates = [0.0; 3];
    let mut vars = [0.0; 3];
    let mut cis = [[0.0; 2]; 3];
    let mut ics: Vec<Vec<f64>> = Vec::with_capacity(3);
    for (k, which) in ESTIMATORS.iter().enumerate() {
        let est = r1.estimates.get(*which) - r2.estimates.get(*which);
        let ic1 = ic_of(&r1.ic, *which);
        let ic2 = ic_of(&r2.ic, *which);
        let ic: Vec<f64> = ic1.iter().zip(ic2).map(|(a, b)| a - b).collect();
        let var = ic_variance(&ic);
        let se = var.sqrt();
        estimates[k] = est;
        vars[k] = var;
        cis[k] = [est - z * se, est + z * se];
        ics.push(ic);
    }
    let ic_gcomp = ics.pop().unwrap();
    let ic_iptw = ics.pop().unwrap();
    let ic_tmle = ics.pop().unwrap();
    Ok(ContrastReport {
        name: format!("{} - {}", r1.name, r2.name),
        estimates: EstimateTriple {
            tmle: estimates[0],
            iptw: estimates[1],
            gcomp: estimates[2],
        },
        vars: EstimateTriple {
            tmle: vars[0],
            iptw: vars[1],
            gcomp: vars[2],
        },
        cis: CiTriple {
            tmle: cis[0],
            iptw: cis[1],
            gcomp: cis[2],
        },
        ic: IcTriple {
            tmle: ic_tmle,
            iptw: ic_iptw,
            gcomp: ic_gcomp,
        },
    })
}

fn ic_of(ic: &IcTriple, which: Estimator) -> &[f64] {
    match which {
        Estimator::Tmle => &ic.tmle,
        Estimator::Iptw => &ic.iptw,
        Estimator::Gcomp => &ic.gcomp,
    }
}

/// Standard normal quantile (Acklam's rational approximation, |error| < 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(0.0 < p && p < 1.0, "quantile needs p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

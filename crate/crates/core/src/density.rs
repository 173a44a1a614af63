//! Conditional exposure distribution estimation g(A | W, E).
//!
//! Binary and categorical exposures get logistic (hazard-chained)
//! probability models. Continuous exposures are discretized into bins —
//! equal-mass, equal-length, or diagonally-cut-histogram cutoffs — and each
//! bin-membership indicator is regressed on the predictors given
//! not-in-an-earlier-bin, so the per-bin probabilities telescope to one.
//! -inf/+inf are appended as outermost cutoffs, so a layout with k interior
//! bins carries k + 2 fitted bin models. Multivariate exposures factorize
//! sequentially in declaration order.

use crate::error::{Error, Result};
use crate::formula::{Formula, Term};
use crate::frame::Frame;
use crate::glm::{self, Family, FitControl, GlmFit, PredictKind};
use serde::{Deserialize, Serialize};

pub const DENSITY_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LBOUND: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMethod {
    EqualMass,
    EqualLen,
    Dhist,
}

/// Discretization controls for continuous exposures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinningConfig {
    pub method: BinMethod,
    /// Interior bin count; `None` means the method default (5).
    pub nbins: Option<usize>,
    /// Most distinct values a variable may have and still count as
    /// categorical.
    pub maxncats: usize,
    /// Cap on observations per bin; under `equal_mass` the bin count grows
    /// to `round(n / max_n_per_bin)` when that exceeds `nbins`.
    pub max_n_per_bin: usize,
    /// Fit one pooled hazard regression with the bin index as a covariate
    /// instead of one regression per bin.
    pub pool_contin_var: bool,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            method: BinMethod::EqualMass,
            nbins: None,
            maxncats: 10,
            max_n_per_bin: 500,
            pool_contin_var: false,
        }
    }
}

pub const DEFAULT_NBINS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Binary,
    Categorical,
    Continuous,
}

/// Classify by distinct-value count: <=2 binary, <=maxncats categorical,
/// else continuous.
pub fn classify_variable(values: &[f64], maxncats: usize) -> Result<VarKind> {
    if values.is_empty() {
        return Err(Error::data("cannot classify an empty variable"));
    }
    let mut distinct = distinct_sorted(values);
    Ok(if distinct.len() <= 2 {
        VarKind::Binary
    } else if distinct.len() <= maxncats {
        VarKind::Categorical
    } else {
        distinct.clear();
        VarKind::Continuous
    })
}

fn distinct_sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

/// Finite cutoffs of a bin layout: `cutoffs[0] <= ... <= cutoffs[k]` bound k
/// interior bins; bins 0 and k+1 are the (-inf, min) and (max, +inf) edge
/// bins. Every real value maps to exactly one of the k + 2 bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinLayout {
    pub cutoffs: Vec<f64>,
}

impl BinLayout {
    pub fn interior_bins(&self) -> usize {
        self.cutoffs.len() - 1
    }

    pub fn total_bins(&self) -> usize {
        self.interior_bins() + 2
    }

    /// Bin index of a value: 0 for the left edge bin, 1..=k for interior
    /// bins (half-open, last interior bin closed), k+1 for the right edge.
    pub fn bin_of(&self, value: f64) -> usize {
        let k = self.interior_bins();
        let first = self.cutoffs[0];
        let last = self.cutoffs[k];
        if value < first {
            return 0;
        }
        if value > last {
            return k + 1;
        }
        if value == last {
            return k;
        }
        // binary search for the half-open interval [c_i, c_{i+1})
        let mut lo = 0usize;
        let mut hi = k;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if value >= self.cutoffs[mid] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo + 1
    }

    /// Width used for density normalization. Edge bins are infinitely wide;
    /// they borrow the adjacent interior bin's width so evaluated densities
    /// stay positive and finite.
    pub fn width_of(&self, bin: usize) -> f64 {
        let k = self.interior_bins();
        let b = if bin == 0 {
            1
        } else if bin == k + 1 {
            k
        } else {
            bin
        };
        self.cutoffs[b] - self.cutoffs[b - 1]
    }
}

/// Pick bin cutoffs for a continuous variable.
pub fn choose_bins(values: &[f64], cfg: &BinningConfig, n_obs: usize) -> Result<BinLayout> {
    let sorted = {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    if sorted.is_empty() {
        return Err(Error::data("cannot bin an empty variable"));
    }
    let requested = cfg.nbins.unwrap_or(DEFAULT_NBINS).max(1);
    let k = match cfg.method {
        BinMethod::EqualMass => {
            let by_mass = (n_obs as f64 / cfg.max_n_per_bin as f64).round() as usize;
            requested.max(by_mass.max(1))
        }
        BinMethod::EqualLen | BinMethod::Dhist => requested,
    };
    let distinct = distinct_sorted(&sorted);
    let k = k.min(distinct.len().max(1));

    let mut cutoffs = match cfg.method {
        BinMethod::EqualMass => {
            let mut c: Vec<f64> = (0..=k)
                .map(|i| quantile_type7(&sorted, i as f64 / k as f64))
                .collect();
            c.dedup();
            c
        }
        BinMethod::EqualLen => {
            let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
            let mut c: Vec<f64> = (0..=k)
                .map(|i| min + (max - min) * i as f64 / k as f64)
                .collect();
            c.dedup();
            c
        }
        BinMethod::Dhist => dhist_cutoffs(&sorted, k),
    };
    if cutoffs.len() < 2 {
        // all values identical; force one degenerate-width interior bin
        let v = cutoffs[0];
        cutoffs = vec![v - 0.5, v + 0.5];
    }
    Ok(BinLayout { cutoffs })
}

/// Type-7 (linear interpolation of order statistics) empirical quantile.
fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi.min(n - 1)] - sorted[lo])
}

/// Diagonally-cut-histogram cutoffs (Denby-Mallows): equally space the
/// transform a*x + n*Fhat(x) with slope a = 5 * IQR, reading the cutoffs
/// off the sorted sample where the parallel cuts land.
fn dhist_cutoffs(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let iqr = quantile_type7(sorted, 0.75) - quantile_type7(sorted, 0.25);
    let a = 5.0 * iqr;
    let s: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| a * x + (i + 1) as f64)
        .collect();
    let (s_min, s_max) = (s[0], s[n - 1]);
    let mut cutoffs = Vec::with_capacity(k + 1);
    cutoffs.push(sorted[0]);
    let mut pos = 0usize;
    for j in 1..k {
        let target = s_min + (s_max - s_min) * j as f64 / k as f64;
        while pos < n - 1 && s[pos] < target {
            pos += 1;
        }
        cutoffs.push(sorted[pos]);
    }
    cutoffs.push(sorted[n - 1]);
    cutoffs.dedup();
    cutoffs
}

/// Fitted model for one exposure factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FactorModel {
    /// Two-level exposure: logistic model for P(A = level1 | predictors).
    Binary {
        level0: f64,
        level1: f64,
        fit: GlmFit,
    },
    /// Few-level exposure: one-vs-rest hazards in ascending level order
    /// (the terminal level's hazard is fitted like the rest).
    Categorical { levels: Vec<f64>, hazards: Vec<GlmFit> },
    /// Continuous exposure: bin layout plus per-bin hazard fits.
    Continuous {
        layout: BinLayout,
        hazards: Vec<GlmFit>,
    },
    /// Continuous exposure with one pooled hazard fit (bin index enters as
    /// the `__bin__` covariate).
    ContinuousPooled { layout: BinLayout, fit: GlmFit },
}

impl FactorModel {
    /// Number of fitted bin/level models this factor carries.
    pub fn n_models(&self) -> usize {
        match self {
            FactorModel::Binary { .. } => 1,
            FactorModel::Categorical { hazards, .. } => hazards.len(),
            FactorModel::Continuous { hazards, .. } => hazards.len(),
            FactorModel::ContinuousPooled { layout, .. } => layout.total_bins(),
        }
    }
}

/// One factor of the sequential factorization: the exposure column it
/// models and the predictor terms it conditions on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityFactor {
    pub anode: String,
    pub terms: Vec<Term>,
    pub model: FactorModel,
}

/// Fitted conditional exposure distribution, serializable for reuse across
/// runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedDensity {
    pub format_version: u32,
    pub anodes: Vec<String>,
    pub factors: Vec<DensityFactor>,
    pub lbound: f64,
    pub config: BinningConfig,
}

impl FittedDensity {
    /// Fitted model counts per factor (k_total for continuous factors).
    pub fn models_per_factor(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.model.n_models()).collect()
    }

    pub fn n_models(&self) -> usize {
        self.models_per_factor().iter().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<FittedDensity> {
        let fd: FittedDensity = serde_json::from_str(text)?;
        if fd.format_version != DENSITY_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported density format version {}",
                fd.format_version
            )));
        }
        Ok(fd)
    }

    /// Check the model can be evaluated against a frame with these columns.
    pub fn validate_columns(&self, frame: &Frame) -> Result<()> {
        for f in &self.factors {
            for t in &f.terms {
                for c in t.columns() {
                    // prior anodes are substituted at eval time
                    if !frame.has_column(c) && !self.anodes.iter().any(|a| a == c) {
                        return Err(Error::data(format!(
                            "fitted density references missing column `{c}`"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fit the conditional density of `anodes` given the predictor terms of
/// `hform` over the rows of `frame`, optionally weighted.
///
/// The exposure values may come from a column of `frame` itself (fitting
/// g0) or from a supplied matrix (fitting g* on sampled exposures).
pub fn fit_density(
    frame: &Frame,
    anodes: &[String],
    a_values: Option<&[Vec<f64>]>,
    hform: &Formula,
    weights: Option<&[f64]>,
    cfg: &BinningConfig,
    lbound: f64,
) -> Result<FittedDensity> {
    if anodes.is_empty() {
        return Err(Error::config("no exposure columns to fit"));
    }
    if !(0.0 < lbound && lbound < 1.0) {
        return Err(Error::config("lbound must lie in (0,1)"));
    }
    let n = frame.n_rows();
    let a_cols: Vec<Vec<f64>> = match a_values {
        Some(m) => {
            if m.len() != anodes.len() || m.iter().any(|c| c.len() != n) {
                return Err(Error::data("exposure matrix shape mismatch"));
            }
            m.to_vec()
        }
        None => anodes
            .iter()
            .map(|a| frame.try_column(a).map(|c| c.to_vec()))
            .collect::<Result<_>>()?,
    };
    hform.validate_against(frame)?;

    let mut factors = Vec::with_capacity(anodes.len());
    // working frame carries prior exposure factors as predictors
    let mut work = frame.clone();
    for (idx, anode) in anodes.iter().enumerate() {
        let mut terms: Vec<Term> = Vec::new();
        for prior in &anodes[..idx] {
            terms.push(Term::Main(prior.clone()));
        }
        terms.extend(hform.terms.iter().cloned());

        let values = &a_cols[idx];
        let kind = classify_variable(values, cfg.maxncats)?;
        let model = match kind {
            VarKind::Binary => fit_binary(&work, values, &terms, weights)?,
            VarKind::Categorical => fit_categorical(&work, values, &terms, weights)?,
            VarKind::Continuous => fit_continuous(&work, values, &terms, weights, cfg, n)?,
        };
        factors.push(DensityFactor {
            anode: anode.clone(),
            terms,
            model,
        });
        // expose the *modeled* exposure values to later factors
        if work.has_column(anode) {
            work.set_column(anode, values.clone())?;
        } else {
            work.push_column(anode.clone(), values.clone())?;
        }
    }
    Ok(FittedDensity {
        format_version: DENSITY_FORMAT_VERSION,
        anodes: anodes.to_vec(),
        factors,
        lbound,
        config: cfg.clone(),
    })
}

fn hazard_control() -> FitControl {
    FitControl::default()
}

/// Fit one hazard indicator, short-circuiting the degenerate cases: an
/// empty risk set or a constant indicator pins the hazard at (essentially)
/// 0 or 1 via a capped intercept, which keeps edge bins and terminal levels
/// exact and cheap.
fn fit_hazard(
    frame: &Frame,
    y: &[f64],
    formula: &Formula,
    weights: Option<&[f64]>,
) -> Result<GlmFit> {
    let live = |i: usize| weights.map_or(true, |w| w[i] > 0.0);
    let mut any_live = false;
    let mut any_one = false;
    let mut any_zero = false;
    for i in 0..y.len() {
        if live(i) {
            any_live = true;
            if y[i] == 1.0 {
                any_one = true;
            } else {
                any_zero = true;
            }
        }
    }
    if any_live && any_one && any_zero {
        return glm::fit_with_response(
            Family::BinomialLogit,
            formula,
            frame,
            y,
            weights,
            None,
            &hazard_control(),
        );
    }
    let cap = hazard_control().coef_cap;
    let intercept = if any_one { cap } else { -cap };
    degenerate_hazard_fit(frame, formula, intercept)
}

fn degenerate_hazard_fit(frame: &Frame, formula: &Formula, intercept: f64) -> Result<GlmFit> {
    let (names, cols) = crate::formula::design_columns(frame, formula.intercept, &formula.terms)?;
    let p = cols.len();
    let mut coefficients = vec![0.0; p];
    let mut aliased = vec![true; p];
    if formula.intercept {
        coefficients[0] = intercept;
        aliased[0] = false;
    }
    Ok(GlmFit {
        family: Family::BinomialLogit,
        intercept: formula.intercept,
        terms: formula.terms.clone(),
        names,
        coefficients,
        aliased,
        converged: true,
        iterations: 0,
        dispersion: None,
        capped: true,
    })
}

fn fit_binary(
    frame: &Frame,
    values: &[f64],
    terms: &[Term],
    weights: Option<&[f64]>,
) -> Result<FactorModel> {
    let distinct = distinct_sorted(values);
    let (level0, level1) = match distinct.len() {
        1 => (f64::NEG_INFINITY, distinct[0]),
        _ => (distinct[0], distinct[1]),
    };
    let y: Vec<f64> = values
        .iter()
        .map(|&v| if v == level1 { 1.0 } else { 0.0 })
        .collect();
    let formula = Formula {
        response: None,
        intercept: true,
        terms: terms.to_vec(),
    };
    let fit = fit_hazard(frame, &y, &formula, weights)?;
    Ok(FactorModel::Binary { level0, level1, fit })
}

fn fit_categorical(
    frame: &Frame,
    values: &[f64],
    terms: &[Term],
    weights: Option<&[f64]>,
) -> Result<FactorModel> {
    let levels = distinct_sorted(values);
    let formula = Formula {
        response: None,
        intercept: true,
        terms: terms.to_vec(),
    };
    let mut hazards = Vec::with_capacity(levels.len());
    let n = values.len();
    let base: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let mut at_risk: Vec<bool> = vec![true; n];
    for &level in &levels {
        let y: Vec<f64> = values
            .iter()
            .map(|&v| if v == level { 1.0 } else { 0.0 })
            .collect();
        let w: Vec<f64> = base
            .iter()
            .zip(&at_risk)
            .map(|(&b, &r)| if r { b } else { 0.0 })
            .collect();
        let fit = fit_hazard(frame, &y, &formula, Some(&w))?;
        hazards.push(fit);
        for (r, &v) in at_risk.iter_mut().zip(values) {
            if v == level {
                *r = false;
            }
        }
    }
    Ok(FactorModel::Categorical { levels, hazards })
}

fn fit_continuous(
    frame: &Frame,
    values: &[f64],
    terms: &[Term],
    weights: Option<&[f64]>,
    cfg: &BinningConfig,
    n_obs: usize,
) -> Result<FactorModel> {
    let layout = choose_bins(values, cfg, n_obs)?;
    let total = layout.total_bins();
    let bins: Vec<usize> = values.iter().map(|&v| layout.bin_of(v)).collect();
    let n = values.len();
    let base: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };

    if cfg.pool_contin_var {
        // long format: one row per (observation, bin up to its own bin),
        // outcome = indicator of stopping here, bin index as a covariate
        let mut long = Frame::new();
        let mut long_rows: Vec<usize> = Vec::new();
        let mut long_bin: Vec<f64> = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for i in 0..n {
            for b in 0..=bins[i] {
                long_rows.push(i);
                long_bin.push(b as f64);
                y.push(if b == bins[i] { 1.0 } else { 0.0 });
                w.push(base[i]);
            }
        }
        let src = frame.select_rows(&long_rows);
        for (name, col) in src.iter() {
            long.push_column(name, col.to_vec())?;
        }
        long.push_column("__bin__", long_bin)?;
        let mut pooled_terms = vec![Term::Main("__bin__".to_string())];
        pooled_terms.extend(terms.iter().cloned());
        let formula = Formula {
            response: None,
            intercept: true,
            terms: pooled_terms,
        };
        let fit = fit_hazard(&long, &y, &formula, Some(&w))?;
        return Ok(FactorModel::ContinuousPooled { layout, fit });
    }

    let formula = Formula {
        response: None,
        intercept: true,
        terms: terms.to_vec(),
    };
    let mut hazards = Vec::with_capacity(total);
    let mut at_risk: Vec<bool> = vec![true; n];
    for b in 0..total {
        let y: Vec<f64> = bins.iter().map(|&bi| if bi == b { 1.0 } else { 0.0 }).collect();
        let w: Vec<f64> = base
            .iter()
            .zip(&at_risk)
            .map(|(&v, &r)| if r { v } else { 0.0 })
            .collect();
        let fit = fit_hazard(frame, &y, &formula, Some(&w))?;
        hazards.push(fit);
        for (r, &bi) in at_risk.iter_mut().zip(&bins) {
            if bi == b {
                *r = false;
            }
        }
    }
    Ok(FactorModel::Continuous { layout, hazards })
}

/// Fit a density reusing another fit's discretization: factor kinds, bin
/// layouts, and level codings come from `template`; only the hazard
/// regressions are refit on the supplied exposure values.
///
/// This is how g* is fitted against g0: with a shared binarization the bin
/// widths cancel in the clever-covariate ratio, so discretization error
/// does not distort it.
pub fn fit_density_with_template(
    frame: &Frame,
    anodes: &[String],
    a_values: &[Vec<f64>],
    hform: &Formula,
    weights: Option<&[f64]>,
    template: &FittedDensity,
) -> Result<FittedDensity> {
    if template.anodes != anodes {
        return Err(Error::config(format!(
            "template density was fitted for exposures {:?}, need {:?}",
            template.anodes, anodes
        )));
    }
    let n = frame.n_rows();
    if a_values.len() != anodes.len() || a_values.iter().any(|c| c.len() != n) {
        return Err(Error::data("exposure matrix shape mismatch"));
    }
    hform.validate_against(frame)?;

    let mut factors = Vec::with_capacity(anodes.len());
    let mut work = frame.clone();
    for (idx, anode) in anodes.iter().enumerate() {
        let mut terms: Vec<Term> = Vec::new();
        for prior in &anodes[..idx] {
            terms.push(Term::Main(prior.clone()));
        }
        terms.extend(hform.terms.iter().cloned());
        let formula = Formula {
            response: None,
            intercept: true,
            terms: terms.clone(),
        };
        let values = &a_values[idx];
        let model = match &template.factors[idx].model {
            FactorModel::Binary { level0, level1, .. } => {
                let y: Vec<f64> = values
                    .iter()
                    .map(|&v| if v == *level1 { 1.0 } else { 0.0 })
                    .collect();
                FactorModel::Binary {
                    level0: *level0,
                    level1: *level1,
                    fit: fit_hazard(&work, &y, &formula, weights)?,
                }
            }
            FactorModel::Categorical { levels, .. } => {
                let mapped: Vec<usize> = values.iter().map(|&v| nearest_level(levels, v)).collect();
                let mut hazards = Vec::with_capacity(levels.len());
                let base: Vec<f64> = match weights {
                    Some(w) => w.to_vec(),
                    None => vec![1.0; n],
                };
                let mut at_risk = vec![true; n];
                for li in 0..levels.len() {
                    let y: Vec<f64> = mapped
                        .iter()
                        .map(|&m| if m == li { 1.0 } else { 0.0 })
                        .collect();
                    let w: Vec<f64> = base
                        .iter()
                        .zip(&at_risk)
                        .map(|(&b, &r)| if r { b } else { 0.0 })
                        .collect();
                    hazards.push(fit_hazard(&work, &y, &formula, Some(&w))?);
                    for (r, &m) in at_risk.iter_mut().zip(&mapped) {
                        if m == li {
                            *r = false;
                        }
                    }
                }
                FactorModel::Categorical {
                    levels: levels.clone(),
                    hazards,
                }
            }
            FactorModel::Continuous { layout, .. } => {
                let bins: Vec<usize> = values.iter().map(|&v| layout.bin_of(v)).collect();
                let total = layout.total_bins();
                let base: Vec<f64> = match weights {
                    Some(w) => w.to_vec(),
                    None => vec![1.0; n],
                };
                let mut hazards = Vec::with_capacity(total);
                let mut at_risk = vec![true; n];
                for b in 0..total {
                    let y: Vec<f64> = bins
                        .iter()
                        .map(|&bi| if bi == b { 1.0 } else { 0.0 })
                        .collect();
                    let w: Vec<f64> = base
                        .iter()
                        .zip(&at_risk)
                        .map(|(&v, &r)| if r { v } else { 0.0 })
                        .collect();
                    hazards.push(fit_hazard(&work, &y, &formula, Some(&w))?);
                    for (r, &bi) in at_risk.iter_mut().zip(&bins) {
                        if bi == b {
                            *r = false;
                        }
                    }
                }
                FactorModel::Continuous {
                    layout: layout.clone(),
                    hazards,
                }
            }
            FactorModel::ContinuousPooled { layout, .. } => {
                let bins: Vec<usize> = values.iter().map(|&v| layout.bin_of(v)).collect();
                let base: Vec<f64> = match weights {
                    Some(w) => w.to_vec(),
                    None => vec![1.0; n],
                };
                let mut long_rows = Vec::new();
                let mut long_bin = Vec::new();
                let mut y = Vec::new();
                let mut w = Vec::new();
                for i in 0..n {
                    for b in 0..=bins[i] {
                        long_rows.push(i);
                        long_bin.push(b as f64);
                        y.push(if b == bins[i] { 1.0 } else { 0.0 });
                        w.push(base[i]);
                    }
                }
                let mut long = Frame::new();
                let src = work.select_rows(&long_rows);
                for (name, col) in src.iter() {
                    long.push_column(name, col.to_vec())?;
                }
                long.push_column("__bin__", long_bin)?;
                let mut pooled_terms = vec![Term::Main("__bin__".to_string())];
                pooled_terms.extend(terms.iter().cloned());
                let pooled_formula = Formula {
                    response: None,
                    intercept: true,
                    terms: pooled_terms,
                };
                FactorModel::ContinuousPooled {
                    layout: layout.clone(),
                    fit: fit_hazard(&long, &y, &pooled_formula, Some(&w))?,
                }
            }
        };
        factors.push(DensityFactor {
            anode: anode.clone(),
            terms,
            model,
        });
        if work.has_column(anode) {
            work.set_column(anode, values.clone())?;
        } else {
            work.push_column(anode.clone(), values.clone())?;
        }
    }
    Ok(FittedDensity {
        format_version: DENSITY_FORMAT_VERSION,
        anodes: anodes.to_vec(),
        factors,
        lbound: template.lbound,
        config: template.config.clone(),
    })
}

/// Evaluate the fitted conditional density/probability of given exposure
/// values for every row of `frame`. Continuous factors return bin
/// probability over bin width; every factor's value is floored at `lbound`.
pub fn eval_density(fd: &FittedDensity, frame: &Frame, a_values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let diag = eval_density_diag(fd, frame, a_values)?;
    Ok(diag.values)
}

pub struct DensityEval {
    pub values: Vec<f64>,
    /// Rows where at least one factor was floored at lbound.
    pub truncated: Vec<bool>,
}

pub fn eval_density_diag(
    fd: &FittedDensity,
    frame: &Frame,
    a_values: &[Vec<f64>],
) -> Result<DensityEval> {
    let n = frame.n_rows();
    if a_values.len() != fd.anodes.len() || a_values.iter().any(|c| c.len() != n) {
        return Err(Error::data("exposure matrix shape mismatch in eval"));
    }
    fd.validate_columns(frame)?;
    let mut work = frame.clone();
    let mut values = vec![1.0; n];
    let mut truncated = vec![false; n];
    for (idx, factor) in fd.factors.iter().enumerate() {
        let a = &a_values[idx];
        let probs = eval_factor(factor, &work, a)?;
        for i in 0..n {
            let p = if probs[i] < fd.lbound {
                truncated[i] = true;
                fd.lbound
            } else {
                probs[i]
            };
            values[i] *= p;
        }
        if work.has_column(&factor.anode) {
            work.set_column(&factor.anode, a.clone())?;
        } else {
            work.push_column(factor.anode.clone(), a.clone())?;
        }
    }
    Ok(DensityEval { values, truncated })
}

fn eval_factor(factor: &DensityFactor, frame: &Frame, a: &[f64]) -> Result<Vec<f64>> {
    let n = frame.n_rows();
    match &factor.model {
        FactorModel::Binary { level1, fit, .. } => {
            let p1 = fit.predict(frame, None, PredictKind::Response)?;
            Ok(a.iter()
                .zip(&p1)
                .map(|(&v, &p)| if v == *level1 { p } else { 1.0 - p })
                .collect())
        }
        FactorModel::Categorical { levels, hazards } => {
            let hazard_preds: Vec<Vec<f64>> = hazards
                .iter()
                .map(|h| h.predict(frame, None, PredictKind::Response))
                .collect::<Result<_>>()?;
            let mut out = vec![0.0; n];
            for i in 0..n {
                let li = nearest_level(levels, a[i]);
                let mut p = 1.0;
                for l in 0..li {
                    p *= 1.0 - hazard_preds[l][i];
                }
                out[i] = p * hazard_preds[li][i];
            }
            Ok(out)
        }
        FactorModel::Continuous { layout, hazards } => {
            let hazard_preds: Vec<Vec<f64>> = hazards
                .iter()
                .map(|h| h.predict(frame, None, PredictKind::Response))
                .collect::<Result<_>>()?;
            let mut out = vec![0.0; n];
            for i in 0..n {
                let b = layout.bin_of(a[i]);
                let mut p = 1.0;
                for l in 0..b {
                    p *= 1.0 - hazard_preds[l][i];
                }
                out[i] = p * hazard_preds[b][i] / layout.width_of(b);
            }
            Ok(out)
        }
        FactorModel::ContinuousPooled { layout, fit } => {
            let hazard_preds = pooled_hazards(layout, fit, frame)?;
            let mut out = vec![0.0; n];
            for i in 0..n {
                let b = layout.bin_of(a[i]);
                let mut p = 1.0;
                for l in 0..b {
                    p *= 1.0 - hazard_preds[l][i];
                }
                out[i] = p * hazard_preds[b][i] / layout.width_of(b);
            }
            Ok(out)
        }
    }
}

/// Per-bin hazard predictions of a pooled fit: one predict call per bin
/// level with the bin index spliced in as a constant column. The terminal
/// bin is absorbing (hazard 1), so the bin probabilities telescope to one.
fn pooled_hazards(layout: &BinLayout, fit: &GlmFit, frame: &Frame) -> Result<Vec<Vec<f64>>> {
    let n = frame.n_rows();
    let total = layout.total_bins();
    let mut preds = Vec::with_capacity(total);
    for l in 0..total - 1 {
        let mut r = frame.clone();
        r.push_column("__bin__", vec![l as f64; n])?;
        preds.push(fit.predict(&r, None, PredictKind::Response)?);
    }
    preds.push(vec![1.0; n]);
    Ok(preds)
}

fn nearest_level(levels: &[f64], v: f64) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, &l) in levels.iter().enumerate() {
        let d = (v - l).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Per-bin probabilities (not densities) for one continuous factor —
/// exposed for the partition-of-unity check.
pub fn bin_probabilities(factor: &DensityFactor, frame: &Frame) -> Result<Vec<Vec<f64>>> {
    match &factor.model {
        FactorModel::Continuous { layout, hazards } => {
            let hazard_preds: Vec<Vec<f64>> = hazards
                .iter()
                .map(|h| h.predict(frame, None, PredictKind::Response))
                .collect::<Result<_>>()?;
            let n = frame.n_rows();
            let total = layout.total_bins();
            let mut out = vec![vec![0.0; total]; n];
            for i in 0..n {
                let mut survive = 1.0;
                for b in 0..total {
                    out[i][b] = survive * hazard_preds[b][i];
                    survive *= 1.0 - hazard_preds[b][i];
                }
            }
            Ok(out)
        }
        FactorModel::ContinuousPooled { layout, fit } => {
            let hazard_preds = pooled_hazards(layout, fit, frame)?;
            let n = frame.n_rows();
            let total = layout.total_bins();
            let mut out = vec![vec![0.0; total]; n];
            for i in 0..n {
                let mut survive = 1.0;
                for b in 0..total {
                    out[i][b] = survive * hazard_preds[b][i];
                    survive *= 1.0 - hazard_preds[b][i];
                }
            }
            Ok(out)
        }
        _ => Err(Error::config("bin_probabilities needs a continuous factor")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn classify_by_distinct_count() {
        assert_eq!(
            classify_variable(&[0.0, 1.0, 0.0], 10).unwrap(),
            VarKind::Binary
        );
        let seven: Vec<f64> = (0..70).map(|i| (i % 7) as f64).collect();
        assert_eq!(classify_variable(&seven, 10).unwrap(), VarKind::Categorical);
        let mut rng = substream(1, Domain::Dgp, 0, 0);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let many: Vec<f64> = (0..5000).map(|_| norm.sample(&mut rng)).collect();
        assert_eq!(classify_variable(&many, 10).unwrap(), VarKind::Continuous);
    }

    #[test]
    fn equal_mass_bin_counts_match_reference_outputs() {
        let mut rng = substream(2, Domain::Dgp, 0, 0);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let values: Vec<f64> = (0..5000).map(|_| norm.sample(&mut rng)).collect();

        let cfg = BinningConfig {
            method: BinMethod::EqualMass,
            nbins: Some(5),
            max_n_per_bin: 250,
            ..Default::default()
        };
        let layout = choose_bins(&values, &cfg, values.len()).unwrap();
        assert_eq!(layout.interior_bins(), 20);
        assert_eq!(layout.total_bins(), 22);

        let cfg_len = BinningConfig {
            method: BinMethod::EqualLen,
            nbins: None,
            max_n_per_bin: 250,
            ..Default::default()
        };
        let layout_len = choose_bins(&values, &cfg_len, values.len()).unwrap();
        assert_eq!(layout_len.interior_bins(), 5);
        assert_eq!(layout_len.total_bins(), 7);
    }

    #[test]
    fn equal_mass_quartile_cutoffs_match_order_statistics() {
        let mut rng = substream(3, Domain::Dgp, 0, 0);
        let values: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let cfg = BinningConfig {
            method: BinMethod::EqualMass,
            nbins: Some(4),
            max_n_per_bin: 2000,
            ..Default::default()
        };
        let layout = choose_bins(&values, &cfg, values.len()).unwrap();
        // oracle: sorted order statistics at the quartiles
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, q) in [0.25, 0.5, 0.75].iter().enumerate() {
            let oracle = quantile_type7(&sorted, *q);
            assert!((layout.cutoffs[i + 1] - oracle).abs() < 1e-12);
            assert!((oracle - q).abs() < 0.05, "uniform quartile sanity");
        }
    }

    #[test]
    fn every_value_maps_to_exactly_one_bin() {
        let layout = BinLayout {
            cutoffs: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(layout.bin_of(-5.0), 0);
        assert_eq!(layout.bin_of(0.0), 1);
        assert_eq!(layout.bin_of(0.999), 1);
        assert_eq!(layout.bin_of(1.0), 2);
        assert_eq!(layout.bin_of(3.0), 3); // max belongs to last interior bin
        assert_eq!(layout.bin_of(3.0001), 4);
        assert_eq!(layout.width_of(0), 1.0);
        assert_eq!(layout.width_of(4), 1.0);
    }

    #[test]
    fn dhist_interpolates_between_mass_and_length() {
        let mut rng = substream(4, Domain::Dgp, 0, 0);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let values: Vec<f64> = (0..3000).map(|_| norm.sample(&mut rng)).collect();
        let cfg = BinningConfig {
            method: BinMethod::Dhist,
            nbins: Some(8),
            ..Default::default()
        };
        let layout = choose_bins(&values, &cfg, values.len()).unwrap();
        assert_eq!(layout.interior_bins(), 8);
        let mut sorted = values;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(layout.cutoffs[0], sorted[0]);
        assert_eq!(*layout.cutoffs.last().unwrap(), *sorted.last().unwrap());
    }

    fn toy_frame(n: usize, seed: u64) -> Frame {
        let mut rng = substream(seed, Domain::Dgp, 0, 0);
        let mut f = Frame::new();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        f.push_column("W", w).unwrap();
        f
    }

    #[test]
    fn binary_intercept_only_matches_mean() {
        let n = 1000;
        let frame = toy_frame(n, 5);
        let mut rng = substream(6, Domain::Dgp, 0, 0);
        let a: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 })
            .collect();
        let mean = a.iter().sum::<f64>() / n as f64;
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a.clone()]),
            &Formula::parse("A ~ 1").unwrap(),
            None,
            &BinningConfig::default(),
            DEFAULT_LBOUND,
        )
        .unwrap();
        let at_one = eval_density(&fd, &frame, &[vec![1.0; n]]).unwrap();
        let at_zero = eval_density(&fd, &frame, &[vec![0.0; n]]).unwrap();
        assert!((at_one[0] - mean).abs() < 1e-6);
        assert!((at_zero[0] - (1.0 - mean)).abs() < 1e-6);
    }

    #[test]
    fn single_bin_uniform_density_is_reciprocal_width() {
        let n = 500;
        let frame = toy_frame(n, 7);
        let mut rng = substream(8, Domain::Dgp, 0, 0);
        let a: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>()).collect();
        let cfg = BinningConfig {
            method: BinMethod::EqualLen,
            nbins: Some(1),
            ..Default::default()
        };
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a.clone()]),
            &Formula::parse("A ~ 1").unwrap(),
            None,
            &cfg,
            DEFAULT_LBOUND,
        )
        .unwrap();
        // one interior bin spanning (approximately) [0,2]: density ~ 1/2
        let mid = eval_density(&fd, &frame, &[vec![1.0; n]]).unwrap();
        let (lo, hi) = (a.iter().cloned().fold(f64::INFINITY, f64::min), {
            a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let expect = 1.0 / (hi - lo);
        assert!(
            (mid[0] - expect).abs() < 0.05,
            "density {} vs {}",
            mid[0],
            expect
        );
    }

    #[test]
    fn lbound_floors_evaluations() {
        let n = 200;
        let frame = toy_frame(n, 9);
        let a: Vec<f64> = vec![1.0; n];
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a]),
            &Formula::parse("A ~ 1").unwrap(),
            None,
            &BinningConfig::default(),
            DEFAULT_LBOUND,
        )
        .unwrap();
        // degenerate exposure: evaluating the never-seen level floors at lbound
        let off = eval_density(&fd, &frame, &[vec![0.0; n]]).unwrap();
        assert!(off.iter().all(|&p| p >= DEFAULT_LBOUND));
        assert!((off[0] - DEFAULT_LBOUND).abs() < 1e-12);
    }

    #[test]
    fn partition_of_unity_over_bins() {
        let n = 800;
        let mut rng = substream(10, Domain::Dgp, 0, 0);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let mut frame = Frame::new();
        let w: Vec<f64> = (0..n).map(|_| norm.sample(&mut rng)).collect();
        frame.push_column("W", w.clone()).unwrap();
        let a: Vec<f64> = w
            .iter()
            .map(|&wi| 0.5 * wi + norm.sample(&mut rng))
            .collect();
        let cfg = BinningConfig {
            method: BinMethod::EqualMass,
            nbins: Some(6),
            max_n_per_bin: 200,
            ..Default::default()
        };
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a]),
            &Formula::parse("A ~ W").unwrap(),
            None,
            &cfg,
            DEFAULT_LBOUND,
        )
        .unwrap();
        let probs = bin_probabilities(&fd.factors[0], &frame).unwrap();
        for row in probs.iter().take(50) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-8, "sum {total}");
        }
    }

    #[test]
    fn categorical_hazard_chain_matches_counts() {
        let n = 900;
        let frame = toy_frame(n, 11);
        let mut rng = substream(12, Domain::Dgp, 0, 0);
        let a: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.random::<f64>();
                if u < 0.2 {
                    1.0
                } else if u < 0.7 {
                    2.0
                } else {
                    3.0
                }
            })
            .collect();
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a.clone()]),
            &Formula::parse("A ~ 1").unwrap(),
            None,
            &BinningConfig::default(),
            DEFAULT_LBOUND,
        )
        .unwrap();
        for level in [1.0, 2.0, 3.0] {
            let freq = a.iter().filter(|&&v| v == level).count() as f64 / n as f64;
            let p = eval_density(&fd, &frame, &[vec![level; n]]).unwrap();
            assert!((p[0] - freq).abs() < 1e-6, "level {level}: {} vs {freq}", p[0]);
        }
    }

    #[test]
    fn pooled_continuous_matches_per_bin_roughly() {
        let n = 600;
        let mut rng = substream(13, Domain::Dgp, 0, 0);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let mut frame = Frame::new();
        frame
            .push_column("W", (0..n).map(|_| norm.sample(&mut rng)).collect())
            .unwrap();
        let a: Vec<f64> = (0..n).map(|_| norm.sample(&mut rng)).collect();
        let cfg_pool = BinningConfig {
            method: BinMethod::EqualLen,
            nbins: Some(4),
            pool_contin_var: true,
            ..Default::default()
        };
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a.clone()]),
            &Formula::parse("A ~ W").unwrap(),
            None,
            &cfg_pool,
            DEFAULT_LBOUND,
        )
        .unwrap();
        assert!(matches!(
            fd.factors[0].model,
            FactorModel::ContinuousPooled { .. }
        ));
        assert_eq!(fd.n_models(), 6);
        let vals = eval_density(&fd, &frame, &[a]).unwrap();
        assert!(vals.iter().all(|&v| v >= DEFAULT_LBOUND && v.is_finite()));
    }

    #[test]
    fn multivariate_factorization_order_and_eval() {
        let n = 700;
        let mut rng = substream(14, Domain::Dgp, 0, 0);
        let frame = toy_frame(n, 15);
        let a1: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        let a2: Vec<f64> = a1
            .iter()
            .map(|&v| {
                let p = if v == 1.0 { 0.8 } else { 0.2 };
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let fd = fit_density(
            &frame,
            &["A1".to_string(), "A2".to_string()],
            Some(&[a1.clone(), a2.clone()]),
            &Formula::parse("A1 ~ 1").unwrap(),
            None,
            &BinningConfig::default(),
            DEFAULT_LBOUND,
        )
        .unwrap();
        assert_eq!(fd.factors.len(), 2);
        // second factor conditions on the first
        assert!(fd.factors[1]
            .terms
            .contains(&Term::Main("A1".to_string())));
        let joint = eval_density(&fd, &frame, &[vec![1.0; n], vec![1.0; n]]).unwrap();
        // P(A1=1) * P(A2=1|A1=1) ~ 0.5 * 0.8
        assert!((joint[0] - 0.4).abs() < 0.05, "joint {}", joint[0]);
    }

    #[test]
    fn serialization_round_trips() {
        let n = 300;
        let frame = toy_frame(n, 16);
        let mut rng = substream(17, Domain::Dgp, 0, 0);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let cfg = BinningConfig {
            method: BinMethod::EqualLen,
            nbins: Some(3),
            ..Default::default()
        };
        let fd = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a.clone()]),
            &Formula::parse("A ~ W").unwrap(),
            None,
            &cfg,
            DEFAULT_LBOUND,
        )
        .unwrap();
        let json = fd.to_json().unwrap();
        let back = FittedDensity::from_json(&json).unwrap();
        let v1 = eval_density(&fd, &frame, &[a.clone()]).unwrap();
        let v2 = eval_density(&back, &frame, &[a]).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn determinism_bit_identical_refits() {
        let n = 400;
        let frame = toy_frame(n, 18);
        let mut rng = substream(19, Domain::Dgp, 0, 0);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
        let cfg = BinningConfig {
            method: BinMethod::EqualMass,
            nbins: Some(4),
            max_n_per_bin: 100,
            ..Default::default()
        };
        let hform = Formula::parse("A ~ W").unwrap();
        let fd1 = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a.clone()]),
            &hform,
            None,
            &cfg,
            DEFAULT_LBOUND,
        )
        .unwrap();
        let fd2 = fit_density(
            &frame,
            &["A".to_string()],
            Some(&[a]),
            &hform,
            None,
            &cfg,
            DEFAULT_LBOUND,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&fd1).unwrap(),
            serde_json::to_string(&fd2).unwrap()
        );
    }
}

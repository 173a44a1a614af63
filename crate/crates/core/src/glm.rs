//! Weighted generalized linear models: gaussian-identity and binomial-logit
//! with per-row weights and offsets.
//!
//! This is the one learner behind every regression in the crate (outcome
//! fits, bin-hazard fits, fluctuation fits). The binomial family accepts
//! fractional outcomes in [0, 1] (negative Bernoulli log-likelihood as a
//! quasi-likelihood loss), which is what the bounded-outcome transform
//! produces.

use crate::error::{Error, Result};
use crate::formula::{design_columns, Formula, Term};
use crate::frame::Frame;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianIdentity,
    BinomialLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictKind {
    Link,
    Response,
}

/// IRLS controls. Defaults: tolerance 1e-8 on the relative coefficient
/// change, 50 iterations, 5 step-halvings, coefficients capped at |40| on
/// the logit scale (keeps separated fits finite).
#[derive(Debug, Clone, Copy)]
pub struct FitControl {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub coef_cap: f64,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 5,
            coef_cap: 40.0,
        }
    }
}

impl FitControl {
    /// Tight controls for the one-dimensional fluctuation fits, which must
    /// solve their score equation to near machine precision.
    pub fn fluctuation() -> Self {
        FitControl {
            tol: 1e-13,
            max_iter: 200,
            max_halvings: 10,
            coef_cap: 40.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: Family,
    pub intercept: bool,
    pub terms: Vec<Term>,
    /// Design column names, intercept first when present.
    pub names: Vec<String>,
    /// One coefficient per design column; aliased columns get 0.
    pub coefficients: Vec<f64>,
    pub aliased: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    /// Residual variance estimate (gaussian only).
    pub dispersion: Option<f64>,
    /// True when the separation cap was hit during fitting.
    pub capped: bool,
}

impl GlmFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }

    /// Linear predictor (plus offset) or its inverse-link transform.
    pub fn predict(
        &self,
        frame: &Frame,
        offset: Option<&[f64]>,
        kind: PredictKind,
    ) -> Result<Vec<f64>> {
        let (_, cols) = design_columns(frame, self.intercept, &self.terms)?;
        let n = frame.n_rows();
        if let Some(o) = offset {
            if o.len() != n {
                return Err(Error::data("offset length mismatch in predict"));
            }
        }
        let mut eta = vec![0.0; n];
        for (c, &b) in cols.iter().zip(&self.coefficients) {
            if b != 0.0 {
                for (e, x) in eta.iter_mut().zip(c) {
                    *e += b * x;
                }
            }
        }
        if let Some(o) = offset {
            for (e, v) in eta.iter_mut().zip(o) {
                *e += v;
            }
        }
        match (kind, self.family) {
            (PredictKind::Link, _) | (PredictKind::Response, Family::GaussianIdentity) => Ok(eta),
            (PredictKind::Response, Family::BinomialLogit) => {
                Ok(eta.into_iter().map(expit).collect())
            }
        }
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fit a GLM given a formula whose response column lives in `frame`.
pub fn fit(
    family: Family,
    formula: &Formula,
    frame: &Frame,
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
    control: &FitControl,
) -> Result<GlmFit> {
    let response = formula
        .response
        .as_deref()
        .ok_or_else(|| Error::config("formula has no response"))?;
    let y = frame.try_column(response)?.to_vec();
    fit_with_response(family, formula, frame, &y, weights, offset, control)
}

/// Fit with an explicitly supplied response vector (used where the outcome
/// is constructed rather than stored, e.g. bin indicators).
pub fn fit_with_response(
    family: Family,
    formula: &Formula,
    frame: &Frame,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
    control: &FitControl,
) -> Result<GlmFit> {
    let (names, cols) = design_columns(frame, formula.intercept, &formula.terms)?;
    let mut fit = fit_design(family, &names, &cols, y, weights, offset, control)?;
    fit.intercept = formula.intercept;
    fit.terms = formula.terms.clone();
    Ok(fit)
}

/// Fit on a raw design (columns already materialized).
pub fn fit_design(
    family: Family,
    names: &[String],
    cols: &[Vec<f64>],
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
    control: &FitControl,
) -> Result<GlmFit> {
    let n = y.len();
    if cols.iter().any(|c| c.len() != n) {
        return Err(Error::data("design column length mismatch"));
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::data("weight length mismatch"));
            }
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::data("weights must be finite and nonnegative"));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    if !w.iter().any(|&v| v > 0.0) {
        return Err(Error::numeric("no rows with positive weight"));
    }
    let o: Vec<f64> = match offset {
        Some(o) => {
            if o.len() != n {
                return Err(Error::data("offset length mismatch"));
            }
            o.to_vec()
        }
        None => vec![0.0; n],
    };
    if family == Family::BinomialLogit {
        for (i, &v) in y.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!(
                    "binomial outcome out of [0,1] at row {i}: {v}"
                )));
            }
        }
    }

    match family {
        Family::GaussianIdentity => fit_gaussian(names, cols, y, &w, &o),
        Family::BinomialLogit => fit_binomial(names, cols, y, &w, &o, control),
    }
}

fn fit_gaussian(
    names: &[String],
    cols: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    offset: &[f64],
) -> Result<GlmFit> {
    let adj: Vec<f64> = y.iter().zip(offset).map(|(v, o)| v - o).collect();
    let (beta, aliased) = weighted_least_squares(cols, &adj, w)?;
    let rank = aliased.iter().filter(|a| !**a).count();
    let mut rss = 0.0;
    let mut n_eff = 0usize;
    for i in 0..y.len() {
        if w[i] > 0.0 {
            n_eff += 1;
            let mut eta = offset[i];
            for (c, &b) in cols.iter().zip(&beta) {
                eta += b * c[i];
            }
            rss += w[i] * (y[i] - eta) * (y[i] - eta);
        }
    }
    let dispersion = if n_eff > rank {
        rss / (n_eff - rank) as f64
    } else {
        0.0
    };
    Ok(GlmFit {
        family: Family::GaussianIdentity,
        intercept: false,
        terms: Vec::new(),
        names: names.to_vec(),
        coefficients: beta,
        aliased,
        converged: true,
        iterations: 1,
        dispersion: Some(dispersion),
        capped: false,
    })
}

fn fit_binomial(
    names: &[String],
    cols: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    offset: &[f64],
    control: &FitControl,
) -> Result<GlmFit> {
    let n = y.len();
    let p = cols.len();
    let mut beta = vec![0.0; p];
    let mut aliased = vec![false; p];
    let mut capped = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut dev = binomial_deviance(cols, y, w, offset, &beta);

    let mut eta = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut ww = vec![0.0; n];
    for iter in 1..=control.max_iter {
        iterations = iter;
        for i in 0..n {
            let mut e = offset[i];
            for (c, &b) in cols.iter().zip(&beta) {
                e += b * c[i];
            }
            eta[i] = e;
            let mu = expit(e);
            let v = (mu * (1.0 - mu)).max(1e-10);
            ww[i] = w[i] * v;
            z[i] = (e - offset[i]) + (y[i] - mu) / v;
        }
        let (mut proposal, al) = weighted_least_squares(cols, &z, &ww)?;
        aliased = al;
        for b in proposal.iter_mut() {
            if b.abs() > control.coef_cap {
                *b = b.signum() * control.coef_cap;
                capped = true;
            }
        }

        // step-halving on deviance increase
        let mut accepted = proposal;
        let mut new_dev = binomial_deviance(cols, y, w, offset, &accepted);
        let mut halvings = 0;
        while new_dev > dev + 1e-10 && halvings < control.max_halvings {
            for (a, &b_old) in accepted.iter_mut().zip(&beta) {
                *a = 0.5 * (*a + b_old);
            }
            new_dev = binomial_deviance(cols, y, w, offset, &accepted);
            halvings += 1;
        }
        if new_dev > dev + 1e-10 {
            // no improving step available; keep the current iterate
            break;
        }

        let rel_change = beta
            .iter()
            .zip(&accepted)
            .map(|(&old, &new)| (new - old).abs() / new.abs().max(1.0))
            .fold(0.0f64, f64::max);
        beta = accepted;
        dev = new_dev;
        if rel_change <= control.tol {
            converged = true;
            break;
        }
    }

    Ok(GlmFit {
        family: Family::BinomialLogit,
        intercept: false,
        terms: Vec::new(),
        names: names.to_vec(),
        coefficients: beta,
        aliased,
        converged,
        iterations,
        dispersion: None,
        capped,
    })
}

fn binomial_deviance(cols: &[Vec<f64>], y: &[f64], w: &[f64], offset: &[f64], beta: &[f64]) -> f64 {
    let mut dev = 0.0;
    for i in 0..y.len() {
        if w[i] == 0.0 {
            continue;
        }
        let mut e = offset[i];
        for (c, &b) in cols.iter().zip(beta) {
            e += b * c[i];
        }
        let mu = expit(e).clamp(1e-12, 1.0 - 1e-12);
        dev -= 2.0 * w[i] * (y[i] * mu.ln() + (1.0 - y[i]) * (1.0 - mu).ln());
    }
    dev
}

/// Weighted least squares by modified Gram-Schmidt QR with deterministic
/// left-to-right column dropping: a column whose residual norm falls below
/// `1e-9` of its weighted norm is aliased and gets coefficient 0.
fn weighted_least_squares(
    cols: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let n = y.len();
    let p = cols.len();
    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let v: Vec<f64> = y.iter().zip(&sqrt_w).map(|(a, b)| a * b).collect();

    let mut q: Vec<Vec<f64>> = Vec::new(); // orthonormal columns
    let mut r: Vec<Vec<f64>> = Vec::new(); // r[k] = column k's loadings, diagonal last
    let mut kept: Vec<usize> = Vec::new();
    let mut aliased = vec![false; p];

    for j in 0..p {
        let mut u: Vec<f64> = cols[j].iter().zip(&sqrt_w).map(|(a, b)| a * b).collect();
        let orig_norm = norm(&u);
        let mut loadings = vec![0.0; kept.len()];
        // two orthogonalization passes for stability
        for _ in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let c = dot(qk, &u);
                loadings[k] += c;
                for (ui, qi) in u.iter_mut().zip(qk) {
                    *ui -= c * qi;
                }
            }
        }
        let res_norm = norm(&u);
        if orig_norm == 0.0 || res_norm <= 1e-9 * orig_norm {
            aliased[j] = true;
            continue;
        }
        for x in u.iter_mut() {
            *x /= res_norm;
        }
        loadings.push(res_norm);
        q.push(u);
        r.push(loadings);
        kept.push(j);
    }

    // back-substitution over kept columns
    let m = kept.len();
    let c: Vec<f64> = q.iter().map(|qk| dot(qk, &v)).collect();
    let mut beta_kept = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = c[i];
        for l in (i + 1)..m {
            s -= r[l][i] * beta_kept[l];
        }
        beta_kept[i] = s / r[i][i];
    }
    let mut beta = vec![0.0; p];
    for (idx, &j) in kept.iter().enumerate() {
        beta[j] = beta_kept[idx];
    }
    let _ = n;
    Ok((beta, aliased))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

//! Model formula grammar: `y ~ a + b + a*c`.
//!
//! The intercept is implicit, `a*b` expands to the two main effects plus the
//! interaction, and `a:b` denotes the bare interaction. `y ~ 1` is an
//! intercept-only model. This covers the regression specifications the
//! estimation pipeline accepts (`Y ~ Anodes + WEnodes`, `A ~ W1 + W3 * W4`,
//! and the like); anything fancier is rejected at parse time.

use crate::error::{Error, Result};
use crate::frame::Frame;
use serde::{Deserialize, Serialize};

/// A single design term (the intercept is tracked separately on [`Formula`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Main(String),
    Interaction(String, String),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Main(a) => a.clone(),
            Term::Interaction(a, b) => format!("{a}:{b}"),
        }
    }

    /// Column of term values for a frame.
    pub fn eval(&self, frame: &Frame) -> Result<Vec<f64>> {
        match self {
            Term::Main(a) => Ok(frame.try_column(a)?.to_vec()),
            Term::Interaction(a, b) => {
                let ca = frame.try_column(a)?;
                let cb = frame.try_column(b)?;
                Ok(ca.iter().zip(cb).map(|(x, y)| x * y).collect())
            }
        }
    }

    pub fn columns(&self) -> Vec<&str> {
        match self {
            Term::Main(a) => vec![a],
            Term::Interaction(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub response: Option<String>,
    pub intercept: bool,
    pub terms: Vec<Term>,
}

impl Formula {
    /// Main-effects formula `response ~ p1 + p2 + ...`.
    pub fn main_effects(response: Option<&str>, predictors: &[String]) -> Formula {
        Formula {
            response: response.map(str::to_owned),
            intercept: true,
            terms: predictors.iter().map(|p| Term::Main(p.clone())).collect(),
        }
    }

    /// Parse `lhs ~ rhs` or a bare `~ rhs`.
    pub fn parse(text: &str) -> Result<Formula> {
        let (lhs, rhs) = match text.split_once('~') {
            Some((l, r)) => (l.trim(), r.trim()),
            None => return Err(Error::config(format!("formula `{text}` lacks `~`"))),
        };
        if rhs.is_empty() {
            return Err(Error::config(format!("formula `{text}` has empty right side")));
        }
        let response = if lhs.is_empty() {
            None
        } else {
            validate_ident(lhs)?;
            Some(lhs.to_string())
        };

        let mut terms = Vec::new();
        let mut push = |t: Term| {
            if !terms.contains(&t) {
                terms.push(t);
            }
        };
        for raw in rhs.split('+') {
            let part = raw.trim();
            if part.is_empty() {
                return Err(Error::config(format!("formula `{text}` has an empty term")));
            }
            if part == "1" {
                continue; // intercept is implicit
            }
            if let Some((a, b)) = part.split_once('*') {
                let (a, b) = (a.trim(), b.trim());
                validate_ident(a)?;
                validate_ident(b)?;
                push(Term::Main(a.to_string()));
                push(Term::Main(b.to_string()));
                push(Term::Interaction(a.to_string(), b.to_string()));
            } else if let Some((a, b)) = part.split_once(':') {
                let (a, b) = (a.trim(), b.trim());
                validate_ident(a)?;
                validate_ident(b)?;
                push(Term::Interaction(a.to_string(), b.to_string()));
            } else {
                validate_ident(part)?;
                push(Term::Main(part.to_string()));
            }
        }
        Ok(Formula {
            response,
            intercept: true,
            terms,
        })
    }

    /// All columns referenced on the right-hand side.
    pub fn predictor_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.terms {
            for c in t.columns() {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// Check that every referenced column exists in the frame.
    pub fn validate_against(&self, frame: &Frame) -> Result<()> {
        for c in self.predictor_columns() {
            if !frame.has_column(c) {
                return Err(Error::data(format!(
                    "formula references missing column `{c}`"
                )));
            }
        }
        Ok(())
    }
}

fn validate_ident(s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("invalid identifier `{s}` in formula")))
    }
}

/// Design matrix (column-major) for a term list over a frame.
pub fn design_columns(
    frame: &Frame,
    intercept: bool,
    terms: &[Term],
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let n = frame.n_rows();
    let mut names = Vec::new();
    let mut cols = Vec::new();
    if intercept {
        names.push("(Intercept)".to_string());
        cols.push(vec![1.0; n]);
    }
    for t in terms {
        names.push(t.name());
        cols.push(t.eval(frame)?);
    }
    Ok((names, cols))
}

//! Bookkeeping for the acceptance run: one line per criterion.

use std::fmt;

/// A measured value checked against a target band.
#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub observed: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Check {
    /// `target +/- tol` (absolute).
    pub fn near(label: impl Into<String>, observed: f64, target: f64, tol: f64) -> Self {
        Self::within(label, observed, target - tol, target + tol)
    }

    /// `target * (1 +/- rel)`.
    pub fn relative(label: impl Into<String>, observed: f64, target: f64, rel: f64) -> Self {
        Self::within(label, observed, target * (1.0 - rel), target * (1.0 + rel))
    }

    pub fn within(label: impl Into<String>, observed: f64, lo: f64, hi: f64) -> Self {
        Self {
            label: label.into(),
            observed,
            lo,
            hi,
        }
    }

    pub fn at_most(label: impl Into<String>, observed: f64, hi: f64) -> Self {
        Self::within(label, observed, f64::NEG_INFINITY, hi)
    }

    pub fn at_least(label: impl Into<String>, observed: f64, lo: f64) -> Self {
        Self::within(label, observed, lo, f64::INFINITY)
    }

    pub fn pass(&self) -> bool {
        self.observed >= self.lo && self.observed <= self.hi
    }
}

fn num(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-3 {
        format!("{x:.2e}")
    } else {
        format!("{x:.4}")
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let band = match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, true) => format!("[{}, {}]", num(self.lo), num(self.hi)),
            (true, false) => format!(">= {}", num(self.lo)),
            (false, true) => format!("<= {}", num(self.hi)),
            (false, false) => "any".to_string(),
        };
        let mark = if self.pass() { "" } else { " !" };
        write!(f, "{}={} {}{}", self.label, num(self.observed), band, mark)
    }
}

/// One acceptance criterion: a name and its checks (or an error that
/// prevented measuring).
#[derive(Debug, Clone)]
pub struct Criterion {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub error: Option<String>,
}

impl Criterion {
    pub fn new(name: &'static str, checks: Vec<Check>) -> Self {
        Self {
            name,
            checks,
            error: None,
        }
    }

    pub fn errored(name: &'static str, error: impl fmt::Display) -> Self {
        Self {
            name,
            checks: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    pub fn pass(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(Check::pass)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}", self.name)?;
        if let Some(e) = &self.error {
            return write!(f, " | error: {e}");
        }
        let parts: Vec<String> = self.checks.iter().map(Check::to_string).collect();
        write!(f, " | {}", parts.join("; "))
    }
}

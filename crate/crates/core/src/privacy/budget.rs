use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pure-DP privacy parameter. `f64::INFINITY` is accepted and means "no
/// noise"; it is only useful for oracle checks.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Budget(f64);

impl Budget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Budget(epsilon))
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }

    /// Split evenly into `parts` sub-budgets.
    pub fn split(self, parts: usize) -> Budget {
        assert!(parts > 0);
        Budget(self.0 / parts as f64)
    }

    pub fn is_unbounded(self) -> bool {
        self.0.is_infinite()
    }
}

impl TryFrom<f64> for Budget {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Budget::new(v)
    }
}

impl From<Budget> for f64 {
    fn from(b: Budget) -> f64 {
        b.0
    }
}

/// Per-user cumulative privacy consumption.
///
/// Every mechanism in the crate charges the ledger for each user it touches;
/// a charge that would push a user past the cap fails with
/// [`Error::BudgetExceeded`] and leaves the ledger unchanged.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    cap: Budget,
    consumed: BTreeMap<usize, f64>,
}

impl BudgetLedger {
    pub fn new(cap: Budget) -> Self {
        BudgetLedger {
            cap,
            consumed: BTreeMap::new(),
        }
    }

    pub fn cap(&self) -> Budget {
        self.cap
    }

    // Floating-point slack on the cap. Relative so that very large test budgets
    // split into powers of two do not trip on round-off.
    fn slack(&self) -> f64 {
        1e-12 * self.cap.0.abs().max(1.0)
    }

    pub fn charge(&mut self, user: usize, amount: f64) -> Result<()> {
        if amount.is_nan() || amount < 0.0 {
            return Err(Error::invalid(format!("charge must be >= 0, got {amount}")));
        }
        let current = self.consumed.get(&user).copied().unwrap_or(0.0);
        let next = current + amount;
        if !self.cap.0.is_infinite() && next > self.cap.0 + self.slack() {
            return Err(Error::BudgetExceeded {
                user,
                consumed: next,
                cap: self.cap.0,
            });
        }
        self.consumed.insert(user, next);
        Ok(())
    }

    pub fn charge_all(&mut self, users: impl IntoIterator<Item = usize>, amount: f64) -> Result<()> {
        for u in users {
            self.charge(u, amount)?;
        }
        Ok(())
    }

    pub fn consumed(&self, user: usize) -> f64 {
        self.consumed.get(&user).copied().unwrap_or(0.0)
    }

    pub fn max_consumed(&self) -> f64 {
        self.consumed.values().copied().fold(0.0, f64::max)
    }

    pub fn users(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.consumed.iter().map(|(&u, &c)| (u, c))
    }

    pub fn len(&self) -> usize {
        self.consumed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consumed.is_empty()
    }

    /// True when no user is over the cap.
    pub fn is_sound(&self) -> bool {
        self.cap.0.is_infinite() || self.max_consumed() <= self.cap.0 + self.slack()
    }
}

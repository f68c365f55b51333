//! Token accounting and cost estimation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub token_budget: u64,
    pub tokens_spent: u64,
    /// Dollars per million tokens.
    pub blended_rate: f64,
}

impl BudgetLedger {
    pub fn new(token_budget: u64, blended_rate: f64) -> Self {
        Self {
            token_budget,
            tokens_spent: 0,
            blended_rate,
        }
    }

    pub fn charge(&mut self, tokens: u64) {
        self.tokens_spent = self.tokens_spent.saturating_add(tokens);
    }

    /// New agents may start only while spending is under the budget.
    pub fn should_launch(&self) -> bool {
        self.tokens_spent < self.token_budget
    }

    pub fn cost(&self) -> f64 {
        cost_of(self.tokens_spent, self.blended_rate)
    }

    pub fn remaining(&self) -> u64 {
        self.token_budget.saturating_sub(self.tokens_spent)
    }
}

pub fn cost_of(tokens: u64, rate_per_mtok: f64) -> f64 {
    tokens as f64 * rate_per_mtok / 1e6
}

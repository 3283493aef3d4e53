//! Trigger guardrails: minimum spacing, debounce, hysteresis, an external
//! suppression flag, and a threshold raise after unproductive fetches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    pub s_min: usize,
    pub debounce: usize,
    pub theta_low: f64,
    pub hysteresis_tokens: usize,
    /// Tokens after issue within which a need must arrive for a fetch to count as productive.
    pub unproductive_horizon: usize,
    pub threshold_raise: f64,
    /// Tokens the raise stays in force unless a productive fetch clears it first.
    pub raise_tokens: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            s_min: 50,
            debounce: 2,
            theta_low: 2.0,
            hysteresis_tokens: 5,
            unproductive_horizon: 30,
            threshold_raise: 0.3,
            raise_tokens: 50,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.debounce == 0 {
            return Err(Error::Config("guard.debounce must be >= 1".into()));
        }
        if !(self.threshold_raise >= 0.0 && self.theta_low.is_finite()) {
            return Err(Error::Config("guard.threshold_raise must be >= 0 and theta_low finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardrailState {
    pub tokens_since_last_retrieval: usize,
    pub consecutive_above: usize,
    /// Set by a trigger; cleared once entropy stays below θ_low long enough.
    pub hysteresis_active: bool,
    pub hysteresis_below: usize,
    pub suppressed: bool,
    pub threshold_offset: f64,
    pub raise_left: usize,
}

impl GuardrailState {
    /// Fresh state: spacing satisfied, nothing suppressed.
    pub fn new(cfg: &GuardConfig) -> Self {
        GuardrailState {
            tokens_since_last_retrieval: cfg.s_min,
            consecutive_above: 0,
            hysteresis_active: false,
            hysteresis_below: 0,
            suppressed: false,
            threshold_offset: 0.0,
            raise_left: 0,
        }
    }

    /// Feed one token's prediction and entropy.
    pub fn observe(&mut self, cfg: &GuardConfig, p_hat: f64, tau_rag: f64, entropy: f64, suppressed: bool) {
        self.tokens_since_last_retrieval += 1;
        self.suppressed = suppressed;
        if self.raise_left > 0 {
            self.raise_left -= 1;
            if self.raise_left == 0 {
                self.threshold_offset = 0.0;
            }
        }
        if p_hat > tau_rag + self.threshold_offset {
            self.consecutive_above += 1;
        } else {
            self.consecutive_above = 0;
        }
        if self.hysteresis_active {
            if entropy < cfg.theta_low {
                self.hysteresis_below += 1;
                if self.hysteresis_below >= cfg.hysteresis_tokens {
                    self.hysteresis_active = false;
                }
            } else {
                self.hysteresis_below = 0;
            }
        }
    }

    pub fn effective_tau(&self, tau_rag: f64) -> f64 {
        tau_rag + self.threshold_offset
    }

    pub fn on_trigger(&mut self) {
        self.tokens_since_last_retrieval = 0;
        self.consecutive_above = 0;
        self.hysteresis_active = true;
        self.hysteresis_below = 0;
    }

    pub fn on_unproductive(&mut self, cfg: &GuardConfig) {
        self.threshold_offset = cfg.threshold_raise;
        self.raise_left = cfg.raise_tokens.max(1);
    }

    pub fn on_productive(&mut self) {
        self.threshold_offset = 0.0;
        self.raise_left = 0;
    }
}

pub fn can_trigger(guard: &GuardrailState, cfg: &GuardConfig) -> bool {
    guard.tokens_since_last_retrieval >= cfg.s_min
        && guard.consecutive_above >= cfg.debounce
        && !guard.hysteresis_active
        && !guard.suppressed
}

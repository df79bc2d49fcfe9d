use std::fmt;

use serde::{Deserialize, Serialize};

/// Canonical exponential-family loss `-y*eta + b(eta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    /// Gaussian with identity link, `b(x) = x^2 / 2`.
    SquaredIdentity,
    /// Bernoulli with logit link, `b(x) = log(1 + e^x)`.
    LogisticLogit,
}

impl LossFamily {
    /// Cumulant function `b`.
    pub fn cumulant(self, x: f64) -> f64 {
        match self {
            LossFamily::SquaredIdentity => 0.5 * x * x,
            // log(1 + e^x) without overflow for large |x|
            LossFamily::LogisticLogit => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Mean function `b'`.
    pub fn mean(self, x: f64) -> f64 {
        match self {
            LossFamily::SquaredIdentity => x,
            LossFamily::LogisticLogit => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Variance function `b''`.
    pub fn variance(self, x: f64) -> f64 {
        match self {
            LossFamily::SquaredIdentity => 1.0,
            LossFamily::LogisticLogit => {
                let m = self.mean(x);
                m * (1.0 - m)
            }
        }
    }

    /// Per-observation loss `-y*eta + b(eta)`.
    pub fn loss(self, y: f64, eta: f64) -> f64 {
        -y * eta + self.cumulant(eta)
    }

    /// Deviance contribution used for held-out scoring.
    pub fn deviance(self, y: f64, eta: f64) -> f64 {
        match self {
            LossFamily::SquaredIdentity => (y - eta) * (y - eta),
            LossFamily::LogisticLogit => 2.0 * self.loss(y, eta),
        }
    }

    pub fn accepts_response(self, y: f64) -> bool {
        match self {
            LossFamily::SquaredIdentity => y.is_finite(),
            LossFamily::LogisticLogit => y == 0.0 || y == 1.0,
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossFamily::SquaredIdentity => f.write_str("squared_identity"),
            LossFamily::LogisticLogit => f.write_str("logistic_logit"),
        }
    }
}

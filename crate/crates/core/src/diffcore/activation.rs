use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity shared by every hidden layer of a network.
///
/// Both variants are convex and non-decreasing, which is what the hard
/// convexity construction needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `x` for `x > 0`, `alpha (e^x - 1)` otherwise.
    Elu { alpha: f64 },
    /// `x` for `x > 0`, `slope x` otherwise. The derivative at 0 is `slope`.
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub const fn elu() -> Self {
        Activation::Elu { alpha: 1.0 }
    }

    pub const fn leaky_relu() -> Self {
        Activation::LeakyRelu { slope: 0.03 }
    }

    /// `order`-th derivative evaluated at `x` (order 0 is the function itself).
    #[inline]
    pub fn eval(self, x: f64, order: u8) -> f64 {
        match self {
            Activation::Elu { alpha } => match order {
                0 => {
                    if x > 0.0 {
                        x
                    } else {
                        alpha * x.exp_m1()
                    }
                }
                1 => {
                    if x > 0.0 {
                        1.0
                    } else {
                        alpha * x.exp()
                    }
                }
                _ => {
                    if x > 0.0 {
                        0.0
                    } else {
                        alpha * x.exp()
                    }
                }
            },
            Activation::LeakyRelu { slope } => match order {
                0 => {
                    if x > 0.0 {
                        x
                    } else {
                        slope * x
                    }
                }
                1 => {
                    if x > 0.0 {
                        1.0
                    } else {
                        slope
                    }
                }
                _ => 0.0,
            },
        }
    }

    /// Whether derivatives of `order` and above vanish almost everywhere.
    pub fn vanishes_from(self, order: u8) -> bool {
        matches!(self, Activation::LeakyRelu { .. }) && order >= 2
    }

    /// Smooth enough for second input-derivatives to carry information.
    pub fn is_twice_differentiable(self) -> bool {
        matches!(self, Activation::Elu { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu { .. } => "elu",
            Activation::LeakyRelu { .. } => "leaky_relu",
        }
    }
}

//! Risk functions `f`, penalty functions `g` and the risk configuration.
//!
//! A risk function is applied to the deviation `z = B - nu` of a sampled
//! reward-to-go from its reference. The three one-sided kinds only charge
//! negative deviations; the shaped kind is the bump `1 / (1 + b (z - c)^2)`
//! produced by risk shaping and is deliberately non-convex.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Default bound on `|f'|` for the one-sided square root near its kink.
pub const DEFAULT_SQRT_DERIVATIVE_CLAMP: f64 = 1e3;

/// A user-supplied risk shape.
pub trait RiskShape: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn value(&self, z: f64) -> f64;
    fn derivative(&self, z: f64) -> f64;
}

/// A user-supplied penalty function.
pub trait PenaltyShape: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

#[derive(Debug, Clone)]
pub enum RiskFunction {
    /// `z^2` for `z <= 0`, else 0.
    OneSidedVariance,
    /// `|z|` for `z <= 0`, else 0.
    OneSidedAbs,
    /// `sqrt(|z|)` for `z <= 0`, else 0. `clamp` bounds the derivative magnitude.
    OneSidedSqrt { clamp: f64 },
    /// `1 / (1 + b (z - c)^2)` with `b > 0`.
    Shaped { b: f64, c: f64 },
    Custom(Arc<dyn RiskShape>),
}

/// Which of the built-in families a [`RiskFunction`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RiskKind {
    Var,
    Abs,
    Sqrt,
    Shaped,
    Custom,
}

impl RiskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RiskKind::Var => "var",
            RiskKind::Abs => "abs",
            RiskKind::Sqrt => "sqrt",
            RiskKind::Shaped => "shaped",
            RiskKind::Custom => "custom",
        }
    }
}

impl fmt::Display for RiskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RiskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "var" | "one_sided_variance" => Ok(RiskKind::Var),
            "abs" | "one_sided_abs" => Ok(RiskKind::Abs),
            "sqrt" | "one_sided_sqrt" => Ok(RiskKind::Sqrt),
            "shaped" => Ok(RiskKind::Shaped),
            other => Err(Error::Parse(format!("unknown risk kind `{other}`"))),
        }
    }
}

impl RiskFunction {
    pub fn sqrt() -> Self {
        RiskFunction::OneSidedSqrt { clamp: DEFAULT_SQRT_DERIVATIVE_CLAMP }
    }

    pub fn shaped(b: f64, c: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite() && c.is_finite()) {
            return Err(Error::Config(format!("shaped risk needs b > 0 and finite c, got b={b}, c={c}")));
        }
        Ok(RiskFunction::Shaped { b, c })
    }

    /// One of the three one-sided kinds; shaped and custom need parameters.
    pub fn one_sided(kind: RiskKind) -> Result<Self> {
        match kind {
            RiskKind::Var => Ok(RiskFunction::OneSidedVariance),
            RiskKind::Abs => Ok(RiskFunction::OneSidedAbs),
            RiskKind::Sqrt => Ok(RiskFunction::sqrt()),
            other => Err(Error::Config(format!("`{other}` is not a one-sided risk kind"))),
        }
    }

    pub fn kind(&self) -> RiskKind {
        match self {
            RiskFunction::OneSidedVariance => RiskKind::Var,
            RiskFunction::OneSidedAbs => RiskKind::Abs,
            RiskFunction::OneSidedSqrt { .. } => RiskKind::Sqrt,
            RiskFunction::Shaped { .. } => RiskKind::Shaped,
            RiskFunction::Custom(_) => RiskKind::Custom,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            RiskFunction::Custom(shape) => shape.name(),
            other => other.kind().as_str(),
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            RiskFunction::OneSidedVariance => {
                if z <= 0.0 {
                    z * z
                } else {
                    0.0
                }
            }
            RiskFunction::OneSidedAbs => {
                if z <= 0.0 {
                    -z
                } else {
                    0.0
                }
            }
            RiskFunction::OneSidedSqrt { .. } => {
                if z <= 0.0 {
                    (-z).sqrt()
                } else {
                    0.0
                }
            }
            RiskFunction::Shaped { b, c } => 1.0 / (1.0 + b * (z - c) * (z - c)),
            RiskFunction::Custom(shape) => shape.value(z),
        }
    }

    /// Derivative of [`RiskFunction::eval`]; 0 at the kink of the one-sided kinds.
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            RiskFunction::OneSidedVariance => {
                if z < 0.0 {
                    2.0 * z
                } else {
                    0.0
                }
            }
            RiskFunction::OneSidedAbs => {
                if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            RiskFunction::OneSidedSqrt { clamp } => {
                if z < 0.0 {
                    (-0.5 / (-z).sqrt()).max(-clamp)
                } else {
                    0.0
                }
            }
            RiskFunction::Shaped { b, c } => {
                let d = z - c;
                let den = 1.0 + b * d * d;
                -2.0 * b * d / (den * den)
            }
            RiskFunction::Custom(shape) => shape.derivative(z),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum PenaltyFunction {
    /// `max(0, x)^2`.
    #[default]
    SquaredHinge,
    Custom(Arc<dyn PenaltyShape>),
}

impl PenaltyFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            PenaltyFunction::SquaredHinge => {
                let h = x.max(0.0);
                h * h
            }
            PenaltyFunction::Custom(shape) => shape.value(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            PenaltyFunction::SquaredHinge => 2.0 * x.max(0.0),
            PenaltyFunction::Custom(shape) => shape.derivative(x),
        }
    }
}

/// Converts a constraint level stated on the `|z|` scale to the scale of `target`.
pub fn scale_constraint(d_abs: f64, target: &RiskFunction) -> Result<f64> {
    if !(d_abs >= 0.0 && d_abs.is_finite()) {
        return Err(Error::Config(format!("constraint level must be finite and >= 0, got {d_abs}")));
    }
    match target.kind() {
        RiskKind::Abs => Ok(d_abs),
        RiskKind::Sqrt => Ok(d_abs.sqrt()),
        RiskKind::Var => Ok(d_abs * d_abs),
        other => Err(Error::Config(format!("no canonical constraint scaling for `{other}` risk"))),
    }
}

/// Full risk configuration: `f`, `g`, level `D` and penalty weight `lambda`.
#[derive(Debug, Clone)]
pub struct RiskSpec {
    pub f: RiskFunction,
    pub g: PenaltyFunction,
    pub d: f64,
    pub lambda: f64,
}

impl RiskSpec {
    /// `lambda = 0` is accepted and switches the penalty off.
    pub fn new(f: RiskFunction, g: PenaltyFunction, d: f64, lambda: f64) -> Result<Self> {
        let spec = Self { f, g, d, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d.is_finite() {
            return Err(Error::Config(format!("constraint level D must be finite, got {}", self.d)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("penalty weight must be finite and >= 0, got {}", self.lambda)));
        }
        if let RiskFunction::Shaped { b, .. } = self.f {
            if b <= 0.0 {
                return Err(Error::Config("shaped risk needs b > 0".into()));
            }
        }
        Ok(())
    }

    /// Sample risk `f(b - reference)`.
    pub fn sample_risk(&self, b: f64, reference: f64) -> f64 {
        self.f.eval(b - reference)
    }

    pub fn is_violation(&self, sample_risk: f64) -> bool {
        sample_risk > self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds() -> Vec<RiskFunction> {
        vec![RiskFunction::OneSidedVariance, RiskFunction::OneSidedAbs, RiskFunction::sqrt()]
    }

    #[test]
    fn direct_values() {
        assert_eq!(RiskFunction::OneSidedVariance.eval(-2.0), 4.0);
        assert_eq!(RiskFunction::OneSidedVariance.eval(3.0), 0.0);
        assert_eq!(RiskFunction::OneSidedAbs.eval(-2.0), 2.0);
        assert_eq!(RiskFunction::sqrt().eval(-4.0), 2.0);
        assert_eq!(RiskFunction::shaped(1.0, 0.0).unwrap().eval(0.0), 1.0);
    }

    #[test]
    fn derivatives() {
        assert_eq!(RiskFunction::OneSidedVariance.derivative(-2.0), -4.0);
        for f in kinds() {
            assert_eq!(f.derivative(1.0), 0.0);
            assert_eq!(f.derivative(0.0), 0.0);
        }
        // clamp engages only within 2.5e-7 of the kink
        assert_eq!(RiskFunction::sqrt().derivative(-1e-12), -1e3);
        let wide = RiskFunction::OneSidedSqrt { clamp: 1e9 };
        assert!(wide.derivative(-1e-12) < -1e5);
    }

    #[test]
    fn penalty_values() {
        let g = PenaltyFunction::SquaredHinge;
        assert_eq!(g.eval(-1.0), 0.0);
        assert_eq!(g.eval(2.0), 4.0);
        assert_eq!(g.derivative(3.0), 6.0);
        assert_eq!(g.derivative(-3.0), 0.0);
    }

    #[test]
    fn constraint_scaling() {
        assert!((scale_constraint(0.1, &RiskFunction::OneSidedVariance).unwrap() - 0.01).abs() < 1e-15);
        assert!((scale_constraint(0.1, &RiskFunction::sqrt()).unwrap() - 0.316227766).abs() < 1e-8);
        assert_eq!(scale_constraint(0.1, &RiskFunction::OneSidedAbs).unwrap(), 0.1);
        for f in kinds() {
            assert_eq!(scale_constraint(1.0, &f).unwrap(), 1.0);
        }
        assert!(scale_constraint(0.1, &RiskFunction::shaped(1.0, 0.0).unwrap()).is_err());
        assert!(scale_constraint(-0.1, &RiskFunction::OneSidedAbs).is_err());
    }

    #[test]
    fn spec_validation() {
        let f = RiskFunction::OneSidedAbs;
        assert!(RiskSpec::new(f.clone(), PenaltyFunction::SquaredHinge, 0.1, 10.0).is_ok());
        assert!(RiskSpec::new(f.clone(), PenaltyFunction::SquaredHinge, 0.1, 0.0).is_ok());
        assert!(RiskSpec::new(f.clone(), PenaltyFunction::SquaredHinge, 0.1, -1.0).is_err());
        assert!(RiskSpec::new(f, PenaltyFunction::SquaredHinge, f64::NAN, 1.0).is_err());
        assert!(RiskFunction::shaped(0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn one_sided_kinds_vanish_on_nonnegative(z in 0.0f64..1e6) {
            for f in kinds() {
                prop_assert_eq!(f.eval(z), 0.0);
            }
        }

        #[test]
        fn risk_and_penalty_are_nonnegative(z in -1e6f64..1e6, b in 1e-3f64..1e3, c in -10.0f64..10.0) {
            for f in kinds() {
                prop_assert!(f.eval(z) >= 0.0);
            }
            let f = RiskFunction::Shaped { b, c };
            prop_assert!(f.eval(z) >= 0.0);
            prop_assert!(PenaltyFunction::SquaredHinge.eval(z) >= 0.0);
        }
    }
}

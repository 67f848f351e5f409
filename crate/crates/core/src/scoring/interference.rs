use serde::{Deserialize, Serialize};

use crate::resource::{Dim, ResourceProfile};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum InterferenceMode<S: Scalar> {
    /// Slowdown is the worst per-dimension oversubscription, never below 1.
    ProportionalShare,
    /// `1 + Σ_d Σ_e m[d][e] · own_d · others_e`.
    LinearCoefficient([[S; 4]; 4]),
}

/// Co-run slowdown model over the fixed resource dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceModel<S: Scalar> {
    pub capacity: ResourceProfile<S>,
    pub mode: InterferenceMode<S>,
}

impl<S: Scalar> InterferenceModel<S> {
    pub fn proportional(capacity: ResourceProfile<S>) -> Self {
        Self {
            capacity,
            mode: InterferenceMode::ProportionalShare,
        }
    }

    /// Slowdown of a job with demand `own` co-running with `others`. Exactly
    /// 1 when there are no co-runners.
    pub fn slowdown(&self, own: &ResourceProfile<S>, others: &[ResourceProfile<S>]) -> S {
        if others.is_empty() {
            return S::one();
        }
        let rest = ResourceProfile::sum(others);
        match &self.mode {
            InterferenceMode::ProportionalShare => {
                let total = *own + rest;
                Dim::ALL.iter().fold(S::one(), |worst, &d| {
                    let (need, cap) = (total.get(d), self.capacity.get(d));
                    let ratio = if need <= S::zero() {
                        S::zero()
                    } else if cap <= S::zero() {
                        S::infinity()
                    } else {
                        need / cap
                    };
                    worst.max_of(ratio)
                })
            }
            InterferenceMode::LinearCoefficient(m) => {
                let mut s = S::one();
                for d in Dim::ALL {
                    for e in Dim::ALL {
                        s = s + m[d.index()][e.index()] * own.get(d) * rest.get(e);
                    }
                }
                s.max_of(S::one())
            }
        }
    }
}

/// Config-file form of [`InterferenceModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceConfig {
    pub mode: String,
    pub capacity: ResourceProfile<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<[[f64; 4]; 4]>,
}

impl InterferenceConfig {
    pub fn to_model<S: Scalar>(&self) -> Result<InterferenceModel<S>, String> {
        let mode = match (self.mode.as_str(), &self.coefficients) {
            ("proportional_share", None) => InterferenceMode::ProportionalShare,
            ("linear_coefficient", Some(m)) => {
                if m.iter().flatten().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err("interference.coefficients must be finite and nonnegative".into());
                }
                InterferenceMode::LinearCoefficient(m.map(|row| row.map(S::from_f64_lossy)))
            }
            ("proportional_share", Some(_)) => {
                return Err("interference.coefficients only apply to linear_coefficient".into())
            }
            ("linear_coefficient", None) => {
                return Err("interference.coefficients required for linear_coefficient".into())
            }
            (other, _) => return Err(format!("interference.mode `{other}` is not supported")),
        };
        Ok(InterferenceModel {
            capacity: self.capacity.cast(),
            mode,
        })
    }
}

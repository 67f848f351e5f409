//! Multi-dimensional resource demand vectors.

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// The fixed resource dimension set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    Cpu,
    Mem,
    Io,
    Slots,
}

impl Dim {
    pub const ALL: [Dim; 4] = [Dim::Cpu, Dim::Mem, Dim::Io, Dim::Slots];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dim::Cpu => "cpu",
            Dim::Mem => "mem",
            Dim::Io => "io",
            Dim::Slots => "slots",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ResourceError {
    #[error("resource dimension `{dim}` is negative or not finite ({value})")]
    Invalid { dim: &'static str, value: f64 },
}

/// Per-dimension demand, in fractions of one device's capacity.
///
/// Entries are nonnegative; the dimension set is always exactly [`Dim::ALL`].
#[derive(Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct ResourceProfile<S: Scalar> {
    demand: [S; 4],
}

impl<S: Scalar> ResourceProfile<S> {
    pub fn new(cpu: S, mem: S, io: S, slots: S) -> Result<Self, ResourceError> {
        let demand = [cpu, mem, io, slots];
        for d in Dim::ALL {
            let v = demand[d.index()];
            if v < S::zero() || !v.is_finite() {
                return Err(ResourceError::Invalid {
                    dim: d.name(),
                    value: v.to_f64_lossy(),
                });
            }
        }
        Ok(Self { demand })
    }

    pub fn zero() -> Self {
        Self {
            demand: [S::zero(); 4],
        }
    }

    pub fn uniform(v: S) -> Result<Self, ResourceError> {
        Self::new(v, v, v, v)
    }

    pub fn get(&self, dim: Dim) -> S {
        self.demand[dim.index()]
    }

    pub fn is_zero(&self) -> bool {
        self.demand.iter().all(|v| *v == S::zero())
    }

    /// Per-dimension maximum.
    pub fn join(&self, other: &Self) -> Self {
        let mut demand = self.demand;
        for (d, o) in demand.iter_mut().zip(other.demand) {
            *d = d.max_of(o);
        }
        Self { demand }
    }

    /// Per-dimension minimum.
    pub fn meet(&self, other: &Self) -> Self {
        let mut demand = self.demand;
        for (d, o) in demand.iter_mut().zip(other.demand) {
            *d = d.min_of(o);
        }
        Self { demand }
    }

    /// Subtraction clamped at zero.
    pub fn saturating_sub(&self, other: &Self) -> Self {
        let mut demand = self.demand;
        for (d, o) in demand.iter_mut().zip(other.demand) {
            *d = (*d - o).max_of(S::zero());
        }
        Self { demand }
    }

    /// True when every dimension of `self` is within `limit`.
    pub fn fits_within(&self, limit: &Self) -> bool {
        self.demand
            .iter()
            .zip(limit.demand.iter())
            .all(|(a, b)| *a <= *b)
    }

    pub fn dominates(&self, other: &Self) -> bool {
        other.fits_within(self)
    }

    pub fn sum<'a, I>(profiles: I) -> Self
    where
        I: IntoIterator<Item = &'a Self>,
        S: 'a,
    {
        profiles.into_iter().fold(Self::zero(), |acc, p| acc + *p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Dim, S)> + '_ {
        Dim::ALL.into_iter().map(move |d| (d, self.demand[d.index()]))
    }

    pub fn cast<T: Scalar>(&self) -> ResourceProfile<T> {
        ResourceProfile {
            demand: self.demand.map(|v| T::from_f64_lossy(v.to_f64_lossy())),
        }
    }
}

impl<S: Scalar> Add for ResourceProfile<S> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let mut demand = self.demand;
        for (d, o) in demand.iter_mut().zip(rhs.demand) {
            *d = *d + o;
        }
        Self { demand }
    }
}

impl<S: Scalar> fmt::Debug for ResourceProfile<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{cpu: {}, mem: {}, io: {}, slots: {}}}",
            self.demand[0], self.demand[1], self.demand[2], self.demand[3]
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    #[serde(default)]
    cpu: f64,
    #[serde(default)]
    mem: f64,
    #[serde(default)]
    io: f64,
    #[serde(default)]
    slots: f64,
}

impl<S: Scalar> TryFrom<RawProfile> for ResourceProfile<S> {
    type Error = ResourceError;

    fn try_from(raw: RawProfile) -> Result<Self, Self::Error> {
        Self::new(
            S::from_f64_lossy(raw.cpu),
            S::from_f64_lossy(raw.mem),
            S::from_f64_lossy(raw.io),
            S::from_f64_lossy(raw.slots),
        )
    }
}

impl<S: Scalar> From<ResourceProfile<S>> for RawProfile {
    fn from(p: ResourceProfile<S>) -> Self {
        RawProfile {
            cpu: p.demand[0].to_f64_lossy(),
            mem: p.demand[1].to_f64_lossy(),
            io: p.demand[2].to_f64_lossy(),
            slots: p.demand[3].to_f64_lossy(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_entries() {
        let err = ResourceProfile::<f64>::new(0.1, -0.2, 0.0, 0.0).unwrap_err();
        assert_eq!(
            err,
            ResourceError::Invalid {
                dim: "mem",
                value: -0.2
            }
        );
    }

    #[test]
    fn join_and_fit() {
        let a = ResourceProfile::<f64>::new(0.5, 0.1, 0.0, 1.0).unwrap();
        let b = ResourceProfile::<f64>::new(0.2, 0.3, 0.4, 0.0).unwrap();
        let j = a.join(&b);
        assert!(j.dominates(&a) && j.dominates(&b));
        assert!(!a.fits_within(&b));
        assert_eq!((a + b).get(Dim::Cpu), 0.7);
        assert_eq!(b.saturating_sub(&a).get(Dim::Cpu), 0.0);
    }
}

use std::fmt;

use crate::{Ms, Utility};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Admit,
    Preempt,
    Promote,
    Reuse,
    Squash,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Admit => "admit",
            Action::Preempt => "preempt",
            Action::Promote => "promote",
            Action::Reuse => "reuse",
            Action::Squash => "squash",
        }
    }
}

/// One scheduling decision with the utility breakdown behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub t: Ms,
    pub phase: u8,
    pub action: Action,
    pub branch: u64,
    pub utility: Utility,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let u = &self.utility;
        write!(
            f,
            "t={:.3} phase={} action={} branch={} eu={:.3} dO={:.3} dU={:.3} dI={:.3}",
            self.t,
            self.phase,
            self.action.as_str(),
            self.branch,
            u.eu,
            u.overlap_d_o,
            u.unlock_d_u,
            u.interference_d_i
        )
    }
}

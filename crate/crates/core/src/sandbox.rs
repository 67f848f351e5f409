//! Branch-local copy-on-write state with staged writes, commit on promotion
//! and squash on mis-speculation.
//!
//! A sandbox never copies its base: it records the base epoch at fork time
//! and resolves reads overlay-first. Any authoritative mutation bumps the
//! epoch, which invalidates every sandbox forked before it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hypothesis::SafetyLevel;
use crate::resource::ResourceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Space {
    Memory,
    Files,
    Env,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EffectOp {
    Read,
    Write(String),
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Effect {
    pub space: Space,
    pub key: String,
    pub op: EffectOp,
}

impl Effect {
    pub fn read(space: Space, key: impl Into<String>) -> Self {
        Self {
            space,
            key: key.into(),
            op: EffectOp::Read,
        }
    }

    pub fn write(space: Space, key: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            space,
            key: key.into(),
            op: EffectOp::Write(value.into()),
        }
    }

    pub fn delete(space: Space, key: impl Into<String>) -> Self {
        Self {
            space,
            key: key.into(),
            op: EffectOp::Delete,
        }
    }

    pub fn mutates(&self) -> bool {
        !matches!(self.op, EffectOp::Read)
    }
}

/// Who caused an authoritative mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MutationSource {
    Authoritative,
    Commit(u64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuthoritativeState {
    pub memory_m: BTreeMap<String, String>,
    pub files_f: BTreeMap<String, String>,
    pub env_e: BTreeMap<String, String>,
    pub epoch: u64,
    mutations: Vec<(MutationSource, Effect)>,
}

impl AuthoritativeState {
    pub fn new() -> Self {
        Self::default()
    }

    fn space_mut(&mut self, space: Space) -> &mut BTreeMap<String, String> {
        match space {
            Space::Memory => &mut self.memory_m,
            Space::Files => &mut self.files_f,
            Space::Env => &mut self.env_e,
        }
    }

    pub fn space(&self, space: Space) -> &BTreeMap<String, String> {
        match space {
            Space::Memory => &self.memory_m,
            Space::Files => &self.files_f,
            Space::Env => &self.env_e,
        }
    }

    pub fn get(&self, space: Space, key: &str) -> Option<&str> {
        self.space(space).get(key).map(String::as_str)
    }

    fn write_raw(&mut self, effect: &Effect) {
        match &effect.op {
            EffectOp::Read => {}
            EffectOp::Write(v) => {
                self.space_mut(effect.space).insert(effect.key.clone(), v.clone());
            }
            EffectOp::Delete => {
                self.space_mut(effect.space).remove(&effect.key);
            }
        }
    }

    /// Applies an effect from authoritative execution. Mutations bump the epoch.
    pub fn apply_authoritative(&mut self, effect: &Effect) {
        if effect.mutates() {
            self.write_raw(effect);
            self.mutations.push((MutationSource::Authoritative, effect.clone()));
            self.epoch += 1;
        }
    }

    /// Every mutation applied so far, in order.
    pub fn mutations(&self) -> &[(MutationSource, Effect)] {
        &self.mutations
    }

    /// Content digest (memory, files, environment); excludes the epoch.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, space) in [("M", &self.memory_m), ("F", &self.files_f), ("E", &self.env_e)] {
            for (k, v) in space {
                h.update(format!("{tag}\u{1}{}\u{1}{k}\u{1}{}\u{1}{v}\u{0}", k.len(), v.len()).as_bytes());
            }
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxStatus {
    Active,
    Preempted,
    Committed,
    Squashed,
}

impl SandboxStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SandboxStatus::Committed | SandboxStatus::Squashed)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SandboxError {
    #[error("effect on `{key}` is non-speculative and must never run in a sandbox")]
    NonSpeculative { key: String },
    #[error("sandbox {id} is {status:?}")]
    Terminal { id: u64, status: SandboxStatus },
    #[error("sandbox {id} forked at epoch {forked}, base is at epoch {current}")]
    Divergence { id: u64, forked: u64, current: u64 },
    #[error("sandbox {id} cannot commit: {reason}")]
    Protocol { id: u64, reason: &'static str },
}

/// A recorded branch-local effect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub effect: Effect,
    pub level: SafetyLevel,
}

/// Resources handed back when a sandbox is squashed.
#[derive(Debug, Clone, PartialEq)]
pub struct Reclaimed {
    pub demand: ResourceProfile<f64>,
    pub dropped_entries: usize,
}

type Overlay = BTreeMap<String, Option<String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SandboxState {
    pub id: u64,
    pub base_epoch: u64,
    pub overlay_m: Overlay,
    pub overlay_f: Overlay,
    pub overlay_e: Overlay,
    pub history_h: Vec<HistoryEntry>,
    pub status: SandboxStatus,
    /// Demand credited back to slack on squash.
    pub demand: ResourceProfile<f64>,
}

impl SandboxState {
    /// Forks a sandbox over `base` without copying it.
    pub fn fork(id: u64, base: &AuthoritativeState) -> Self {
        Self {
            id,
            base_epoch: base.epoch,
            overlay_m: Overlay::new(),
            overlay_f: Overlay::new(),
            overlay_e: Overlay::new(),
            history_h: Vec::new(),
            status: SandboxStatus::Active,
            demand: ResourceProfile::zero(),
        }
    }

    fn overlay(&self, space: Space) -> &Overlay {
        match space {
            Space::Memory => &self.overlay_m,
            Space::Files => &self.overlay_f,
            Space::Env => &self.overlay_e,
        }
    }

    fn overlay_mut(&mut self, space: Space) -> &mut Overlay {
        match space {
            Space::Memory => &mut self.overlay_m,
            Space::Files => &mut self.overlay_f,
            Space::Env => &mut self.overlay_e,
        }
    }

    /// Overlay-first read; a tombstone hides the base value.
    pub fn read<'a>(&'a self, base: &'a AuthoritativeState, space: Space, key: &str) -> Option<&'a str> {
        match self.overlay(space).get(key) {
            Some(v) => v.as_deref(),
            None => base.get(space, key),
        }
    }

    pub fn is_stale(&self, base: &AuthoritativeState) -> bool {
        self.base_epoch != base.epoch
    }

    /// Total entries across the three overlays.
    pub fn overlay_len(&self) -> usize {
        self.overlay_m.len() + self.overlay_f.len() + self.overlay_e.len()
    }

    pub fn has_staged_writes(&self) -> bool {
        self.history_h
            .iter()
            .any(|e| e.level == SafetyLevel::Level2Staged && e.effect.mutates())
    }

    fn ensure_live(&self) -> Result<(), SandboxError> {
        if self.status.is_terminal() {
            return Err(SandboxError::Terminal {
                id: self.id,
                status: self.status,
            });
        }
        Ok(())
    }

    /// Records an effect. Level 0 may only write the environment (session
    /// registry); level 1 is record-only; level 2 writes the overlays.
    pub fn apply_effect(&mut self, effect: Effect, level: SafetyLevel) -> Result<(), SandboxError> {
        self.ensure_live()?;
        let writes = match level {
            SafetyLevel::NonSpeculative => {
                return Err(SandboxError::NonSpeculative { key: effect.key });
            }
            SafetyLevel::Level0Prep => effect.space == Space::Env && effect.mutates(),
            SafetyLevel::Level1Readonly => false,
            SafetyLevel::Level2Staged => effect.mutates(),
        };
        if writes {
            let value = match &effect.op {
                EffectOp::Write(v) => Some(v.clone()),
                _ => None,
            };
            self.overlay_mut(effect.space).insert(effect.key.clone(), value);
        }
        self.history_h.push(HistoryEntry { effect, level });
        Ok(())
    }

    pub fn preempt(&mut self) -> Result<(), SandboxError> {
        self.ensure_live()?;
        self.status = SandboxStatus::Preempted;
        Ok(())
    }

    /// Merges the overlays into `base`. Requires that the owning branch was
    /// promoted and that `base` has not moved since the fork.
    pub fn commit(&mut self, base: &mut AuthoritativeState, promoted: bool) -> Result<(), SandboxError> {
        self.ensure_live().map_err(|_| SandboxError::Protocol {
            id: self.id,
            reason: "sandbox already terminal",
        })?;
        if !promoted {
            return Err(SandboxError::Protocol {
                id: self.id,
                reason: "branch was not promoted",
            });
        }
        if self.is_stale(base) {
            return Err(SandboxError::Divergence {
                id: self.id,
                forked: self.base_epoch,
                current: base.epoch,
            });
        }
        let mut mutated = false;
        for (space, overlay) in [
            (Space::Memory, &self.overlay_m),
            (Space::Files, &self.overlay_f),
            (Space::Env, &self.overlay_e),
        ] {
            for (k, v) in overlay {
                let effect = match v {
                    Some(v) => Effect::write(space, k.clone(), v.clone()),
                    None => Effect::delete(space, k.clone()),
                };
                base.write_raw(&effect);
                base.mutations.push((MutationSource::Commit(self.id), effect));
                mutated = true;
            }
        }
        if mutated {
            base.epoch += 1;
        }
        self.status = SandboxStatus::Committed;
        Ok(())
    }

    /// Drops the overlays. The base is never touched.
    pub fn squash(&mut self) -> Result<Reclaimed, SandboxError> {
        self.ensure_live()?;
        let dropped_entries = self.overlay_len();
        self.overlay_m.clear();
        self.overlay_f.clear();
        self.overlay_e.clear();
        self.status = SandboxStatus::Squashed;
        Ok(Reclaimed {
            demand: self.demand,
            dropped_entries,
        })
    }

    /// Replays the recorded writes onto a copy of `base`; the reference
    /// result for [`SandboxState::commit`].
    pub fn replay_onto(&self, base: &AuthoritativeState) -> AuthoritativeState {
        let mut out = base.clone();
        for entry in &self.history_h {
            let applies = match entry.level {
                SafetyLevel::Level0Prep => entry.effect.space == Space::Env,
                SafetyLevel::Level2Staged => true,
                _ => false,
            };
            if applies {
                out.write_raw(&entry.effect);
            }
        }
        out
    }
}

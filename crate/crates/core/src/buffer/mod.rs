//! Fixed-capacity streaming memory of per-frame token sets.
//!
//! Three eviction policies: propagative merging (the two oldest slots are
//! averaged when a new frame arrives at capacity), first-in-first-out, and a
//! hard reset that empties the buffer when it is full.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionPolicy {
    /// Merge the two oldest slots by elementwise mean.
    Pmf,
    Fifo,
    HardReset,
}

impl EvictionPolicy {
    pub const ALL: [EvictionPolicy; 3] = [EvictionPolicy::Pmf, EvictionPolicy::Fifo, EvictionPolicy::HardReset];

    pub fn name(self) -> &'static str {
        match self {
            EvictionPolicy::Pmf => "pmf",
            EvictionPolicy::Fifo => "fifo",
            EvictionPolicy::HardReset => "hard-reset",
        }
    }
}

impl std::str::FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pmf" => Ok(EvictionPolicy::Pmf),
            "fifo" => Ok(EvictionPolicy::Fifo),
            "hard-reset" | "hardreset" | "reset" => Ok(EvictionPolicy::HardReset),
            other => Err(Error::Parse(format!("unknown buffer policy `{other}`"))),
        }
    }
}

/// Something that can sit in a buffer slot.
pub trait Slot: Clone {
    fn dims(&self) -> Vec<usize>;
    /// Elementwise mean `(older + newer) / 2`.
    fn merge(older: &Self, newer: &Self) -> Result<Self>;
    fn l2_norm(&self) -> f64;
}

impl Slot for Tensor {
    fn dims(&self) -> Vec<usize> {
        self.shape().to_vec()
    }

    fn merge(older: &Self, newer: &Self) -> Result<Self> {
        Ok(older.zip_map(newer, |a, b| (a + b) * 0.5)?)
    }

    fn l2_norm(&self) -> f64 {
        Tensor::l2_norm(self)
    }
}

impl Slot for Var<'_> {
    fn dims(&self) -> Vec<usize> {
        self.shape()
    }

    fn merge(older: &Self, newer: &Self) -> Result<Self> {
        Ok(older.add(newer)?.scale(0.5))
    }

    fn l2_norm(&self) -> f64 {
        self.value().l2_norm()
    }
}

/// What the last push did to the existing slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PushEvent {
    Appended,
    Merged,
    Dropped,
    Cleared,
}

#[derive(Clone, Debug)]
pub struct StreamBuffer<T> {
    capacity: usize,
    policy: EvictionPolicy,
    slots: Vec<T>,
    pushes: u64,
    last_event: Option<PushEvent>,
}

#[derive(Serialize)]
struct DebugLine<'a> {
    push: u64,
    policy: &'a str,
    event: Option<PushEvent>,
    slot_norms: Vec<f64>,
}

impl<T: Slot> StreamBuffer<T> {
    pub fn new(capacity: usize, policy: EvictionPolicy) -> Result<Self> {
        if capacity < 2 && policy == EvictionPolicy::Pmf {
            return Err(Error::Invalid("merging buffer needs capacity of at least 2".into()));
        }
        if capacity == 0 {
            return Err(Error::Invalid("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            policy,
            slots: Vec::with_capacity(capacity),
            pushes: 0,
            last_event: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.pushes = 0;
        self.last_event = None;
    }

    pub fn push(&mut self, frame: T) -> Result<()> {
        if let Some(first) = self.slots.first() {
            let (want, got) = (first.dims(), frame.dims());
            if want != got {
                return Err(shape_err("buffer push", &want, &got));
            }
        }
        let event = if self.slots.len() < self.capacity {
            PushEvent::Appended
        } else {
            match self.policy {
                EvictionPolicy::Pmf => {
                    let merged = T::merge(&self.slots[0], &self.slots[1])?;
                    self.slots.remove(0);
                    self.slots[0] = merged;
                    PushEvent::Merged
                }
                EvictionPolicy::Fifo => {
                    self.slots.remove(0);
                    PushEvent::Dropped
                }
                EvictionPolicy::HardReset => {
                    self.slots.clear();
                    PushEvent::Cleared
                }
            }
        };
        self.slots.push(frame);
        self.pushes += 1;
        self.last_event = Some(event);
        Ok(())
    }

    /// Slots oldest first.
    pub fn slots(&self) -> &[T] {
        &self.slots
    }

    pub fn snapshot(&self) -> Vec<T> {
        self.slots.clone()
    }

    pub fn last_event(&self) -> Option<PushEvent> {
        self.last_event
    }

    /// Convert every slot, keeping policy and bookkeeping.
    pub fn map<U: Slot>(&self, f: impl FnMut(&T) -> U) -> StreamBuffer<U> {
        StreamBuffer {
            capacity: self.capacity,
            policy: self.policy,
            slots: self.slots.iter().map(f).collect(),
            pushes: self.pushes,
            last_event: self.last_event,
        }
    }

    /// One JSON line describing the buffer after the latest push.
    pub fn debug_line(&self) -> String {
        serde_json::to_string(&DebugLine {
            push: self.pushes,
            policy: self.policy.name(),
            event: self.last_event,
            slot_norms: self.slots.iter().map(|s| s.l2_norm()).collect(),
        })
        .expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests;

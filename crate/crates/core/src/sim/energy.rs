//! Integer nano-joule battery accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const NJ_PER_J: f64 = 1e9;

pub fn joules_to_nj(j: f64) -> u64 {
    (j * NJ_PER_J).round().max(0.0) as u64
}

pub fn nj_to_joules(nj: u64) -> f64 {
    nj as f64 / NJ_PER_J
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyUse {
    Sample,
    Cpu,
    Tx,
    Rx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exhausted;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Battery {
    pub initial_nj: u64,
    pub remaining_nj: u64,
    /// What was actually taken, by use. A debit larger than the remaining
    /// charge takes only what is left.
    pub debited_nj: BTreeMap<EnergyUse, u64>,
}

impl Battery {
    pub fn new(joules: f64) -> Self {
        let nj = joules_to_nj(joules);
        Battery {
            initial_nj: nj,
            remaining_nj: nj,
            debited_nj: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.remaining_nj == 0
    }

    pub fn remaining_j(&self) -> f64 {
        nj_to_joules(self.remaining_nj)
    }

    pub fn total_debited_nj(&self) -> u64 {
        self.debited_nj.values().sum()
    }

    pub fn debit(&mut self, what: EnergyUse, nj: u64) -> Result<(), Exhausted> {
        let taken = nj.min(self.remaining_nj);
        self.remaining_nj -= taken;
        *self.debited_nj.entry(what).or_default() += taken;
        if taken < nj || (self.remaining_nj == 0 && nj > 0) {
            Err(Exhausted)
        } else {
            Ok(())
        }
    }
}

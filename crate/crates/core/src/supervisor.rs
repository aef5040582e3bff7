//! External supervisor: agreement arbitration, fault counters, spare pool,
//! watchdog and escalation decisions. It decides; the system applies.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::error::SimError;
use crate::ids::{ThreadGroupId, TileId};
use crate::lockstep::{CheckpointReport, Verdict};
use crate::tile::{Tile, TileStatus};

/// One line per sibling on the agreement bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementSignal {
    pub source: TileId,
    pub checkpoint_index: u64,
    pub bits: Vec<(TileId, Verdict)>,
}

impl From<&CheckpointReport> for AgreementSignal {
    fn from(r: &CheckpointReport) -> Self {
        Self {
            source: r.tile_id.clone(),
            checkpoint_index: r.checkpoint_index,
            bits: r.verdicts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum GroupVerdict {
    AllAgree,
    Faulty {
        faulty: BTreeSet<TileId>,
        majority: BTreeSet<TileId>,
    },
    /// No unique largest agreeing clique in a group of three or more.
    Unresolvable,
    /// A two-member group split: detection without correction.
    UnresolvablePair,
    /// Every reporter missed every sibling: the shared interconnect is suspect.
    SharedSuspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum FaultAction {
    StateUpdate,
    Replace { spare: TileId },
    /// Spare pool empty: reboot into a partial reconfiguration.
    EscalateStage2,
    Defunct { spare: Option<TileId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PendingAction {
    StateUpdate,
    Replace,
    Reboot,
    Stage2,
    Stage3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    StateUpdate { donor: TileId },
    Reboot,
    ActivateWithMapping { groups: BTreeSet<ThreadGroupId> },
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    pub transient_threshold: u32,
    pub window: u64,
    pub defunct_threshold: u32,
    pub watchdog_period: Option<SimTime>,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            transient_threshold: 3,
            window: 100,
            defunct_threshold: 10,
            watchdog_period: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupervisorState {
    pub fault_counter: BTreeMap<TileId, u32>,
    /// Checkpoint ordinals of recent faults, for the sliding window.
    recent: BTreeMap<TileId, VecDeque<u64>>,
    pub transient_threshold: u32,
    pub window: u64,
    pub defunct_threshold: u32,
    pub spare_pool: BTreeSet<TileId>,
    pub watchdog_period: SimTime,
    pub watchdog_last_kick: SimTime,
    pub watchdog_held: bool,
    pub pending: BTreeMap<TileId, PendingAction>,
    pub commands_issued: u64,
    /// Ingested checkpoints; drives the fault window.
    pub ordinal: u64,
}

impl SupervisorState {
    pub fn new(config: SupervisorConfig, watchdog_period: SimTime) -> Self {
        Self {
            fault_counter: BTreeMap::new(),
            recent: BTreeMap::new(),
            transient_threshold: config.transient_threshold,
            window: config.window,
            defunct_threshold: config.defunct_threshold,
            spare_pool: BTreeSet::new(),
            watchdog_period,
            watchdog_last_kick: SimTime::ZERO,
            watchdog_held: false,
            pending: BTreeMap::new(),
            commands_issued: 0,
            ordinal: 0,
        }
    }

    pub fn kick(&mut self, now: SimTime) {
        self.watchdog_last_kick = now;
    }

    /// Arbitrate one checkpoint of one group.
    pub fn ingest_signals(
        &mut self,
        members: &[TileId],
        signals: &[AgreementSignal],
        now: SimTime,
    ) -> GroupVerdict {
        self.kick(now);
        self.ordinal += 1;
        arbitrate(members, signals)
    }

    pub fn windowed_count(&self, tile: &TileId) -> u32 {
        self.recent.get(tile).map_or(0, |q| q.len() as u32)
    }

    /// Count a fault against `tile` and choose the response.
    pub fn handle_fault(&mut self, tile: &TileId) -> FaultAction {
        let lifetime = {
            let c = self.fault_counter.entry(tile.clone()).or_default();
            *c += 1;
            *c
        };
        let ordinal = self.ordinal;
        let window = self.window;
        let q = self.recent.entry(tile.clone()).or_default();
        q.push_back(ordinal);
        while q.front().is_some_and(|o| o + window <= ordinal) {
            q.pop_front();
        }
        let windowed = q.len() as u32;

        let action = if lifetime >= self.defunct_threshold {
            FaultAction::Defunct {
                spare: self.take_spare(),
            }
        } else if windowed >= self.transient_threshold {
            match self.take_spare() {
                Some(spare) => FaultAction::Replace { spare },
                None => FaultAction::EscalateStage2,
            }
        } else {
            FaultAction::StateUpdate
        };
        let pending = match &action {
            FaultAction::StateUpdate => PendingAction::StateUpdate,
            FaultAction::Replace { .. } => PendingAction::Replace,
            FaultAction::EscalateStage2 | FaultAction::Defunct { .. } => PendingAction::Stage2,
        };
        self.pending.insert(tile.clone(), pending);
        action
    }

    pub fn take_spare(&mut self) -> Option<TileId> {
        self.spare_pool.pop_first()
    }

    pub fn return_spare(&mut self, tile: TileId) {
        self.spare_pool.insert(tile);
    }

    /// Reset after a successful repair validation.
    pub fn reset_counter(&mut self, tile: &TileId) {
        self.fault_counter.remove(tile);
        self.recent.remove(tile);
    }

    /// Returns true when the watchdog fires a full-system reset.
    pub fn watchdog_tick(&mut self, now: SimTime) -> bool {
        if self.watchdog_held {
            return false;
        }
        if now.saturating_sub(self.watchdog_last_kick) > self.watchdog_period {
            self.watchdog_last_kick = now;
            return true;
        }
        false
    }

    /// Validate and count a command; the system turns it into events.
    pub fn command_tile(&mut self, tile: &Tile, command: &Command) -> Result<(), SimError> {
        if tile.status() == TileStatus::Defunct {
            return Err(SimError::CommandRejected {
                tile: tile.tile_id.clone(),
                reason: format!("{} tile cannot take {}", tile.status().label(), command_label(command)),
            });
        }
        if let Command::ActivateWithMapping { .. } = command {
            if tile.status() != TileStatus::IdleSpare {
                return Err(SimError::CommandRejected {
                    tile: tile.tile_id.clone(),
                    reason: format!("activation requires an idle spare, found {}", tile.status().label()),
                });
            }
        }
        self.commands_issued += 1;
        Ok(())
    }
}

pub fn command_label(c: &Command) -> &'static str {
    match c {
        Command::StateUpdate { .. } => "state-update",
        Command::Reboot => "reboot",
        Command::ActivateWithMapping { .. } => "activate-with-mapping",
        Command::Halt => "halt",
    }
}

/// Pairwise agreement: some side saw a match and neither side saw a mismatch
/// or a missed deadline.
pub fn agreement_graph(
    members: &[TileId],
    signals: &[AgreementSignal],
) -> BTreeSet<(TileId, TileId)> {
    let mut agree = BTreeSet::new();
    let mut broken = BTreeSet::new();
    for s in signals {
        for (other, v) in &s.bits {
            let key = ordered(&s.source, other);
            match v {
                Verdict::Agree => agree.insert(key),
                _ => broken.insert(key),
            };
        }
    }
    agree
        .difference(&broken)
        .filter(|(a, b)| members.contains(a) && members.contains(b))
        .cloned()
        .collect()
}

fn ordered(a: &TileId, b: &TileId) -> (TileId, TileId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// All maximum cliques of the agreement graph, by exhaustive subset search.
pub fn largest_cliques(members: &[TileId], edges: &BTreeSet<(TileId, TileId)>) -> Vec<BTreeSet<TileId>> {
    let n = members.len();
    assert!(n < 24, "group too large for exhaustive arbitration");
    let mut best: Vec<BTreeSet<TileId>> = Vec::new();
    let mut best_size = 0;
    for mask in 1u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size < best_size {
            continue;
        }
        let picked: Vec<&TileId> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &members[i]).collect();
        let clique = picked.iter().enumerate().all(|(i, a)| {
            picked[i + 1..]
                .iter()
                .all(|b| edges.contains(&ordered(a, b)))
        });
        if !clique {
            continue;
        }
        if size > best_size {
            best.clear();
            best_size = size;
        }
        best.push(picked.into_iter().cloned().collect());
    }
    best
}

pub fn arbitrate(members: &[TileId], signals: &[AgreementSignal]) -> GroupVerdict {
    let everyone_reported = members
        .iter()
        .all(|m| signals.iter().any(|s| &s.source == m));
    let all_agree = everyone_reported
        && signals
            .iter()
            .all(|s| s.bits.iter().all(|(_, v)| *v == Verdict::Agree));
    if all_agree {
        return GroupVerdict::AllAgree;
    }
    let all_missed = signals.len() >= 2
        && everyone_reported
        && signals.iter().all(|s| {
            !s.bits.is_empty() && s.bits.iter().all(|(_, v)| *v == Verdict::DeadlineMiss)
        });
    if all_missed {
        return GroupVerdict::SharedSuspect;
    }
    let edges = agreement_graph(members, signals);
    let cliques = largest_cliques(members, &edges);
    match cliques.as_slice() {
        [majority] if majority.len() >= 2 || members.len() == 1 => GroupVerdict::Faulty {
            faulty: members
                .iter()
                .filter(|m| !majority.contains(*m))
                .cloned()
                .collect(),
            majority: majority.clone(),
        },
        _ if members.len() == 2 => GroupVerdict::UnresolvablePair,
        _ => GroupVerdict::Unresolvable,
    }
}

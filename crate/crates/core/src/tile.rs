//! Per-tile lifecycle, validation memory and group bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::error::SimError;
use crate::fabric::Fabric;
use crate::ids::{GroupId, PartitionId, ThreadGroupId, ThreadId, TileId};
use crate::workload::{init_thread, StateSnapshot, ThreadSpec, ThreadState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TileStatus {
    Booting,
    Active,
    IdleSpare,
    Updating,
    Suspect,
    Rebooting,
    Defunct,
}

impl TileStatus {
    /// Lifecycle transitions. `Defunct -> Rebooting` is only taken after a
    /// successful fabric validation; the caller enforces that.
    pub fn can_transition(self, to: TileStatus) -> bool {
        use TileStatus::*;
        match (self, to) {
            (Booting, Active | IdleSpare | Defunct) => true,
            (Active, Suspect | Rebooting | Defunct) => true,
            (Suspect, Active | Rebooting | Defunct) => true,
            (Rebooting, Booting | Defunct) => true,
            (IdleSpare, Updating | Rebooting | Defunct) => true,
            (Updating, Active | Rebooting | Defunct) => true,
            (Defunct, Rebooting) => true,
            _ => false,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TileStatus::Booting => "booting",
            TileStatus::Active => "active",
            TileStatus::IdleSpare => "idle-spare",
            TileStatus::Updating => "updating",
            TileStatus::Suspect => "suspect",
            TileStatus::Rebooting => "rebooting",
            TileStatus::Defunct => "defunct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VmemEntry {
    pub checksum: Option<u64>,
    pub snapshot: Option<StateSnapshot>,
}

/// Outcome of a validation-memory write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Stored { ready: bool },
    /// The tile's interface is blocked by a functional interrupt; nothing was stored.
    Lost,
}

type VmemKey = (GroupId, u64, ThreadId);

/// Tile-owned memory segment, readable by every tile and writable only by its owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationMemory {
    owner: TileId,
    entries: BTreeMap<VmemKey, VmemEntry>,
    expected: BTreeMap<(GroupId, u64), usize>,
    ready: BTreeSet<(GroupId, u64)>,
    /// Bit flips waiting for the next checksum write of a thread.
    latched_flips: BTreeMap<ThreadId, u64>,
}

impl ValidationMemory {
    pub fn new(owner: TileId) -> Self {
        Self {
            owner,
            entries: BTreeMap::new(),
            expected: BTreeMap::new(),
            ready: BTreeSet::new(),
            latched_flips: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &TileId {
        &self.owner
    }

    fn check_owner(&self, actor: &TileId) -> Result<(), SimError> {
        if actor != &self.owner {
            return Err(SimError::NonOwnerWrite {
                owner: self.owner.clone(),
                actor: actor.clone(),
            });
        }
        Ok(())
    }

    /// Announce how many checksum entries checkpoint `index` will carry.
    pub fn begin_checkpoint(
        &mut self,
        actor: &TileId,
        group: &GroupId,
        index: u64,
        expected: usize,
    ) -> Result<(), SimError> {
        self.check_owner(actor)?;
        self.expected.insert((group.clone(), index), expected);
        if expected == 0 {
            self.ready.insert((group.clone(), index));
        }
        Ok(())
    }

    pub fn write_checksum(
        &mut self,
        actor: &TileId,
        group: &GroupId,
        index: u64,
        thread: &ThreadId,
        checksum: u64,
    ) -> Result<bool, SimError> {
        self.check_owner(actor)?;
        let flip = self.latched_flips.remove(thread).unwrap_or(0);
        self.entries
            .entry((group.clone(), index, thread.clone()))
            .or_default()
            .checksum = Some(checksum ^ flip);
        let key = (group.clone(), index);
        let written = self
            .entries
            .range((group.clone(), index, ThreadId(String::new()))..)
            .take_while(|((g, i, _), _)| g == group && *i == index)
            .filter(|(_, e)| e.checksum.is_some())
            .count();
        let ready = written >= self.expected.get(&key).copied().unwrap_or(usize::MAX);
        if ready {
            self.ready.insert(key);
        }
        Ok(ready)
    }

    pub fn write_snapshot(
        &mut self,
        actor: &TileId,
        group: &GroupId,
        index: u64,
        snapshot: StateSnapshot,
    ) -> Result<(), SimError> {
        self.check_owner(actor)?;
        let thread = snapshot.thread_id.clone();
        self.entries
            .entry((group.clone(), index, thread))
            .or_default()
            .snapshot = Some(snapshot);
        Ok(())
    }

    pub fn is_ready(&self, group: &GroupId, index: u64) -> bool {
        self.ready.contains(&(group.clone(), index))
    }

    pub fn checksum(&self, group: &GroupId, index: u64, thread: &ThreadId) -> Option<u64> {
        self.entries
            .get(&(group.clone(), index, thread.clone()))
            .and_then(|e| e.checksum)
    }

    pub fn snapshot(&self, group: &GroupId, index: u64, thread: &ThreadId) -> Option<&StateSnapshot> {
        self.entries
            .get(&(group.clone(), index, thread.clone()))
            .and_then(|e| e.snapshot.as_ref())
    }

    /// Latch a bit flip into the next stored checksum of `thread`.
    pub fn latch_flip(&mut self, thread: &ThreadId, mask: u64) {
        *self.latched_flips.entry(thread.clone()).or_insert(0) ^= mask;
    }

    /// Drop entries of `group` older than `keep_from`.
    pub fn prune(&mut self, group: &GroupId, keep_from: u64) {
        self.entries
            .retain(|(g, i, _), _| g != group || *i >= keep_from);
        self.expected.retain(|(g, i), _| g != group || *i >= keep_from);
        self.ready.retain(|(g, i)| g != group || *i >= keep_from);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.expected.clear();
        self.ready.clear();
        self.latched_flips.clear();
    }
}

/// Free-function form of a validation write: `actor` must own `tile`.
/// Blocked tiles lose the write silently.
pub fn write_validation(
    tile: &mut Tile,
    actor: &TileId,
    group: &GroupId,
    thread: &ThreadId,
    index: u64,
    checksum: u64,
    snapshot: Option<StateSnapshot>,
) -> Result<WriteOutcome, SimError> {
    if actor != &tile.tile_id {
        return Err(SimError::NonOwnerWrite {
            owner: tile.tile_id.clone(),
            actor: actor.clone(),
        });
    }
    if tile.sefi_blocked {
        return Ok(WriteOutcome::Lost);
    }
    let ready = tile
        .vmem
        .write_checksum(actor, group, index, thread, checksum)?;
    if let Some(s) = snapshot {
        tile.vmem.write_snapshot(actor, group, index, s)?;
    }
    Ok(WriteOutcome::Stored { ready })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub tile_id: TileId,
    status: TileStatus,
    pub hosted_groups: BTreeSet<ThreadGroupId>,
    pub vmem: ValidationMemory,
    pub partition: PartitionId,
    pub sefi_blocked: bool,
    pub sefi_until: SimTime,
    /// Thread replicas; every known thread is initialized at boot.
    pub threads: BTreeMap<ThreadId, ThreadState>,
    /// Execution runs on damaged fabric and perturbs state every slice.
    pub corrupting: bool,
    /// Set when the tile was newly added to a group or must resynchronize.
    pub pending_update: Option<TileId>,
    /// Compute capacity in permille.
    pub capacity: u64,
}

impl Tile {
    pub fn new(tile_id: TileId, partition: PartitionId, capacity: u64) -> Self {
        Self {
            vmem: ValidationMemory::new(tile_id.clone()),
            tile_id,
            status: TileStatus::Booting,
            hosted_groups: BTreeSet::new(),
            partition,
            sefi_blocked: false,
            sefi_until: SimTime::ZERO,
            threads: BTreeMap::new(),
            corrupting: false,
            pending_update: None,
            capacity,
        }
    }

    pub fn status(&self) -> TileStatus {
        self.status
    }

    pub fn set_status(&mut self, to: TileStatus) -> Result<TileStatus, SimError> {
        let from = self.status;
        if from == to {
            return Ok(from);
        }
        if !from.can_transition(to) {
            return Err(SimError::IllegalTransition {
                tile: self.tile_id.clone(),
                from,
                to,
            });
        }
        if matches!(to, TileStatus::Defunct | TileStatus::IdleSpare) {
            self.hosted_groups.clear();
        }
        self.status = to;
        Ok(from)
    }

    /// Executing thread replicas of a hosted group.
    pub fn is_running(&self) -> bool {
        matches!(
            self.status,
            TileStatus::Active | TileStatus::Suspect | TileStatus::Updating
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadGroup {
    pub tg_id: ThreadGroupId,
    pub threads: Vec<ThreadId>,
    pub check_divisor: BTreeMap<ThreadId, u64>,
}

impl ThreadGroup {
    pub fn divisor(&self, thread: &ThreadId) -> u64 {
        self.check_divisor.get(thread).copied().unwrap_or(1).max(1)
    }
}

/// Runtime phase of a tile group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupPhase {
    Running,
    Checkpointing,
    Grace,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGroup {
    pub group_id: GroupId,
    /// Sorted by tile id.
    pub members: Vec<TileId>,
    pub thread_groups: BTreeSet<ThreadGroupId>,
    pub base_period: SimTime,
    pub comparison_deadline: SimTime,
    pub grace_period: SimTime,
    pub checkpoint_index: u64,
    /// Membership the group should be restored to after losing a member.
    pub nominal_size: usize,
    pub phase: GroupPhase,
    pub last_resume: SimTime,
    /// Only detection, no majority correction (two members).
    pub detect_only: bool,
}

impl TileGroup {
    pub fn is_member(&self, tile: &TileId) -> bool {
        self.members.binary_search(tile).is_ok()
    }

    pub fn add_member(&mut self, tile: TileId) {
        if let Err(pos) = self.members.binary_search(&tile) {
            self.members.insert(pos, tile);
        }
    }

    pub fn remove_member(&mut self, tile: &TileId) -> bool {
        match self.members.binary_search(tile) {
            Ok(pos) => {
                self.members.remove(pos);
                true
            }
            Err(_) => false,
        }
    }

    /// Siblings of `tile` in comparison order: cyclic successors by id.
    pub fn comparison_order(&self, tile: &TileId) -> Vec<TileId> {
        let n = self.members.len();
        let start = match self.members.binary_search(tile) {
            Ok(p) => p,
            Err(p) => p.wrapping_sub(1),
        };
        (1..n)
            .map(|k| self.members[(start.wrapping_add(k)) % n].clone())
            .filter(|t| t != tile)
            .collect()
    }
}

/// Base period is the shortest desired period; each thread is checked every
/// `floor(desired / base)` checkpoints.
pub fn derive_timing(specs: &[&ThreadSpec]) -> (SimTime, BTreeMap<ThreadId, u64>) {
    let base = specs
        .iter()
        .map(|s| s.desired_checkpoint_period)
        .min()
        .unwrap_or(SimTime(1));
    let divisors = specs
        .iter()
        .map(|s| {
            (
                s.thread_id.clone(),
                (s.desired_checkpoint_period.ticks() / base.ticks().max(1)).max(1),
            )
        })
        .collect();
    (base, divisors)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootOutcome {
    Active { first_checkpoint: SimTime },
    IdleSpare,
    /// Self-test found damaged cells under the active configuration.
    Failed { damaged_cells: Vec<u32> },
}

/// Boot and self-test a tile, initialize every known thread, and activate it
/// for `assigned` (or park it as a spare when nothing is assigned).
pub fn boot_tile(
    tile: &mut Tile,
    assigned: &[&ThreadGroup],
    all_threads: &BTreeMap<ThreadId, Arc<ThreadSpec>>,
    fabric: &Fabric,
    now: SimTime,
) -> Result<BootOutcome, SimError> {
    match tile.status {
        TileStatus::Rebooting => {
            tile.set_status(TileStatus::Booting)?;
        }
        TileStatus::Booting => {}
        other => {
            return Err(SimError::IllegalTransition {
                tile: tile.tile_id.clone(),
                from: other,
                to: TileStatus::Booting,
            })
        }
    }
    tile.vmem.clear();
    tile.pending_update = None;
    if let Err(cells) = fabric.self_test(&tile.partition) {
        return Ok(BootOutcome::Failed {
            damaged_cells: cells,
        });
    }
    tile.corrupting = false;
    tile.threads = all_threads
        .iter()
        .map(|(id, spec)| (id.clone(), init_thread(spec.clone(), &tile.tile_id)))
        .collect();
    if assigned.is_empty() {
        tile.set_status(TileStatus::IdleSpare)?;
        return Ok(BootOutcome::IdleSpare);
    }
    tile.hosted_groups = assigned.iter().map(|g| g.tg_id.clone()).collect();
    tile.set_status(TileStatus::Active)?;
    Ok(BootOutcome::Active {
        first_checkpoint: now,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedulerAction {
    RunThreads,
    PerformUpdate { donor: TileId },
    SleepUntilCheckpoint,
}

/// Decide what the tile does between checkpoints.
pub fn scheduler_step(tile: &Tile) -> SchedulerAction {
    debug_assert!(matches!(
        tile.status,
        TileStatus::Active | TileStatus::Updating | TileStatus::Suspect
    ));
    if let Some(donor) = &tile.pending_update {
        return SchedulerAction::PerformUpdate {
            donor: donor.clone(),
        };
    }
    if tile.hosted_groups.is_empty() {
        SchedulerAction::SleepUntilCheckpoint
    } else {
        SchedulerAction::RunThreads
    }
}

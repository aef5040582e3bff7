//! The checkpoint cycle run by every member of a tile group: checksum
//! computation, sibling comparison, state propagation on disagreement, the
//! grace-period update and optional output voting.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::error::SimError;
use crate::ids::{GroupId, ThreadGroupId, ThreadId, TileId};
use crate::tile::{write_validation, ThreadGroup, Tile, TileGroup, TileStatus, WriteOutcome};
use crate::workload::{checksum_callback, sync_callback, OutputRecord, ThreadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    Timer,
    Supervisor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Agree,
    Disagree,
    DeadlineMiss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub tile_id: TileId,
    pub checkpoint_index: u64,
    /// In comparison order; siblings after the first disagreement are absent.
    pub verdicts: Vec<(TileId, Verdict)>,
    pub duration: SimTime,
}

impl CheckpointReport {
    pub fn disagrees(&self) -> bool {
        self.verdicts.iter().any(|(_, v)| *v != Verdict::Agree)
    }

    pub fn verdict_for(&self, sibling: &TileId) -> Option<Verdict> {
        self.verdicts
            .iter()
            .find(|(t, _)| t == sibling)
            .map(|(_, v)| *v)
    }
}

/// Per-thread checkpoint costs plus the context switch around each callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckpointCost {
    pub checksum_cost: SimTime,
    pub sync_cost: SimTime,
    pub update_cost: SimTime,
    pub context_switch_cost: SimTime,
}

impl CheckpointCost {
    pub fn for_thread(spec: &ThreadSpec, context_switch_cost: SimTime) -> Self {
        Self {
            checksum_cost: spec.checksum_cost(),
            sync_cost: spec.sync_cost(),
            update_cost: spec.update_cost(),
            context_switch_cost,
        }
    }
}

/// One checkpoint of one tile group, shared by its members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointContext {
    pub group: GroupId,
    pub index: u64,
    pub trigger: Trigger,
    pub started_at: SimTime,
    /// Start after the interrupt-deferral delay.
    pub effective_start: SimTime,
    pub deadline: SimTime,
    /// Threads whose checksums are compared at this index.
    pub scheduled: Vec<ThreadId>,
    /// Every thread of the group's thread groups.
    pub threads: Vec<ThreadId>,
    pub participants: Vec<TileId>,
    pub ready_at: BTreeMap<TileId, SimTime>,
    pub durations: BTreeMap<TileId, SimTime>,
}

/// Threads of a tile group in thread-group order.
pub fn group_threads(
    group: &TileGroup,
    thread_groups: &BTreeMap<ThreadGroupId, ThreadGroup>,
) -> Vec<(ThreadId, u64)> {
    group
        .thread_groups
        .iter()
        .filter_map(|tg| thread_groups.get(tg))
        .flat_map(|tg| tg.threads.iter().map(|t| (t.clone(), tg.divisor(t))))
        .collect()
}

/// Pause execution at the checkpoint boundary and open checkpoint
/// `group.checkpoint_index`, advancing the index. Members whose interface is
/// blocked never start; siblings see them as deadline misses.
pub fn start_checkpoint(
    group: &mut TileGroup,
    thread_groups: &BTreeMap<ThreadGroupId, ThreadGroup>,
    specs: &BTreeMap<ThreadId, Arc<ThreadSpec>>,
    tiles: &BTreeMap<TileId, Tile>,
    trigger: Trigger,
    now: SimTime,
) -> CheckpointContext {
    let index = group.checkpoint_index;
    group.checkpoint_index += 1;
    let threads = group_threads(group, thread_groups);
    let delay = threads
        .iter()
        .filter_map(|(t, _)| specs.get(t))
        .map(|s| s.checkpoint_delay)
        .max()
        .unwrap_or(SimTime::ZERO)
        .min(group.comparison_deadline);
    let effective_start = now + delay;
    let participants = group
        .members
        .iter()
        .filter(|m| {
            tiles.get(*m).is_some_and(|t| {
                matches!(t.status(), TileStatus::Active | TileStatus::Suspect) && !t.sefi_blocked
            })
        })
        .cloned()
        .collect();
    CheckpointContext {
        group: group.group_id.clone(),
        index,
        trigger,
        started_at: now,
        effective_start,
        deadline: effective_start + group.comparison_deadline,
        scheduled: threads
            .iter()
            .filter(|(_, d)| index % d == 0)
            .map(|(t, _)| t.clone())
            .collect(),
        threads: threads.into_iter().map(|(t, _)| t).collect(),
        participants,
        ready_at: BTreeMap::new(),
        durations: BTreeMap::new(),
    }
}

/// Run the checksum callback of every scheduled thread and store the results
/// in the tile's own validation memory. Returns the time spent.
pub fn compute_checksums(
    ctx: &mut CheckpointContext,
    tile: &mut Tile,
    specs: &BTreeMap<ThreadId, Arc<ThreadSpec>>,
    context_switch_cost: SimTime,
) -> Result<SimTime, SimError> {
    let me = tile.tile_id.clone();
    tile.vmem
        .begin_checkpoint(&me, &ctx.group, ctx.index, ctx.scheduled.len())?;
    let mut duration = SimTime::ZERO;
    for thread in &ctx.scheduled {
        let Some(state) = tile.threads.get(thread) else {
            continue;
        };
        let checksum = checksum_callback(state);
        let spec = state.spec_arc().clone();
        // state that lives in validation memory travels with the checksum
        let snapshot = spec.state_in_vmem.then(|| sync_callback(state));
        let written = write_validation(tile, &me, &ctx.group, thread, ctx.index, checksum, snapshot)?;
        if written == WriteOutcome::Lost {
            break;
        }
        let cost = CheckpointCost::for_thread(specs.get(thread).unwrap_or(&spec), context_switch_cost);
        duration += cost.checksum_cost + cost.context_switch_cost;
    }
    ctx.ready_at
        .insert(me.clone(), ctx.effective_start + duration);
    *ctx.durations.entry(me).or_default() += duration;
    Ok(duration)
}

/// Compare own checksums with each sibling in comparison order, stopping at
/// the first mismatch or missed deadline. `reads_blocked` models a shared
/// interconnect interrupt that hides every sibling's validation memory.
pub fn compare_with_siblings(
    ctx: &CheckpointContext,
    tile: &Tile,
    group: &TileGroup,
    tiles: &BTreeMap<TileId, Tile>,
    reads_blocked: bool,
) -> CheckpointReport {
    let mut verdicts = Vec::new();
    for sibling_id in group.comparison_order(&tile.tile_id) {
        let sibling = tiles.get(&sibling_id);
        let readable = !reads_blocked
            && sibling.is_some_and(|s| !s.sefi_blocked && s.vmem.is_ready(&ctx.group, ctx.index));
        let verdict = if !readable {
            Verdict::DeadlineMiss
        } else {
            let sib = sibling.expect("readable sibling exists");
            let all_match = ctx.scheduled.iter().all(|thread| {
                let mine = tile.vmem.checksum(&ctx.group, ctx.index, thread);
                let theirs = sib.vmem.checksum(&ctx.group, ctx.index, thread);
                mine.is_some() && mine == theirs
            });
            if all_match {
                Verdict::Agree
            } else {
                Verdict::Disagree
            }
        };
        verdicts.push((sibling_id, verdict));
        if verdict != Verdict::Agree {
            break;
        }
    }
    CheckpointReport {
        tile_id: tile.tile_id.clone(),
        checkpoint_index: ctx.index,
        verdicts,
        duration: ctx.durations.get(&tile.tile_id).copied().unwrap_or_default(),
    }
}

/// After a disagreement, expose every thread of the group through the
/// synchronization callback. Threads whose state already lives in validation
/// memory skip the callback. Returns the time spent.
pub fn propagate_state(
    ctx: &mut CheckpointContext,
    tile: &mut Tile,
    threads: &[ThreadId],
) -> Result<SimTime, SimError> {
    if tile.sefi_blocked {
        return Ok(SimTime::ZERO);
    }
    let me = tile.tile_id.clone();
    let mut duration = SimTime::ZERO;
    for thread in threads {
        let Some(state) = tile.threads.get(thread) else {
            continue;
        };
        if state.spec().state_in_vmem
            && tile.vmem.snapshot(&ctx.group, ctx.index, thread).is_some()
        {
            continue;
        }
        let cost = state.spec().sync_cost();
        let snap = sync_callback(state);
        tile.vmem.write_snapshot(&me, &ctx.group, ctx.index, snap)?;
        duration += cost;
    }
    *ctx.durations.entry(me).or_default() += duration;
    Ok(duration)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateFailed {
    pub tile: TileId,
    pub donor: TileId,
    pub missing: Vec<ThreadId>,
}

/// Copy every thread's state from the donor's snapshots (taken at checkpoint
/// `index` of `group`) and activate the updating tile. Returns the time spent
/// in update callbacks.
pub fn apply_update(
    group: &GroupId,
    index: u64,
    threads: &[ThreadId],
    updating: &mut Tile,
    donor: &Tile,
    reads_blocked: bool,
) -> Result<SimTime, UpdateFailed> {
    let unreadable = reads_blocked || donor.sefi_blocked || updating.sefi_blocked;
    let missing: Vec<ThreadId> = threads
        .iter()
        .filter(|t| unreadable || donor.vmem.snapshot(group, index, t).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(UpdateFailed {
            tile: updating.tile_id.clone(),
            donor: donor.tile_id.clone(),
            missing,
        });
    }
    let mut duration = SimTime::ZERO;
    for thread in threads {
        let snap = donor
            .vmem
            .snapshot(group, index, thread)
            .expect("checked above");
        if let Some(state) = updating.threads.get_mut(thread) {
            duration += state.spec().update_cost();
            state
                .apply_snapshot(snap)
                .expect("snapshot keyed by thread id");
        }
    }
    if matches!(updating.status(), TileStatus::Updating | TileStatus::Suspect) {
        updating
            .set_status(TileStatus::Active)
            .expect("updating and suspect tiles may activate");
    }
    updating.pending_update = None;
    Ok(duration)
}

/// Members resume immediately after a clean checkpoint and after the grace
/// period when any disagreement was seen.
pub fn resume_time(checkpoint_end: SimTime, disagreement: bool, grace: SimTime) -> SimTime {
    if disagreement {
        checkpoint_end + grace
    } else {
        checkpoint_end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// Record released to the outside; `None` when suppressed.
    pub emitted: Vec<OutputRecord>,
    /// Records that differ from the majority (or from each other without one).
    pub divergent: usize,
    /// Divergent records that actually left the system.
    pub propagated: usize,
    pub no_majority: bool,
}

/// Vote over one thread's replica outputs for one checkpoint window.
/// A majority needs at least `ceil(n/2)` matching records and must be the
/// unique most frequent record.
pub fn vote_outputs(records: &[OutputRecord], voting_enabled: bool) -> VoteOutcome {
    let n = records.len();
    let mut counts: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for r in records {
        *counts.entry((r.cycle_counter, r.digest)).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let leaders: BTreeSet<_> = counts.iter().filter(|(_, c)| **c == best).map(|(k, _)| *k).collect();
    let majority = (leaders.len() == 1 && best >= n.div_ceil(2) && n > 0)
        .then(|| *leaders.iter().next().expect("one leader"));
    let divergent = n - best;
    if !voting_enabled {
        return VoteOutcome {
            emitted: records.to_vec(),
            divergent,
            propagated: divergent,
            no_majority: majority.is_none() && n > 1,
        };
    }
    match majority {
        Some(key) => VoteOutcome {
            emitted: records
                .iter()
                .find(|r| (r.cycle_counter, r.digest) == key)
                .cloned()
                .into_iter()
                .collect(),
            divergent,
            propagated: 0,
            no_majority: false,
        },
        None => VoteOutcome {
            emitted: Vec::new(),
            divergent,
            propagated: 0,
            no_majority: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{default_variants, Fabric};
    use crate::ids::PartitionId;
    use crate::tile::{boot_tile, GroupPhase};
    use crate::workload::ThreadCosts;

    struct Fixture {
        tiles: BTreeMap<TileId, Tile>,
        group: TileGroup,
        tgs: BTreeMap<ThreadGroupId, ThreadGroup>,
        specs: BTreeMap<ThreadId, Arc<ThreadSpec>>,
    }

    fn tid(s: &str) -> TileId {
        TileId::from(s)
    }

    fn fixture(n: usize, divisor_b: u64) -> Fixture {
        let mut specs = BTreeMap::new();
        for t in ["Ta", "Tb"] {
            let mut s = ThreadSpec::new(t, 4);
            s.costs = ThreadCosts {
                checksum: 10,
                sync_base: 15,
                sync_per_word: 0,
                update_base: 20,
                update_per_word: 0,
            };
            specs.insert(ThreadId::from(t), Arc::new(s));
        }
        let tg = ThreadGroup {
            tg_id: ThreadGroupId::from("TG1"),
            threads: vec![ThreadId::from("Ta"), ThreadId::from("Tb")],
            check_divisor: [(ThreadId::from("Tb"), divisor_b)].into_iter().collect(),
        };
        let pids: Vec<_> = (0..=n).map(|i| PartitionId(format!("P{i}"))).collect();
        let fabric = Fabric::uniform(&pids, 64, default_variants(64));
        let mut tiles = BTreeMap::new();
        for i in 0..=n {
            let id = TileId(format!("C{i}"));
            let mut t = Tile::new(id.clone(), pids[i].clone(), 1000);
            let assigned: Vec<&ThreadGroup> = if i < n { vec![&tg] } else { vec![] };
            boot_tile(&mut t, &assigned, &specs, &fabric, SimTime(0)).unwrap();
            tiles.insert(id, t);
        }
        let group = TileGroup {
            group_id: GroupId::from("G0"),
            members: (0..n).map(|i| TileId(format!("C{i}"))).collect(),
            thread_groups: [tg.tg_id.clone()].into_iter().collect(),
            base_period: SimTime(1000),
            comparison_deadline: SimTime(100),
            grace_period: SimTime(80),
            checkpoint_index: 0,
            nominal_size: n,
            phase: GroupPhase::Running,
            last_resume: SimTime(0),
            detect_only: false,
        };
        let tgs = [(tg.tg_id.clone(), tg)].into_iter().collect();
        Fixture {
            tiles,
            group,
            tgs,
            specs,
        }
    }

    impl Fixture {
        fn checkpoint(&mut self, now: SimTime) -> (CheckpointContext, Vec<CheckpointReport>) {
            let mut ctx = start_checkpoint(
                &mut self.group,
                &self.tgs,
                &self.specs,
                &self.tiles,
                Trigger::Timer,
                now,
            );
            for m in ctx.participants.clone() {
                let t = self.tiles.get_mut(&m).unwrap();
                compute_checksums(&mut ctx, t, &self.specs, SimTime(2)).unwrap();
            }
            let reports = ctx
                .participants
                .iter()
                .map(|m| compare_with_siblings(&ctx, &self.tiles[m], &self.group, &self.tiles, false))
                .collect();
            (ctx, reports)
        }

        fn corrupt(&mut self, tile: &str, thread: &str) {
            self.tiles
                .get_mut(&tid(tile))
                .unwrap()
                .threads
                .get_mut(&ThreadId::from(thread))
                .unwrap()
                .corrupt_word(0, 0x40);
        }
    }

    #[test]
    fn indices_are_sequential() {
        let mut f = fixture(3, 1);
        let (c0, _) = f.checkpoint(SimTime(0));
        let (c1, _) = f.checkpoint(SimTime(1000));
        assert_eq!((c0.index, c1.index), (0, 1));
        let c2 = start_checkpoint(&mut f.group, &f.tgs, &f.specs, &f.tiles, Trigger::Supervisor, SimTime(1500));
        assert_eq!(c2.index, 2);
        assert_eq!(c2.trigger, Trigger::Supervisor);
    }

    #[test]
    fn viable_state_delay_shifts_checksums() {
        let mut f = fixture(3, 1);
        let mut s = (*f.specs[&ThreadId::from("Ta")]).clone();
        s.checkpoint_delay = SimTime(7);
        f.specs.insert(ThreadId::from("Ta"), Arc::new(s));
        let (ctx, _) = f.checkpoint(SimTime(1000));
        assert_eq!(ctx.effective_start, SimTime(1007));
        assert_eq!(ctx.ready_at[&tid("C0")], SimTime(1007 + 24));
    }

    #[test]
    fn all_equal_all_agree() {
        let mut f = fixture(3, 1);
        let (_, reports) = f.checkpoint(SimTime(0));
        for r in &reports {
            assert!(!r.disagrees());
            assert_eq!(r.verdicts.len(), 2);
        }
    }

    #[test]
    fn divisor_schedule() {
        let mut f = fixture(3, 3);
        let tb = ThreadId::from("Tb");
        let mut present = Vec::new();
        for k in 0..7u64 {
            let (ctx, _) = f.checkpoint(SimTime(k * 1000));
            if f.tiles[&tid("C0")].vmem.checksum(&ctx.group, ctx.index, &tb).is_some() {
                present.push(ctx.index);
            }
        }
        assert_eq!(present, vec![0, 3, 6]);
    }

    #[test]
    fn duration_is_sum_of_checksum_and_switch() {
        let mut f = fixture(3, 1);
        let (ctx, reports) = f.checkpoint(SimTime(0));
        // 2 threads * (10 + 2)
        assert_eq!(ctx.durations[&tid("C1")], SimTime(24));
        assert_eq!(reports[1].duration, SimTime(24));
    }

    #[test]
    fn corrupt_member_reports_match_worked_example() {
        let mut f = fixture(3, 1);
        f.checkpoint(SimTime(0));
        f.checkpoint(SimTime(1000));
        f.corrupt("C2", "Ta");
        let (_, reports) = f.checkpoint(SimTime(2000));
        let by: BTreeMap<_, _> = reports.iter().map(|r| (r.tile_id.clone(), r)).collect();
        assert_eq!(
            by[&tid("C0")].verdicts,
            vec![(tid("C1"), Verdict::Agree), (tid("C2"), Verdict::Disagree)]
        );
        assert_eq!(by[&tid("C1")].verdicts, vec![(tid("C2"), Verdict::Disagree)]);
        assert_eq!(by[&tid("C2")].verdicts, vec![(tid("C0"), Verdict::Disagree)]);
    }

    #[test]
    fn blocked_sibling_is_deadline_miss() {
        let mut f = fixture(3, 1);
        f.tiles.get_mut(&tid("C2")).unwrap().sefi_blocked = true;
        let (ctx, reports) = f.checkpoint(SimTime(0));
        assert_eq!(ctx.participants.len(), 2);
        assert_eq!(
            reports[0].verdicts,
            vec![(tid("C1"), Verdict::Agree), (tid("C2"), Verdict::DeadlineMiss)]
        );
    }

    #[test]
    fn snapshots_only_after_mismatch() {
        let mut f = fixture(3, 1);
        let (mut ctx, reports) = f.checkpoint(SimTime(0));
        assert!(reports.iter().all(|r| !r.disagrees()));
        let ta = ThreadId::from("Ta");
        assert!(f.tiles[&tid("C0")].vmem.snapshot(&ctx.group, 0, &ta).is_none());

        let threads = ctx.threads.clone();
        let d = propagate_state(&mut ctx, f.tiles.get_mut(&tid("C1")).unwrap(), &threads).unwrap();
        assert_eq!(d, SimTime(30));
        for t in &threads {
            assert!(f.tiles[&tid("C1")].vmem.snapshot(&ctx.group, 0, t).is_some());
        }
    }

    #[test]
    fn state_in_vmem_skips_sync() {
        let mut f = fixture(3, 1);
        let mut s = (*f.specs[&ThreadId::from("Ta")]).clone();
        s.state_in_vmem = true;
        let s = Arc::new(s);
        f.specs.insert(ThreadId::from("Ta"), s.clone());
        for t in f.tiles.values_mut() {
            let st = crate::workload::init_thread(s.clone(), &t.tile_id);
            t.threads.insert(ThreadId::from("Ta"), st);
        }
        let (mut ctx, _) = f.checkpoint(SimTime(0));
        let threads = ctx.threads.clone();
        let d = propagate_state(&mut ctx, f.tiles.get_mut(&tid("C0")).unwrap(), &threads).unwrap();
        // only Tb pays the sync callback
        assert_eq!(d, SimTime(15));
    }

    #[test]
    fn spare_updates_from_named_donor() {
        let mut f = fixture(3, 1);
        f.checkpoint(SimTime(0));
        f.corrupt("C2", "Ta");
        let (mut ctx, _) = f.checkpoint(SimTime(1000));
        let threads = ctx.threads.clone();
        for m in ["C0", "C1"] {
            propagate_state(&mut ctx, f.tiles.get_mut(&tid(m)).unwrap(), &threads).unwrap();
        }
        let spare_id = tid("C3");
        {
            let spare = f.tiles.get_mut(&spare_id).unwrap();
            assert_eq!(spare.status(), TileStatus::IdleSpare);
            spare.set_status(TileStatus::Updating).unwrap();
        }
        let donor = f.tiles[&tid("C1")].clone();
        let mut spare = f.tiles.remove(&spare_id).unwrap();
        let d = apply_update(&ctx.group, ctx.index, &threads, &mut spare, &donor, false).unwrap();
        assert_eq!(d, SimTime(40));
        assert_eq!(spare.status(), TileStatus::Active);
        for t in &threads {
            assert_eq!(
                checksum_callback(&spare.threads[t]),
                checksum_callback(&donor.threads[t])
            );
        }
    }

    #[test]
    fn update_fails_without_readable_donor() {
        let mut f = fixture(3, 1);
        let (ctx, _) = f.checkpoint(SimTime(0));
        let threads = ctx.threads.clone();
        let donor = f.tiles[&tid("C0")].clone();
        let mut spare = f.tiles[&tid("C3")].clone();
        spare.set_status(TileStatus::Updating).unwrap();
        let err = apply_update(&ctx.group, ctx.index, &threads, &mut spare, &donor, false).unwrap_err();
        assert_eq!(err.missing.len(), 2);
        assert_eq!(spare.status(), TileStatus::Updating);
    }

    #[test]
    fn grace_only_after_disagreement() {
        assert_eq!(resume_time(SimTime(100), false, SimTime(80)), SimTime(100));
        assert_eq!(resume_time(SimTime(100), true, SimTime(80)), SimTime(180));
    }

    fn rec(d: u64) -> OutputRecord {
        OutputRecord {
            thread_id: ThreadId::from("Ta"),
            cycle_counter: 9,
            digest: d,
        }
    }

    #[test]
    fn voting() {
        let v = vote_outputs(&[rec(1), rec(1), rec(1)], true);
        assert_eq!((v.emitted.clone(), v.divergent), (vec![rec(1)], 0));

        let v = vote_outputs(&[rec(1), rec(2), rec(1)], true);
        assert_eq!(v.emitted, vec![rec(1)]);
        assert_eq!((v.divergent, v.propagated), (1, 0));

        let v = vote_outputs(&[rec(1), rec(2), rec(3)], true);
        assert!(v.no_majority && v.emitted.is_empty());

        let v = vote_outputs(&[rec(1), rec(2), rec(1)], false);
        assert_eq!(v.emitted.len(), 3);
        assert_eq!(v.propagated, 1);
    }
}

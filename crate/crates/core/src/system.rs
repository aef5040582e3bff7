//! The orchestrator: one event queue drives tiles, tile groups, the
//! supervisor, the fabric and the fault injector, and every decision lands in
//! the trace.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::criticality::{check_priority_dominance, reallocate, CapacityModel, CriticalityPolicy, GroupDemand, Plan};
use crate::engine::{EventHandle, EventQueue, RandomStream, SimTime};
use crate::error::SimError;
use crate::fabric::{Fabric, RepairJob, RepairStep};
use crate::faults::{self, ApplyOutcome, Effect, FaultEvent, FaultKind, FaultTarget, Injection, TargetSpace};
use crate::ids::{GroupId, PartitionId, ThreadGroupId, ThreadId, TileId};
use crate::lockstep::{
    apply_update, compare_with_siblings, compute_checksums, group_threads, propagate_state, resume_time,
    start_checkpoint, vote_outputs, CheckpointContext, CheckpointReport, Trigger, UpdateFailed,
};
use crate::metrics::{compute_metrics, MetricsSummary};
use crate::scenario::Scenario;
use crate::supervisor::{command_label, AgreementSignal, Command, FaultAction, GroupVerdict, SupervisorState};
use crate::tile::{
    boot_tile, derive_timing, scheduler_step, BootOutcome, GroupPhase, SchedulerAction, ThreadGroup, Tile,
    TileGroup, TileStatus,
};
use crate::trace::Trace;
use crate::workload::{emit_output, init_thread, sync_callback, OutputRecord, ThreadSpec};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop before the scenario horizon.
    pub until: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub metrics: MetricsSummary,
    /// Every Stage 3 plan computed during the run, in order.
    pub plans: Vec<Plan>,
}

pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunResult, SimError> {
    let mut sys = System::new(scenario, opts);
    sys.start()?;
    sys.event_loop()?;
    sys.finish();
    let metrics = compute_metrics(sys.trace.records());
    Ok(RunResult {
        trace: sys.trace,
        metrics,
        plans: sys.plans,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Checkpoint { group: GroupId, trigger: Trigger },
    Compare { group: GroupId, index: u64 },
    Resume { group: GroupId, index: u64 },
    Fault(usize),
    SefiEnd(TileId),
    SharedSefiEnd,
    RebootDone(TileId),
    RepairAttempt { tile: TileId, partition: PartitionId, variant: usize },
    FullReconfigDone,
    Watchdog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Severity {
    Corrected,
    Replaced,
    Repaired,
    Degraded,
}

impl Severity {
    fn label(self) -> &'static str {
        match self {
            Severity::Corrected => "corrected",
            Severity::Replaced => "replaced",
            Severity::Repaired => "repaired",
            Severity::Degraded => "degraded",
        }
    }
}

/// Bookkeeping for one injected fault until its outcome is known.
#[derive(Debug, Clone)]
struct Track {
    kind: FaultKind,
    tile: Option<TileId>,
    thread: Option<ThreadId>,
    injected_at: SimTime,
    detected_at: Option<SimTime>,
    severity: Option<Severity>,
    /// Resolved once this tile completes a state update.
    resolve_with: Option<TileId>,
    /// Damage that survives state updates and reboots.
    persistent: bool,
}

impl Track {
    fn changes_state(&self) -> bool {
        matches!(self.kind, FaultKind::TransientState | FaultKind::PermanentCell)
    }
}

/// A checkpoint between its start and the members' resumption.
#[derive(Debug, Clone)]
struct Open {
    ctx: CheckpointContext,
    /// Oracle copy of the scheduled threads' states at checksum time.
    truth: BTreeMap<TileId, Vec<(u64, Vec<u64>)>>,
    updates: Vec<(TileId, TileId)>,
}

fn default_deadline(specs: &[&ThreadSpec], ctx_switch: SimTime, base: SimTime) -> SimTime {
    let work: u64 = specs
        .iter()
        .map(|s| s.checksum_cost().ticks() + ctx_switch.ticks())
        .sum();
    SimTime((2 * work).max(base.ticks() / 10).max(work + 1))
}

fn default_grace(specs: &[&ThreadSpec]) -> SimTime {
    let update: u64 = specs.iter().map(|s| s.update_cost().ticks()).sum();
    SimTime((2 * update).max(1))
}

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        Ok(other) => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
        Err(_) => Map::new(),
    }
}

struct System {
    name: String,
    seed: u64,
    now: SimTime,
    end: SimTime,
    queue: EventQueue<Ev>,
    tiles: BTreeMap<TileId, Tile>,
    groups: BTreeMap<GroupId, TileGroup>,
    tgs: BTreeMap<ThreadGroupId, ThreadGroup>,
    tg_of: BTreeMap<ThreadId, ThreadGroupId>,
    specs: BTreeMap<ThreadId, Arc<ThreadSpec>>,
    fabric: Fabric,
    sup: SupervisorState,
    policy: CriticalityPolicy,
    trace: Trace,
    faults: Vec<FaultEvent>,
    tracks: BTreeMap<u64, Track>,
    timers: BTreeMap<GroupId, EventHandle>,
    open: BTreeMap<GroupId, Open>,
    repairs: BTreeMap<TileId, RepairJob>,
    reboot_assign: BTreeMap<TileId, BTreeSet<ThreadGroupId>>,
    shared_blocked_until: Option<SimTime>,
    shared_damage: bool,
    full_reconfig: bool,
    lost: bool,
    pending_plan: Option<Plan>,
    plans: Vec<Plan>,
    down: BTreeSet<ThreadId>,
    next_group: u64,
    ctx_switch: SimTime,
    reboot_duration: SimTime,
    reconfig_duration: SimTime,
    full_reconfig_duration: SimTime,
    watchdog_interval: SimTime,
    voting: Option<bool>,
    ecc: bool,
}

impl System {
    fn new(s: &Scenario, opts: &RunOptions) -> Self {
        let specs = s.specs();
        let ctx_switch = s.timing.context_switch_cost;
        let mut tgs = BTreeMap::new();
        let mut tg_of = BTreeMap::new();
        for c in &s.thread_groups {
            for t in &c.threads {
                tg_of.insert(t.clone(), c.id.clone());
            }
            tgs.insert(
                c.id.clone(),
                ThreadGroup {
                    tg_id: c.id.clone(),
                    threads: c.threads.clone(),
                    check_divisor: BTreeMap::new(),
                },
            );
        }

        let mut groups = BTreeMap::new();
        for g in &s.groups {
            let threads: Vec<ThreadId> = g
                .thread_groups
                .iter()
                .filter_map(|tg| tgs.get(tg))
                .flat_map(|tg: &ThreadGroup| tg.threads.iter().cloned())
                .collect();
            let thread_specs: Vec<&ThreadSpec> = threads.iter().filter_map(|t| specs.get(t).map(|s| s.as_ref())).collect();
            let (base, divisors) = derive_timing(&thread_specs);
            for tg in &g.thread_groups {
                if let Some(tg) = tgs.get_mut(tg) {
                    tg.check_divisor = tg
                        .threads
                        .iter()
                        .filter_map(|t| divisors.get(t).map(|d| (t.clone(), *d)))
                        .collect();
                }
            }
            let mut members = g.members.clone();
            members.sort();
            let n = members.len();
            groups.insert(
                g.id.clone(),
                TileGroup {
                    group_id: g.id.clone(),
                    members,
                    thread_groups: g.thread_groups.iter().cloned().collect(),
                    base_period: base,
                    comparison_deadline: g
                        .comparison_deadline
                        .unwrap_or_else(|| default_deadline(&thread_specs, ctx_switch, base)),
                    grace_period: g.grace_period.unwrap_or_else(|| default_grace(&thread_specs)),
                    checkpoint_index: 0,
                    nominal_size: n,
                    phase: GroupPhase::Halted,
                    last_resume: SimTime::ZERO,
                    detect_only: n == 2,
                },
            );
        }

        let partition_ids: Vec<PartitionId> = s
            .tiles
            .iter()
            .map(|t| t.partition_id())
            .chain(s.fabric.free_partitions.iter().cloned())
            .collect();
        let mut fabric = Fabric::uniform(&partition_ids, s.fabric.cell_count, s.fabric.tile_variants());
        fabric.shared_region.cell_count = s.fabric.shared_cell_count;
        fabric.shared_variants = s.fabric.region_variants();
        let mut tiles = BTreeMap::new();
        for t in &s.tiles {
            let p = t.partition_id();
            if let Some(part) = fabric.partitions.get_mut(&p) {
                part.hosted_tile = Some(t.id.clone());
            }
            tiles.insert(t.id.clone(), Tile::new(t.id.clone(), p, t.capacity));
        }

        let targets = TargetSpace {
            replicas: groups
                .values()
                .flat_map(|g| {
                    g.members.iter().flat_map(|m| {
                        g.thread_groups
                            .iter()
                            .filter_map(|tg| tgs.get(tg))
                            .flat_map(|tg: &ThreadGroup| tg.threads.iter())
                            .filter_map(|t| specs.get(t).map(|s| (m.clone(), t.clone(), s.state_words)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect(),
            cells: partition_ids
                .iter()
                .map(|p| (p.clone(), s.fabric.cell_count))
                .chain([(PartitionId::from("shared"), s.fabric.shared_cell_count)])
                .collect(),
            tiles: s.tiles.iter().map(|t| t.id.clone()).collect(),
        };
        let mut stream = RandomStream::new(s.seed, "faults");
        let fault_list = faults::generate(&s.faults, s.horizon, &mut stream, &targets);

        let max_base = groups.values().map(|g| g.base_period).max().unwrap_or(SimTime(1000));
        let watchdog = s
            .supervisor
            .watchdog_period
            .unwrap_or(SimTime(4 * max_base.ticks()));
        let end = opts.until.map_or(s.horizon, |u| u.min(s.horizon));

        Self {
            name: s.name.clone(),
            seed: s.seed,
            now: SimTime::ZERO,
            end,
            queue: EventQueue::new(),
            tiles,
            groups,
            tgs,
            tg_of,
            specs,
            fabric,
            sup: SupervisorState::new(s.supervisor, watchdog),
            policy: s.criticality.clone(),
            trace: Trace::new(),
            faults: fault_list,
            tracks: BTreeMap::new(),
            timers: BTreeMap::new(),
            open: BTreeMap::new(),
            repairs: BTreeMap::new(),
            reboot_assign: BTreeMap::new(),
            shared_blocked_until: None,
            shared_damage: false,
            full_reconfig: false,
            lost: false,
            pending_plan: None,
            plans: Vec::new(),
            down: BTreeSet::new(),
            next_group: 0,
            ctx_switch,
            reboot_duration: s.timing.reboot_duration,
            reconfig_duration: s.fabric.reconfig_duration,
            full_reconfig_duration: s.fabric.full_reconfig_duration,
            watchdog_interval: SimTime((watchdog.ticks() / 4).max(1)),
            voting: s.features.output_voting,
            ecc: s.features.ecc,
        }
    }

    fn log(&mut self, actor: impl Into<String>, kind: &str, payload: Value) {
        self.trace.push(self.now, actor, kind, payload);
    }

    fn schedule(&mut self, at: SimTime, ev: Ev) -> Result<EventHandle, SimError> {
        self.queue.schedule(at, ev)
    }

    // ---- lifecycle ----

    fn start(&mut self) -> Result<(), SimError> {
        let groups: BTreeMap<String, Vec<String>> = self
            .groups
            .values()
            .map(|g| (g.group_id.to_string(), g.members.iter().map(|m| m.to_string()).collect()))
            .collect();
        let payload = json!({
            "scenario": self.name,
            "seed": self.seed,
            "end": self.end,
            "tiles": self.tiles.keys().collect::<Vec<_>>(),
            "threads": self.specs.keys().collect::<Vec<_>>(),
            "groups": groups,
        });
        self.log("sim", "run-start", payload);
        for i in 0..self.faults.len() {
            let at = self.faults[i].at;
            self.schedule(at, Ev::Fault(i))?;
        }
        let ids: Vec<TileId> = self.tiles.keys().cloned().collect();
        for id in ids {
            let assigned = self.assignment_of(&id);
            self.boot(&id, assigned)?;
        }
        let gids: Vec<GroupId> = self.groups.keys().cloned().collect();
        for gid in gids {
            self.try_start_group(&gid, Trigger::Timer)?;
        }
        self.schedule(self.watchdog_interval, Ev::Watchdog)?;
        Ok(())
    }

    fn event_loop(&mut self) -> Result<(), SimError> {
        while let Some(t) = self.queue.peek_time() {
            if t >= self.end || self.lost {
                break;
            }
            let ev = self.queue.advance().expect("peeked event");
            self.now = ev.fire_at;
            self.dispatch(ev.payload)?;
            self.try_apply_plan()?;
        }
        Ok(())
    }

    fn dispatch(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Checkpoint { group, trigger } => self.on_checkpoint(&group, trigger),
            Ev::Compare { group, index } => self.on_compare(&group, index),
            Ev::Resume { group, index } => self.on_resume(&group, index),
            Ev::Fault(i) => self.on_fault(i),
            Ev::SefiEnd(tile) => {
                self.on_sefi_end(&tile);
                Ok(())
            }
            Ev::SharedSefiEnd => {
                self.on_shared_sefi_end();
                Ok(())
            }
            Ev::RebootDone(tile) => self.on_reboot_done(&tile),
            Ev::RepairAttempt { tile, partition, variant } => self.on_repair_attempt(&tile, &partition, variant),
            Ev::FullReconfigDone => self.on_full_reconfig_done(),
            Ev::Watchdog => self.on_watchdog(),
        }
    }

    fn finish(&mut self) {
        if !self.lost {
            self.now = self.end.max(self.now);
        }
        let ids: Vec<u64> = self.tracks.keys().copied().collect();
        for id in ids {
            let tr = self.tracks[&id].clone();
            let outcome = if tr.detected_at.is_some() {
                "pending"
            } else if tr.kind == FaultKind::TransientState && self.state_reconverged(&tr) {
                "absorbed"
            } else if matches!(tr.kind, FaultKind::SefiTile) && !self.tile_blocked(tr.tile.as_ref()) {
                "absorbed"
            } else {
                "pending"
            };
            self.close(id, outcome, Some("end-of-run"));
        }
        let payload = json!({ "lost": self.lost });
        self.log("sim", "run-end", payload);
    }

    fn tile_blocked(&self, tile: Option<&TileId>) -> bool {
        tile.and_then(|t| self.tiles.get(t)).is_some_and(|t| t.sefi_blocked)
    }

    /// The corrupted replica matches a sibling again (or no longer runs).
    fn state_reconverged(&self, tr: &Track) -> bool {
        let (Some(tile), Some(thread)) = (&tr.tile, &tr.thread) else {
            return true;
        };
        let Some(t) = self.tiles.get(tile) else {
            return true;
        };
        if !t.is_running() {
            return true;
        }
        let Some(mine) = t.threads.get(thread) else {
            return true;
        };
        let Some(g) = self
            .tg_of
            .get(thread)
            .and_then(|tg| self.groups.values().find(|g| g.thread_groups.contains(tg)))
        else {
            return true;
        };
        g.members
            .iter()
            .filter(|m| *m != tile)
            .filter_map(|m| self.tiles.get(m))
            .filter(|o| matches!(o.status(), TileStatus::Active))
            .filter_map(|o| o.threads.get(thread))
            .any(|o| o.cycle_counter == mine.cycle_counter && o.state == mine.state)
    }

    // ---- fault accounting ----

    fn close(&mut self, id: u64, outcome: &str, reason: Option<&str>) {
        let Some(tr) = self.tracks.remove(&id) else {
            return;
        };
        let recovered = matches!(outcome, "corrected" | "replaced" | "repaired").then_some(self.now);
        self.emit_outcome(id, tr.kind, tr.tile.as_ref(), tr.injected_at, tr.detected_at, recovered, outcome, reason);
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_outcome(
        &mut self,
        id: u64,
        kind: FaultKind,
        tile: Option<&TileId>,
        injected_at: SimTime,
        detected_at: Option<SimTime>,
        recovered_at: Option<SimTime>,
        outcome: &str,
        reason: Option<&str>,
    ) {
        let mut p = Map::new();
        p.insert("fault_id".into(), json!(id));
        p.insert("kind".into(), json!(kind));
        p.insert("outcome".into(), json!(outcome));
        p.insert("injected_at".into(), json!(injected_at));
        if let Some(t) = tile {
            p.insert("tile".into(), json!(t));
        }
        if let Some(d) = detected_at {
            p.insert("detected_at".into(), json!(d));
        }
        if let Some(r) = recovered_at {
            p.insert("recovered_at".into(), json!(r));
        }
        if let Some(r) = reason {
            p.insert("reason".into(), json!(r));
        }
        self.log("injector", "fault-outcome", Value::Object(p));
    }

    fn track_ids(&self, pred: impl Fn(&Track) -> bool) -> Vec<u64> {
        self.tracks.iter().filter(|(_, t)| pred(t)).map(|(id, _)| *id).collect()
    }

    /// Faults on `tile` that the current protocol step has just exposed.
    fn mark_detected(&mut self, tile: &TileId, threads: Option<&[ThreadId]>) {
        let now = self.now;
        for tr in self.tracks.values_mut() {
            if tr.tile.as_ref() != Some(tile) || tr.detected_at.is_some() || tr.injected_at > now {
                continue;
            }
            if let (Some(th), Some(list)) = (&tr.thread, threads) {
                if !list.contains(th) {
                    continue;
                }
            }
            tr.detected_at = Some(now);
        }
    }

    fn set_resolution(&mut self, tile: &TileId, with: &TileId, severity: Severity) {
        for tr in self.tracks.values_mut() {
            if tr.tile.as_ref() == Some(tile) && tr.detected_at.is_some() {
                tr.resolve_with = Some(with.clone());
                tr.severity = Some(tr.severity.map_or(severity, |s| s.max(severity)));
            }
        }
    }

    fn close_detected(&mut self, tile: &TileId, outcome: Severity, include_persistent: bool) {
        for id in self.track_ids(|t| {
            t.tile.as_ref() == Some(tile) && t.detected_at.is_some() && (include_persistent || !t.persistent)
        }) {
            let sev = self.tracks[&id].severity.map_or(outcome, |s| s.max(outcome));
            self.close(id, sev.label(), None);
        }
    }

    /// A tile finished a state update: close what it resolves and absorb
    /// faults the update overwrote before anyone saw them.
    fn on_updated(&mut self, tile: &TileId, threads: &[ThreadId]) {
        for id in self.track_ids(|t| t.resolve_with.as_ref() == Some(tile) && t.detected_at.is_some() && !t.persistent) {
            let sev = self.tracks[&id].severity.unwrap_or(Severity::Corrected);
            self.close(id, sev.label(), None);
        }
        for id in self.track_ids(|t| {
            t.tile.as_ref() == Some(tile)
                && t.detected_at.is_none()
                && t.kind == FaultKind::TransientState
                && t.thread.as_ref().is_some_and(|th| threads.contains(th))
        }) {
            self.close(id, "absorbed", Some("overwritten"));
        }
        self.sup.pending.remove(tile);
    }

    /// A tile booted cleanly: everything it carried is gone.
    fn close_on_reinit(&mut self, tile: &TileId) {
        for id in self.track_ids(|t| t.tile.as_ref() == Some(tile)) {
            let tr = &self.tracks[&id];
            if tr.detected_at.is_some() {
                let sev = tr.severity.unwrap_or(if tr.persistent {
                    Severity::Repaired
                } else {
                    Severity::Corrected
                });
                self.close(id, sev.label(), None);
            } else {
                self.close(id, "absorbed", Some("reinitialized"));
            }
        }
    }

    fn on_fault(&mut self, i: usize) -> Result<(), SimError> {
        let ev = self.faults[i].clone();
        let id = i as u64;
        let mut p = to_object(&ev);
        p.insert("fault_id".into(), json!(id));
        self.log("injector", "fault-injected", Value::Object(p));
        let outcome = {
            let mut inj = Injection {
                tiles: &mut self.tiles,
                fabric: &mut self.fabric,
                thread_groups: &self.tg_of,
                ecc: self.ecc,
                shared_blocked_until: &mut self.shared_blocked_until,
            };
            faults::apply(&ev, &mut inj, self.now)
        };
        let thread = match &ev.target {
            Some(FaultTarget::Word { thread, .. }) | Some(FaultTarget::Checksum { thread, .. }) => Some(thread.clone()),
            _ => None,
        };
        let effect = match outcome {
            ApplyOutcome::Absorbed { reason } => {
                let tile = ev.target.as_ref().and_then(|t| t.tile()).cloned();
                self.emit_outcome(id, ev.kind, tile.as_ref(), self.now, None, None, "absorbed", Some(&reason));
                return Ok(());
            }
            ApplyOutcome::Applied(e) => e,
        };
        let mut p = to_object(&effect);
        p.insert("fault_id".into(), json!(id));
        self.log("injector", "fault-effect", Value::Object(p));
        let now = self.now;
        let track = |tile: Option<TileId>, thread: Option<ThreadId>, persistent: bool| Track {
            kind: ev.kind,
            tile,
            thread,
            injected_at: now,
            detected_at: None,
            severity: None,
            resolve_with: None,
            persistent,
        };
        let tr = match effect {
            Effect::StateCorrupted { tile } | Effect::ChecksumLatched { tile } => track(Some(tile), thread, false),
            Effect::CorruptingExecution { tile } => track(Some(tile), None, true),
            Effect::SharedDamage => {
                self.shared_damage = true;
                track(None, None, true)
            }
            Effect::LatentDamage => {
                self.emit_outcome(id, ev.kind, None, self.now, None, None, "absorbed", Some("latent"));
                return Ok(());
            }
            Effect::SefiTile { tile, until } => {
                self.schedule(until, Ev::SefiEnd(tile.clone()))?;
                track(Some(tile), None, false)
            }
            Effect::SefiShared { until } => {
                self.schedule(until, Ev::SharedSefiEnd)?;
                track(None, None, false)
            }
        };
        self.tracks.insert(id, tr);
        Ok(())
    }

    fn on_sefi_end(&mut self, tile: &TileId) {
        let now = self.now;
        let Some(t) = self.tiles.get_mut(tile) else {
            return;
        };
        if !t.sefi_blocked || t.sefi_until > now {
            return;
        }
        t.sefi_blocked = false;
        self.log(tile.to_string(), "sefi-end", json!({ "tile": tile }));
        for id in self.track_ids(|t| t.kind == FaultKind::SefiTile && t.tile.as_ref() == Some(tile) && t.detected_at.is_none()) {
            self.close(id, "absorbed", Some("expired"));
        }
    }

    fn on_shared_sefi_end(&mut self) {
        if self.shared_blocked_until.is_some_and(|u| u <= self.now) {
            self.shared_blocked_until = None;
            self.log("fabric", "sefi-end", json!({ "tile": "shared" }));
            for id in self.track_ids(|t| t.kind == FaultKind::SefiShared && t.detected_at.is_none()) {
                self.close(id, "absorbed", Some("expired"));
            }
        }
    }

    fn reads_blocked(&self) -> bool {
        self.shared_damage || self.shared_blocked_until.is_some_and(|u| self.now < u)
    }

    // ---- tile and group helpers ----

    fn assignment_of(&self, tile: &TileId) -> BTreeSet<ThreadGroupId> {
        self.groups
            .values()
            .filter(|g| g.is_member(tile))
            .flat_map(|g| g.thread_groups.iter().cloned())
            .collect()
    }

    fn group_thread_ids(&self, gid: &GroupId) -> Vec<ThreadId> {
        self.groups
            .get(gid)
            .map(|g| group_threads(g, &self.tgs).into_iter().map(|(t, _)| t).collect())
            .unwrap_or_default()
    }

    fn thread_down(&mut self, thread: &ThreadId) {
        if self.down.insert(thread.clone()) {
            self.log(thread.to_string(), "thread-down", json!({ "thread": thread }));
        }
    }

    fn thread_up(&mut self, thread: &ThreadId) {
        if self.down.remove(thread) {
            self.log(thread.to_string(), "thread-up", json!({ "thread": thread }));
        }
    }

    fn command(&mut self, tile: &TileId, cmd: Command) -> Result<(), SimError> {
        let t = self.tiles.get(tile).ok_or_else(|| SimError::Unknown {
            kind: "tile",
            id: tile.to_string(),
        })?;
        let mut p = to_object(&cmd);
        p.insert("tile".into(), json!(tile));
        match self.sup.command_tile(t, &cmd) {
            Ok(()) => self.log("supervisor", "command", Value::Object(p)),
            Err(e) => {
                p.insert("error".into(), json!(e.to_string()));
                self.log("supervisor", "command-rejected", Value::Object(p));
            }
        }
        let _ = command_label(&cmd);
        Ok(())
    }

    fn set_status(&mut self, tile: &TileId, to: TileStatus) -> Result<(), SimError> {
        let t = self.tiles.get_mut(tile).ok_or_else(|| SimError::Unknown {
            kind: "tile",
            id: tile.to_string(),
        })?;
        let from = t.set_status(to)?;
        if from != to {
            self.log(
                tile.to_string(),
                "tile-status",
                json!({ "tile": tile, "from": from.label(), "to": to.label() }),
            );
        }
        Ok(())
    }

    fn schedule_checkpoint(&mut self, gid: &GroupId, at: SimTime, trigger: Trigger) -> Result<(), SimError> {
        if let Some(h) = self.timers.remove(gid) {
            self.queue.cancel(h);
        }
        let h = self.schedule(
            at,
            Ev::Checkpoint {
                group: gid.clone(),
                trigger,
            },
        )?;
        self.timers.insert(gid.clone(), h);
        Ok(())
    }

    fn halt_group(&mut self, gid: &GroupId) {
        self.run_slices(gid);
        if let Some(h) = self.timers.remove(gid) {
            self.queue.cancel(h);
        }
        self.open.remove(gid);
        let Some(g) = self.groups.get_mut(gid) else {
            return;
        };
        g.phase = GroupPhase::Halted;
        for t in self.group_thread_ids(gid) {
            self.thread_down(&t);
        }
    }

    /// Restart a halted group once every member is back up.
    fn try_start_group(&mut self, gid: &GroupId, trigger: Trigger) -> Result<(), SimError> {
        if self.full_reconfig {
            return Ok(());
        }
        let Some(g) = self.groups.get(gid) else {
            return Ok(());
        };
        if g.phase != GroupPhase::Halted || g.members.is_empty() {
            return Ok(());
        }
        let ready = g
            .members
            .iter()
            .all(|m| self.tiles.get(m).is_some_and(|t| t.status() == TileStatus::Active));
        if !ready {
            return Ok(());
        }
        let g = self.groups.get_mut(gid).expect("checked");
        g.phase = GroupPhase::Running;
        g.last_resume = self.now;
        for t in self.group_thread_ids(gid) {
            self.thread_up(&t);
        }
        self.schedule_checkpoint(gid, self.now, trigger)
    }

    fn remove_from_groups(&mut self, tile: &TileId) {
        let gids: Vec<GroupId> = self
            .groups
            .iter()
            .filter(|(_, g)| g.is_member(tile))
            .map(|(id, _)| id.clone())
            .collect();
        for gid in gids {
            self.run_slices(&gid);
            if let Some(g) = self.groups.get_mut(&gid) {
                g.remove_member(tile);
            }
            self.log(gid.to_string(), "member-removed", json!({ "group": gid, "tile": tile }));
            if self.groups[&gid].members.is_empty() {
                self.halt_group(&gid);
            }
        }
    }

    /// Put an idle spare into `gid`; it synchronizes from `donor` (or from a
    /// healthy member at the group's next checkpoint).
    fn join(&mut self, spare: &TileId, gid: &GroupId, donor: Option<TileId>) -> Result<(), SimError> {
        let Some(g) = self.groups.get(gid) else {
            return Ok(());
        };
        let tgs = g.thread_groups.clone();
        let fallback = g.members.first().cloned();
        self.command(spare, Command::ActivateWithMapping { groups: tgs.clone() })?;
        self.set_status(spare, TileStatus::Updating)?;
        let t = self.tiles.get_mut(spare).expect("spare exists");
        t.hosted_groups.extend(tgs);
        t.pending_update = donor.or(fallback).or_else(|| Some(spare.clone()));
        self.groups.get_mut(gid).expect("group exists").add_member(spare.clone());
        self.log(spare.to_string(), "spare-activated", json!({ "tile": spare, "group": gid }));
        Ok(())
    }

    fn refill_all(&mut self) -> Result<(), SimError> {
        let gids: Vec<GroupId> = self.groups.keys().cloned().collect();
        for gid in gids {
            self.refill_group(&gid)?;
        }
        Ok(())
    }

    fn refill_group(&mut self, gid: &GroupId) -> Result<(), SimError> {
        loop {
            let Some(g) = self.groups.get(gid) else {
                return Ok(());
            };
            if g.phase != GroupPhase::Running || g.members.is_empty() || g.members.len() >= g.nominal_size {
                return Ok(());
            }
            let Some(spare) = self.sup.take_spare() else {
                return Ok(());
            };
            self.join(&spare, gid, None)?;
        }
    }

    fn boot(&mut self, id: &TileId, assigned: BTreeSet<ThreadGroupId>) -> Result<(), SimError> {
        let now = self.now;
        let outcome = {
            let tgrefs: Vec<&ThreadGroup> = assigned.iter().filter_map(|tg| self.tgs.get(tg)).collect();
            let Some(tile) = self.tiles.get_mut(id) else {
                return Ok(());
            };
            tile.sefi_blocked = false;
            boot_tile(tile, &tgrefs, &self.specs, &self.fabric, now)?
        };
        match outcome {
            BootOutcome::Active { .. } => {
                self.log(id.to_string(), "tile-boot", json!({ "tile": id, "outcome": "active", "thread_groups": assigned }));
                self.close_on_reinit(id);
            }
            BootOutcome::IdleSpare => {
                self.log(id.to_string(), "tile-boot", json!({ "tile": id, "outcome": "idle-spare" }));
                self.close_on_reinit(id);
                self.sup.return_spare(id.clone());
                self.refill_all()?;
            }
            BootOutcome::Failed { damaged_cells } => {
                self.log(
                    id.to_string(),
                    "tile-boot",
                    json!({ "tile": id, "outcome": "failed", "damaged_cells": damaged_cells }),
                );
                self.mark_detected(id, None);
                self.set_resolution(id, id, Severity::Repaired);
                self.set_status(id, TileStatus::Defunct)?;
                self.remove_from_groups(id);
                self.start_repair(id)?;
            }
        }
        Ok(())
    }

    fn on_reboot_done(&mut self, tile: &TileId) -> Result<(), SimError> {
        if self.tiles.get(tile).is_none_or(|t| t.status() != TileStatus::Rebooting)
            || self.repairs.contains_key(tile)
            || self.full_reconfig
        {
            return Ok(());
        }
        let assigned = self.reboot_assign.remove(tile).unwrap_or_default();
        self.boot(tile, assigned)?;
        let gids: Vec<GroupId> = self
            .groups
            .iter()
            .filter(|(_, g)| g.is_member(tile))
            .map(|(id, _)| id.clone())
            .collect();
        for gid in gids {
            self.try_start_group(&gid, Trigger::Supervisor)?;
        }
        Ok(())
    }

    // ---- execution and the checkpoint cycle ----

    /// Execute every running member of `gid` up to now.
    fn run_slices(&mut self, gid: &GroupId) {
        let Some(g) = self.groups.get(gid) else {
            return;
        };
        if g.phase != GroupPhase::Running {
            return;
        }
        let elapsed = self.now.saturating_sub(g.last_resume);
        let voting = self.voting.unwrap_or(g.members.len() >= 3);
        let members = g.members.clone();
        let threads: Vec<ThreadId> = group_threads(g, &self.tgs).into_iter().map(|(t, _)| t).collect();
        let mut outputs: BTreeMap<ThreadId, Vec<OutputRecord>> = BTreeMap::new();
        if elapsed > SimTime::ZERO {
            for m in &members {
                let Some(t) = self.tiles.get_mut(m) else {
                    continue;
                };
                if !matches!(t.status(), TileStatus::Active | TileStatus::Suspect)
                    || !matches!(scheduler_step(t), SchedulerAction::RunThreads)
                {
                    continue;
                }
                let corrupting = t.corrupting;
                for th in &threads {
                    let Some(st) = t.threads.get_mut(th) else {
                        continue;
                    };
                    st.advance(elapsed);
                    if corrupting {
                        // damaged logic flips a bit every slice
                        let c = st.cycle_counter;
                        st.corrupt_word(c as usize, 1u64 << (c % 64));
                    }
                    if let Some(o) = emit_output(st) {
                        outputs.entry(th.clone()).or_default().push(o);
                    }
                }
            }
        }
        self.groups.get_mut(gid).expect("group exists").last_resume = self.now;
        for (th, recs) in outputs {
            if recs.len() < 2 {
                continue;
            }
            let v = vote_outputs(&recs, voting);
            if v.divergent > 0 || v.no_majority {
                self.log(
                    gid.to_string(),
                    "output-divergence",
                    json!({
                        "group": gid,
                        "thread": th,
                        "divergent": v.divergent,
                        "propagated": v.propagated,
                        "no_majority": v.no_majority,
                        "voting": voting,
                    }),
                );
            }
        }
    }

    fn comparing(&self, g: &TileGroup) -> Vec<TileId> {
        g.members
            .iter()
            .filter(|m| {
                self.tiles
                    .get(*m)
                    .is_some_and(|t| matches!(t.status(), TileStatus::Active | TileStatus::Suspect))
            })
            .cloned()
            .collect()
    }

    fn on_checkpoint(&mut self, gid: &GroupId, trigger: Trigger) -> Result<(), SimError> {
        self.timers.remove(gid);
        if self.groups.get(gid).is_none_or(|g| g.phase != GroupPhase::Running) {
            return Ok(());
        }
        self.run_slices(gid);
        let now = self.now;
        let g = self.groups.get_mut(gid).expect("checked");
        let mut ctx = start_checkpoint(g, &self.tgs, &self.specs, &self.tiles, trigger, now);
        g.phase = GroupPhase::Checkpointing;
        let cmp = self.comparing(&self.groups[gid]);
        for p in ctx.participants.clone() {
            let tile = self.tiles.get_mut(&p).expect("participant exists");
            compute_checksums(&mut ctx, tile, &self.specs, self.ctx_switch)?;
        }
        let truth = ctx
            .participants
            .iter()
            .map(|p| {
                let t = &self.tiles[p];
                let states = ctx
                    .scheduled
                    .iter()
                    .map(|th| t.threads.get(th).map_or((0, Vec::new()), |s| (s.cycle_counter, s.state.clone())))
                    .collect();
                (p.clone(), states)
            })
            .collect();
        let compare_at = if !ctx.participants.is_empty() && ctx.participants.len() == cmp.len() {
            ctx.ready_at.values().copied().max().unwrap_or(ctx.deadline).min(ctx.deadline)
        } else {
            ctx.deadline
        };
        self.log(
            gid.to_string(),
            "checkpoint-start",
            json!({
                "group": gid,
                "index": ctx.index,
                "trigger": trigger,
                "scheduled": ctx.scheduled,
                "participants": ctx.participants,
            }),
        );
        let index = ctx.index;
        self.open.insert(
            gid.clone(),
            Open {
                ctx,
                truth,
                updates: Vec::new(),
            },
        );
        self.schedule(
            compare_at,
            Ev::Compare {
                group: gid.clone(),
                index,
            },
        )?;
        Ok(())
    }

    fn on_compare(&mut self, gid: &GroupId, index: u64) -> Result<(), SimError> {
        let Some(mut open) = self.open.remove(gid) else {
            return Ok(());
        };
        if open.ctx.index != index {
            self.open.insert(gid.clone(), open);
            return Ok(());
        }
        let reads_blocked = self.reads_blocked();
        let mut cmp_group = self.groups[gid].clone();
        cmp_group.members = self.comparing(&cmp_group);
        let participants: Vec<TileId> = open
            .ctx
            .participants
            .iter()
            .filter(|p| cmp_group.is_member(p))
            .cloned()
            .collect();
        let reports: Vec<CheckpointReport> = participants
            .iter()
            .map(|p| compare_with_siblings(&open.ctx, &self.tiles[p], &cmp_group, &self.tiles, reads_blocked))
            .collect();
        let disagreement = reports.iter().any(|r| r.disagrees());
        let verdict = if reports.is_empty() {
            None
        } else {
            let signals: Vec<AgreementSignal> = reports.iter().map(AgreementSignal::from).collect();
            Some(self.sup.ingest_signals(&cmp_group.members, &signals, self.now))
        };

        let mut p = verdict.as_ref().map(to_object).unwrap_or_else(|| {
            let mut m = Map::new();
            m.insert("verdict".into(), json!("no-reports"));
            m
        });
        p.insert("group".into(), json!(gid));
        p.insert("index".into(), json!(index));
        let bits: BTreeMap<String, Value> = reports
            .iter()
            .map(|r| (r.tile_id.to_string(), json!(r.verdicts)))
            .collect();
        p.insert("reports".into(), json!(bits));
        self.log("supervisor", "verdict", Value::Object(p));

        let healthy: Vec<TileId> = match &verdict {
            Some(GroupVerdict::AllAgree) => participants.clone(),
            Some(GroupVerdict::Faulty { majority, .. }) => majority.iter().cloned().collect(),
            _ => Vec::new(),
        };
        self.check_truth(gid, &open, &healthy);

        let threads = open.ctx.threads.clone();
        let mut updates: Vec<(TileId, TileId)> = Vec::new();
        match verdict {
            None | Some(GroupVerdict::AllAgree) => {}
            Some(GroupVerdict::Faulty { faulty, majority }) => {
                let donor = majority.first().cloned().expect("majority is non-empty");
                for f in &faulty {
                    self.handle_faulty(gid, f, &donor, &threads, &mut updates)?;
                }
            }
            Some(GroupVerdict::Unresolvable) => {
                self.group_reboot(gid, "unresolvable")?;
                return Ok(());
            }
            Some(GroupVerdict::UnresolvablePair) => {
                if cmp_group.detect_only {
                    for m in &cmp_group.members {
                        self.mark_detected(m, Some(&threads));
                        self.close_detected(m, Severity::Degraded, false);
                    }
                    self.log(gid.to_string(), "detect-only-mismatch", json!({ "group": gid, "index": index }));
                } else {
                    self.group_reboot(gid, "unresolvable-pair")?;
                    return Ok(());
                }
            }
            Some(GroupVerdict::SharedSuspect) => {
                for id in self.track_ids(|t| t.tile.is_none() && t.detected_at.is_none()) {
                    self.tracks.get_mut(&id).expect("listed").detected_at = Some(self.now);
                }
                self.start_full_reconfig("shared-suspect")?;
                return Ok(());
            }
        }

        // members waiting for their first synchronization
        if let Some(donor) = healthy.first() {
            let members = self.groups[gid].members.clone();
            for m in members {
                let waiting = self.tiles.get(&m).is_some_and(|t| {
                    t.pending_update.is_some() && matches!(t.status(), TileStatus::Updating | TileStatus::Suspect)
                });
                if waiting && !updates.iter().any(|(u, _)| u == &m) && &m != donor {
                    updates.push((m, donor.clone()));
                }
            }
        }

        let need_sync = disagreement || !updates.is_empty();
        let mut sync = SimTime::ZERO;
        if need_sync {
            let mut writers: BTreeSet<TileId> = reports
                .iter()
                .filter(|r| r.disagrees())
                .map(|r| r.tile_id.clone())
                .collect();
            writers.extend(updates.iter().map(|(_, d)| d.clone()));
            for w in writers {
                if let Some(t) = self.tiles.get_mut(&w) {
                    if matches!(t.status(), TileStatus::Active | TileStatus::Suspect) {
                        sync = sync.max(propagate_state(&mut open.ctx, t, &threads)?);
                    }
                }
            }
        }
        let g = self.groups.get_mut(gid).expect("group exists");
        let resume = resume_time(self.now + sync, need_sync, g.grace_period);
        g.phase = if need_sync {
            GroupPhase::Grace
        } else {
            GroupPhase::Checkpointing
        };
        open.updates = updates;
        self.open.insert(gid.clone(), open);
        self.schedule(
            resume,
            Ev::Resume {
                group: gid.clone(),
                index,
            },
        )?;
        Ok(())
    }

    /// Oracle: members the protocol judged consistent must hold identical
    /// scheduled state; otherwise a fault slipped through.
    fn check_truth(&mut self, gid: &GroupId, open: &Open, healthy: &[TileId]) {
        if healthy.len() < 2 {
            return;
        }
        let first = open.truth.get(&healthy[0]);
        let diverged = healthy[1..].iter().any(|t| open.truth.get(t) != first);
        if !diverged {
            return;
        }
        let started = open.ctx.started_at;
        let ids = self.track_ids(|t| {
            t.detected_at.is_none()
                && t.changes_state()
                && t.injected_at <= started
                && t.tile.as_ref().is_some_and(|x| healthy.contains(x))
        });
        self.log(
            gid.to_string(),
            "undetected-divergence",
            json!({ "group": gid, "index": open.ctx.index, "tiles": healthy, "faults": ids }),
        );
        for id in ids {
            self.close(id, "undetected", None);
        }
    }

    fn handle_faulty(
        &mut self,
        gid: &GroupId,
        f: &TileId,
        donor: &TileId,
        threads: &[ThreadId],
        updates: &mut Vec<(TileId, TileId)>,
    ) -> Result<(), SimError> {
        self.mark_detected(f, Some(threads));
        let action = self.sup.handle_fault(f);
        let mut p = to_object(&action);
        p.insert("tile".into(), json!(f));
        p.insert("group".into(), json!(gid));
        p.insert("lifetime".into(), json!(self.sup.fault_counter.get(f).copied().unwrap_or(0)));
        p.insert("windowed".into(), json!(self.sup.windowed_count(f)));
        self.log("supervisor", "fault-handled", Value::Object(p));
        match action {
            FaultAction::StateUpdate => {
                self.command(f, Command::StateUpdate { donor: donor.clone() })?;
                if self.tiles[f].status() == TileStatus::Active {
                    self.set_status(f, TileStatus::Suspect)?;
                }
                self.tiles.get_mut(f).expect("faulty tile").pending_update = Some(donor.clone());
                self.set_resolution(f, f, Severity::Corrected);
                updates.push((f.clone(), donor.clone()));
            }
            FaultAction::Replace { spare } => {
                self.command(f, Command::Reboot)?;
                self.set_resolution(f, &spare, Severity::Replaced);
                self.remove_from_groups(f);
                self.reboot_assign.insert(f.clone(), BTreeSet::new());
                self.set_status(f, TileStatus::Rebooting)?;
                self.schedule(self.now + self.reboot_duration, Ev::RebootDone(f.clone()))?;
                self.join(&spare, gid, Some(donor.clone()))?;
                updates.push((spare, donor.clone()));
            }
            FaultAction::EscalateStage2 => {
                self.command(f, Command::Reboot)?;
                self.set_resolution(f, f, Severity::Repaired);
                self.remove_from_groups(f);
                self.set_status(f, TileStatus::Rebooting)?;
                self.start_repair(f)?;
            }
            FaultAction::Defunct { spare } => {
                self.command(f, Command::Halt)?;
                self.remove_from_groups(f);
                self.set_status(f, TileStatus::Defunct)?;
                match spare {
                    Some(s) => {
                        self.set_resolution(f, &s, Severity::Replaced);
                        self.join(&s, gid, Some(donor.clone()))?;
                        updates.push((s, donor.clone()));
                    }
                    None => {
                        self.close_detected(f, Severity::Degraded, true);
                        self.plan_stage3("defunct")?;
                    }
                }
            }
        }
        Ok(())
    }

    fn group_reboot(&mut self, gid: &GroupId, reason: &str) -> Result<(), SimError> {
        self.log(gid.to_string(), "group-reboot", json!({ "group": gid, "reason": reason }));
        let threads = self.group_thread_ids(gid);
        self.halt_group(gid);
        let members = self.groups[gid].members.clone();
        for m in members {
            let Some(t) = self.tiles.get(&m) else {
                continue;
            };
            if !matches!(t.status(), TileStatus::Active | TileStatus::Suspect | TileStatus::Updating) {
                continue;
            }
            let hosted = t.hosted_groups.clone();
            self.command(&m, Command::Reboot)?;
            self.mark_detected(&m, Some(&threads));
            self.set_resolution(&m, &m, Severity::Corrected);
            self.reboot_assign.insert(m.clone(), hosted);
            self.set_status(&m, TileStatus::Rebooting)?;
            self.schedule(self.now + self.reboot_duration, Ev::RebootDone(m.clone()))?;
        }
        Ok(())
    }

    fn on_resume(&mut self, gid: &GroupId, index: u64) -> Result<(), SimError> {
        let Some(open) = self.open.remove(gid) else {
            return Ok(());
        };
        if open.ctx.index != index {
            self.open.insert(gid.clone(), open);
            return Ok(());
        }
        let reads_blocked = self.reads_blocked();
        for (u, d) in &open.updates {
            if !self.groups[gid].is_member(u) {
                continue;
            }
            let Some(mut ut) = self.tiles.remove(u) else {
                continue;
            };
            if !matches!(ut.status(), TileStatus::Updating | TileStatus::Suspect) {
                self.tiles.insert(u.clone(), ut);
                continue;
            }
            let before = ut.status();
            let result = match self.tiles.get(d) {
                Some(dt) => apply_update(gid, index, &open.ctx.threads, &mut ut, dt, reads_blocked),
                None => Err(UpdateFailed {
                    tile: u.clone(),
                    donor: d.clone(),
                    missing: open.ctx.threads.clone(),
                }),
            };
            let after = ut.status();
            self.tiles.insert(u.clone(), ut);
            match result {
                Ok(duration) => {
                    self.log(
                        u.to_string(),
                        "state-update",
                        json!({ "tile": u, "donor": d, "group": gid, "index": index, "duration": duration }),
                    );
                    if before != after {
                        self.log(
                            u.to_string(),
                            "tile-status",
                            json!({ "tile": u, "from": before.label(), "to": after.label() }),
                        );
                    }
                    self.on_updated(u, &open.ctx.threads);
                }
                Err(e) => {
                    self.log(
                        u.to_string(),
                        "update-failed",
                        json!({ "tile": u, "donor": d, "group": gid, "index": index, "missing": e.missing }),
                    );
                }
            }
        }

        let members = self.groups[gid].members.clone();
        let elapsed = self.now - open.ctx.started_at;
        let durations: BTreeMap<String, SimTime> = open
            .ctx
            .participants
            .iter()
            .filter(|p| members.contains(p))
            .map(|p| (p.to_string(), elapsed))
            .collect();
        self.log(
            gid.to_string(),
            "checkpoint-complete",
            json!({ "group": gid, "index": index, "durations": durations }),
        );
        for m in &members {
            if let Some(t) = self.tiles.get_mut(m) {
                t.vmem.prune(gid, index);
            }
        }
        let g = self.groups.get_mut(gid).expect("group exists");
        g.phase = GroupPhase::Running;
        g.last_resume = self.now;
        let next = self.now + g.base_period;
        self.schedule_checkpoint(gid, next, Trigger::Timer)?;
        self.refill_group(gid)
    }

    // ---- Stage 2: repair and full reconfiguration ----

    fn start_repair(&mut self, tile: &TileId) -> Result<(), SimError> {
        if self.repairs.contains_key(tile) {
            return Ok(());
        }
        let partition = self.tiles[tile].partition.clone();
        self.sup.pending.insert(tile.clone(), crate::supervisor::PendingAction::Stage2);
        self.log("fabric", "repair-start", json!({ "tile": tile, "partition": partition }));
        self.repairs.insert(tile.clone(), RepairJob::new(tile.clone(), partition));
        self.repair_next(tile)
    }

    fn repair_next(&mut self, tile: &TileId) -> Result<(), SimError> {
        loop {
            let Some(job) = self.repairs.get_mut(tile) else {
                return Ok(());
            };
            match job.next_step(&self.fabric) {
                RepairStep::Reconfigure { partition, variant } => {
                    self.log(
                        "fabric",
                        "repair-attempt",
                        json!({ "tile": tile, "partition": partition, "variant": variant }),
                    );
                    self.schedule(
                        self.now + self.reconfig_duration,
                        Ev::RepairAttempt {
                            tile: tile.clone(),
                            partition,
                            variant,
                        },
                    )?;
                    return Ok(());
                }
                RepairStep::Relocate { from, to } => {
                    self.fabric.relocate(tile, &from, &to);
                    if let Some(t) = self.tiles.get_mut(tile) {
                        t.partition = to.clone();
                    }
                    self.log("fabric", "relocate", json!({ "tile": tile, "from": from, "to": to }));
                }
                RepairStep::Exhausted => {
                    let job = self.repairs.remove(tile).expect("job exists");
                    self.log(
                        "fabric",
                        "repair-exhausted",
                        json!({ "tile": tile, "attempts": job.attempts, "evidence": job.evidence }),
                    );
                    self.set_status(tile, TileStatus::Defunct)?;
                    self.mark_detected(tile, None);
                    self.close_detected(tile, Severity::Degraded, true);
                    self.sup.pending.insert(tile.clone(), crate::supervisor::PendingAction::Stage3);
                    return self.plan_stage3("repair-exhausted");
                }
            }
        }
    }

    fn on_repair_attempt(&mut self, tile: &TileId, partition: &PartitionId, variant: usize) -> Result<(), SimError> {
        if !self.repairs.contains_key(tile) {
            return Ok(());
        }
        let result = self
            .fabric
            .partial_reconfigure(partition, variant)
            .and_then(|_| self.fabric.validate_partition(partition));
        match result {
            Ok(()) => {
                self.repairs.remove(tile);
                self.log(
                    "fabric",
                    "repair-validated",
                    json!({ "tile": tile, "partition": partition, "variant": variant }),
                );
                self.sup.reset_counter(tile);
                self.sup.pending.remove(tile);
                if self.tiles[tile].status() == TileStatus::Defunct {
                    self.set_status(tile, TileStatus::Rebooting)?;
                }
                self.boot(tile, BTreeSet::new())
            }
            Err(fault) => {
                self.log(
                    "fabric",
                    "repair-attempt-failed",
                    json!({ "tile": tile, "partition": partition, "variant": variant, "overlapping": fault.overlapping }),
                );
                if let Some(job) = self.repairs.get_mut(tile) {
                    job.record_failure(fault);
                }
                self.repair_next(tile)
            }
        }
    }

    /// Halt every tile that is still up and reboot it after the whole device
    /// has been reprogrammed.
    fn halt_everything(&mut self, schedule_reboot: bool) -> Result<(), SimError> {
        let gids: Vec<GroupId> = self.groups.keys().cloned().collect();
        for gid in &gids {
            self.halt_group(gid);
        }
        let ids: Vec<TileId> = self.tiles.keys().cloned().collect();
        for id in ids {
            let t = &self.tiles[&id];
            if self.repairs.contains_key(&id)
                || !matches!(
                    t.status(),
                    TileStatus::Active | TileStatus::Suspect | TileStatus::Updating | TileStatus::IdleSpare
                )
            {
                continue;
            }
            let hosted = t.hosted_groups.clone();
            self.command(&id, Command::Reboot)?;
            self.sup.spare_pool.remove(&id);
            for tid in self.track_ids(|t| t.tile.as_ref() == Some(&id) && t.detected_at.is_none()) {
                let tr = self.tracks.get_mut(&tid).expect("listed");
                if tr.kind == FaultKind::SefiTile {
                    tr.detected_at = Some(self.now);
                }
            }
            self.reboot_assign.insert(id.clone(), hosted);
            self.set_status(&id, TileStatus::Rebooting)?;
            if schedule_reboot {
                self.schedule(self.now + self.reboot_duration, Ev::RebootDone(id.clone()))?;
            }
        }
        Ok(())
    }

    fn start_full_reconfig(&mut self, reason: &str) -> Result<(), SimError> {
        if self.full_reconfig {
            return Ok(());
        }
        self.log("fabric", "full-reconfiguration-start", json!({ "reason": reason }));
        self.halt_everything(false)?;
        self.full_reconfig = true;
        self.sup.watchdog_held = true;
        self.schedule(self.now + self.full_reconfig_duration, Ev::FullReconfigDone)?;
        Ok(())
    }

    fn on_full_reconfig_done(&mut self) -> Result<(), SimError> {
        self.full_reconfig = false;
        self.sup.watchdog_held = false;
        self.sup.kick(self.now);
        match self.fabric.full_reconfigure() {
            Err(fault) => {
                self.log(
                    "fabric",
                    "loss-of-mission",
                    json!({ "reason": "shared-region-unrecoverable", "overlapping": fault.overlapping }),
                );
                for id in self.track_ids(|t| t.tile.is_none()) {
                    self.close(id, "degraded", None);
                }
                self.lost = true;
                Ok(())
            }
            Ok(variant) => {
                self.log("fabric", "full-reconfiguration-done", json!({ "shared_variant": variant }));
                self.shared_damage = false;
                self.shared_blocked_until = None;
                for id in self.track_ids(|t| t.tile.is_none()) {
                    let outcome = if self.tracks[&id].detected_at.is_some() {
                        "repaired"
                    } else {
                        "absorbed"
                    };
                    self.close(id, outcome, None);
                }
                let ids: Vec<TileId> = self
                    .tiles
                    .iter()
                    .filter(|(id, t)| t.status() == TileStatus::Rebooting && !self.repairs.contains_key(*id))
                    .map(|(id, _)| id.clone())
                    .collect();
                for id in ids {
                    let assigned = self.reboot_assign.remove(&id).unwrap_or_default();
                    self.boot(&id, assigned)?;
                }
                let gids: Vec<GroupId> = self.groups.keys().cloned().collect();
                for gid in gids {
                    self.try_start_group(&gid, Trigger::Supervisor)?;
                }
                self.refill_all()
            }
        }
    }

    fn on_watchdog(&mut self) -> Result<(), SimError> {
        if self.sup.watchdog_tick(self.now) {
            self.log("supervisor", "watchdog-reset", json!({ "last_kick": self.sup.watchdog_last_kick }));
            self.halt_everything(true)?;
            self.shared_blocked_until = None;
            for id in self.track_ids(|t| t.kind == FaultKind::SefiShared) {
                self.tracks.get_mut(&id).expect("listed").detected_at.get_or_insert(self.now);
                self.close(id, "corrected", None);
            }
            self.sup.kick(self.now);
        }
        let next = self.now + self.watchdog_interval;
        if next < self.end {
            self.schedule(next, Ev::Watchdog)?;
        }
        Ok(())
    }

    // ---- Stage 3 ----

    fn plan_stage3(&mut self, reason: &str) -> Result<(), SimError> {
        let healthy: BTreeMap<TileId, u64> = self
            .tiles
            .iter()
            .filter(|(_, t)| {
                matches!(
                    t.status(),
                    TileStatus::Active | TileStatus::Suspect | TileStatus::Updating | TileStatus::IdleSpare
                )
            })
            .map(|(id, t)| (id.clone(), t.capacity))
            .collect();
        let mut demands = Vec::new();
        for g in self.groups.values() {
            for tg in &g.thread_groups {
                let Some(tgd) = self.tgs.get(tg) else {
                    continue;
                };
                let specs: Vec<&ThreadSpec> = tgd.threads.iter().filter_map(|t| self.specs.get(t).map(|s| s.as_ref())).collect();
                demands.push(GroupDemand {
                    tg_id: tg.clone(),
                    criticality: specs.iter().map(|s| s.criticality).max().unwrap_or(0),
                    nominal_replicas: g.nominal_size,
                    current_hosts: g.members.iter().filter(|m| healthy.contains_key(*m)).cloned().collect(),
                    load: specs.iter().map(|s| s.load).sum(),
                    checkpoint: specs
                        .iter()
                        .map(|s| s.checksum_cost().ticks() + self.ctx_switch.ticks())
                        .sum(),
                });
            }
        }
        let model = CapacityModel {
            capacity: healthy,
            groups: demands,
        };
        let plan = reallocate(&model, &self.policy);
        let dominance = match check_priority_dominance(&plan, &model, &self.policy) {
            Ok(()) => json!({ "holds": true }),
            Err(v) => json!({
                "holds": false,
                "starved": v.iter().map(|x| x.starved.clone()).collect::<Vec<_>>(),
            }),
        };
        self.log(
            "supervisor",
            "stage3-plan",
            json!({
                "reason": reason,
                "capacity": model.capacity,
                "placements": plan.placements,
                "loss_of_capability": plan.loss_of_capability,
                "priority_dominance": dominance,
            }),
        );
        for tg in plan.loss_of_capability.clone() {
            self.log("supervisor", "loss-of-capability", json!({ "thread_group": tg }));
        }
        self.plans.push(plan.clone());
        self.pending_plan = Some(plan);
        Ok(())
    }

    fn plan_ready(&self) -> bool {
        !self.full_reconfig
            && self.open.is_empty()
            && self.groups.values().all(|g| match g.phase {
                GroupPhase::Running => true,
                GroupPhase::Halted => g.members.iter().all(|m| {
                    self.tiles
                        .get(m)
                        .is_none_or(|t| !matches!(t.status(), TileStatus::Rebooting | TileStatus::Booting))
                }),
                _ => false,
            })
    }

    fn try_apply_plan(&mut self) -> Result<(), SimError> {
        if self.pending_plan.is_none() || !self.plan_ready() {
            return Ok(());
        }
        let plan = self.pending_plan.take().expect("checked");
        self.apply_plan(&plan)
    }

    /// Regroup thread groups by identical host sets, migrate state to new
    /// hosts and restart every group's checkpoint timer.
    fn apply_plan(&mut self, plan: &Plan) -> Result<(), SimError> {
        let gids: Vec<GroupId> = self.groups.keys().cloned().collect();
        for gid in &gids {
            self.run_slices(gid);
            if let Some(h) = self.timers.remove(gid) {
                self.queue.cancel(h);
            }
        }
        let old = std::mem::take(&mut self.groups);
        let mut old_hosts: BTreeMap<ThreadGroupId, BTreeSet<TileId>> = BTreeMap::new();
        for g in old.values() {
            for tg in &g.thread_groups {
                let hosts = g
                    .members
                    .iter()
                    .filter(|m| {
                        self.tiles
                            .get(*m)
                            .is_some_and(|t| matches!(t.status(), TileStatus::Active | TileStatus::Suspect))
                    })
                    .cloned()
                    .collect();
                old_hosts.insert(tg.clone(), hosts);
            }
        }

        let mut grouping: BTreeMap<BTreeSet<TileId>, BTreeSet<ThreadGroupId>> = BTreeMap::new();
        for (tg, pl) in &plan.placements {
            if pl.hosts.is_empty() {
                self.log("supervisor", "thread-group-deactivated", json!({ "thread_group": tg }));
                for t in self.tgs.get(tg).map(|x| x.threads.clone()).unwrap_or_default() {
                    self.thread_down(&t);
                }
            } else {
                grouping.entry(pl.hosts.clone()).or_default().insert(tg.clone());
            }
        }

        let mut new_groups = BTreeMap::new();
        for (hosts, tgset) in grouping {
            let members: Vec<TileId> = hosts.iter().cloned().collect();
            let reuse = old
                .values()
                .find(|g| g.thread_groups == tgset && g.members == members);
            let factor = tgset
                .iter()
                .filter_map(|tg| plan.placements.get(tg))
                .map(|p| p.period_factor)
                .max()
                .unwrap_or(1)
                .max(1);
            let threads: Vec<ThreadId> = tgset
                .iter()
                .filter_map(|tg| self.tgs.get(tg))
                .flat_map(|tg| tg.threads.iter().cloned())
                .collect();
            let (base, divisors, deadline, grace) = {
                let specs: Vec<&ThreadSpec> = threads.iter().filter_map(|t| self.specs.get(t).map(|s| s.as_ref())).collect();
                let (base, divisors) = derive_timing(&specs);
                let base = SimTime(base.ticks() * factor);
                let prior: Vec<&TileGroup> = old
                    .values()
                    .filter(|g| !g.thread_groups.is_disjoint(&tgset))
                    .collect();
                let deadline = prior
                    .iter()
                    .map(|g| g.comparison_deadline)
                    .max()
                    .unwrap_or_else(|| default_deadline(&specs, self.ctx_switch, base));
                let grace = prior
                    .iter()
                    .map(|g| g.grace_period)
                    .max()
                    .unwrap_or_default()
                    .max(default_grace(&specs));
                (base, divisors, deadline, grace)
            };
            for tg in &tgset {
                if let Some(t) = self.tgs.get_mut(tg) {
                    t.check_divisor = t
                        .threads
                        .iter()
                        .filter_map(|th| divisors.get(th).map(|d| (th.clone(), *d)))
                        .collect();
                }
            }
            let (gid, index) = match reuse {
                Some(g) => (g.group_id.clone(), g.checkpoint_index),
                None => {
                    self.next_group += 1;
                    (GroupId(format!("R{}", self.next_group)), 0)
                }
            };
            let period_changed = reuse.is_none_or(|g| g.base_period != base);
            if period_changed {
                for m in &members {
                    self.log(
                        m.to_string(),
                        "checkpoint-timer-adjusted",
                        json!({ "tile": m, "group": gid, "base_period": base }),
                    );
                }
            }
            for tg in &tgset {
                let prev = old_hosts.get(tg).cloned().unwrap_or_default();
                let tg_threads = self.tgs.get(tg).map(|x| x.threads.clone()).unwrap_or_default();
                match prev.first().cloned() {
                    Some(donor) => {
                        for h in hosts.iter().filter(|h| !prev.contains(*h)) {
                            let snaps: Vec<_> = tg_threads
                                .iter()
                                .filter_map(|th| self.tiles[&donor].threads.get(th).map(sync_callback))
                                .collect();
                            let target = self.tiles.get_mut(h).expect("host exists");
                            for snap in &snaps {
                                if let Some(st) = target.threads.get_mut(&snap.thread_id) {
                                    st.apply_snapshot(snap)?;
                                }
                            }
                            self.log(
                                h.to_string(),
                                "state-migrated",
                                json!({ "thread_group": tg, "from": donor, "to": h }),
                            );
                        }
                    }
                    None => {
                        for h in &hosts {
                            let target = self.tiles.get_mut(h).expect("host exists");
                            for th in &tg_threads {
                                if let Some(spec) = self.specs.get(th) {
                                    target.threads.insert(th.clone(), init_thread(spec.clone(), h));
                                }
                            }
                        }
                        self.log("supervisor", "restart-from-init", json!({ "thread_group": tg }));
                    }
                }
            }
            let n = members.len();
            new_groups.insert(
                gid.clone(),
                TileGroup {
                    group_id: gid,
                    members,
                    thread_groups: tgset,
                    base_period: base,
                    comparison_deadline: deadline,
                    grace_period: grace,
                    checkpoint_index: index,
                    nominal_size: n,
                    phase: GroupPhase::Running,
                    last_resume: self.now,
                    detect_only: n == 2,
                },
            );
        }

        let mut hosted: BTreeMap<TileId, BTreeSet<ThreadGroupId>> = BTreeMap::new();
        for g in new_groups.values() {
            for m in &g.members {
                hosted.entry(m.clone()).or_default().extend(g.thread_groups.iter().cloned());
            }
        }
        let ids: Vec<TileId> = self.tiles.keys().cloned().collect();
        for id in ids {
            let want = hosted.remove(&id).unwrap_or_default();
            let status = self.tiles[&id].status();
            match status {
                TileStatus::IdleSpare if !want.is_empty() => {
                    self.command(&id, Command::ActivateWithMapping { groups: want.clone() })?;
                    self.sup.spare_pool.remove(&id);
                    self.set_status(&id, TileStatus::Updating)?;
                    self.set_status(&id, TileStatus::Active)?;
                }
                TileStatus::Suspect | TileStatus::Updating if !want.is_empty() => {
                    self.set_status(&id, TileStatus::Active)?;
                }
                _ => {}
            }
            let t = self.tiles.get_mut(&id).expect("tile exists");
            if matches!(t.status(), TileStatus::Active) {
                t.hosted_groups = want;
                t.pending_update = None;
            }
        }

        self.groups = new_groups;
        let summary: BTreeMap<String, Vec<String>> = self
            .groups
            .values()
            .map(|g| (g.group_id.to_string(), g.members.iter().map(|m| m.to_string()).collect()))
            .collect();
        self.log("supervisor", "stage3-applied", json!({ "groups": summary }));
        let gids: Vec<GroupId> = self.groups.keys().cloned().collect();
        for gid in gids {
            for t in self.group_thread_ids(&gid) {
                self.thread_up(&t);
            }
            self.schedule_checkpoint(&gid, self.now, Trigger::Supervisor)?;
        }
        Ok(())
    }
}

//! Scenario files: JSON configuration of tiles, fabric, threads, groups,
//! supervision, criticality policy and faults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::criticality::CriticalityPolicy;
use crate::engine::SimTime;
use crate::fabric::{default_variants, ConfigVariant};
use crate::faults::{FaultKind, FaultProfile, FaultTarget};
use crate::ids::{GroupId, PartitionId, ThreadGroupId, ThreadId, TileId};
use crate::supervisor::SupervisorConfig;
use crate::workload::{ThreadCosts, ThreadSpec};

fn default_capacity() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub id: TileId,
    #[serde(default)]
    pub partition: Option<PartitionId>,
    #[serde(default = "default_capacity")]
    pub capacity: u64,
    #[serde(default)]
    pub spare: bool,
}

impl TileConfig {
    pub fn partition_id(&self) -> PartitionId {
        self.partition
            .clone()
            .unwrap_or_else(|| PartitionId(format!("P-{}", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricConfig {
    pub cell_count: u32,
    pub variants: Option<Vec<ConfigVariant>>,
    pub shared_cell_count: u32,
    pub shared_variants: Option<Vec<ConfigVariant>>,
    /// Partitions with no tile, available for relocation.
    pub free_partitions: Vec<PartitionId>,
    pub reconfig_duration: SimTime,
    pub full_reconfig_duration: SimTime,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            cell_count: 64,
            variants: None,
            shared_cell_count: 64,
            shared_variants: None,
            free_partitions: Vec::new(),
            reconfig_duration: SimTime(500),
            full_reconfig_duration: SimTime(5000),
        }
    }
}

impl FabricConfig {
    pub fn tile_variants(&self) -> Vec<ConfigVariant> {
        self.variants
            .clone()
            .unwrap_or_else(|| default_variants(self.cell_count))
    }

    pub fn region_variants(&self) -> Vec<ConfigVariant> {
        self.shared_variants
            .clone()
            .unwrap_or_else(|| default_variants(self.shared_cell_count))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadConfig {
    pub id: ThreadId,
    #[serde(default = "one")]
    pub criticality: u32,
    #[serde(default = "default_period")]
    pub period: SimTime,
    #[serde(default = "four")]
    pub state_words: usize,
    #[serde(default = "ten")]
    pub work_per_tick: u64,
    #[serde(default)]
    pub emits_output: bool,
    #[serde(default)]
    pub costs: ThreadCosts,
    #[serde(default)]
    pub checkpoint_delay: SimTime,
    #[serde(default = "hundred")]
    pub load: u64,
    #[serde(default)]
    pub state_in_vmem: bool,
}

fn one() -> u32 {
    1
}
fn four() -> usize {
    4
}
fn ten() -> u64 {
    10
}
fn hundred() -> u64 {
    100
}
fn default_period() -> SimTime {
    SimTime(1000)
}

impl ThreadConfig {
    pub fn spec(&self) -> ThreadSpec {
        ThreadSpec {
            thread_id: self.id.clone(),
            criticality: self.criticality,
            desired_checkpoint_period: self.period,
            state_words: self.state_words,
            work_per_tick: self.work_per_tick,
            emits_output: self.emits_output,
            costs: self.costs,
            checkpoint_delay: self.checkpoint_delay,
            load: self.load,
            state_in_vmem: self.state_in_vmem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadGroupConfig {
    pub id: ThreadGroupId,
    pub threads: Vec<ThreadId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub id: GroupId,
    pub members: Vec<TileId>,
    pub thread_groups: Vec<ThreadGroupId>,
    #[serde(default)]
    pub comparison_deadline: Option<SimTime>,
    #[serde(default)]
    pub grace_period: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub context_switch_cost: SimTime,
    pub reboot_duration: SimTime,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            context_switch_cost: SimTime(2),
            reboot_duration: SimTime(200),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    /// `None` votes for groups of three or more only.
    pub output_voting: Option<bool>,
    pub ecc: bool,
}

impl Default for Features {
    fn default() -> Self {
        Self {
            output_voting: None,
            ecc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: SimTime,
    pub tiles: Vec<TileConfig>,
    #[serde(default)]
    pub fabric: FabricConfig,
    pub threads: Vec<ThreadConfig>,
    pub thread_groups: Vec<ThreadGroupConfig>,
    pub groups: Vec<GroupConfig>,
    #[serde(default)]
    pub supervisor: SupervisorConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub criticality: CriticalityPolicy,
    #[serde(default)]
    pub faults: FaultProfile,
    #[serde(default)]
    pub features: Features,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    Io(String),
    Parse { line: usize, column: usize, message: String },
    Override(String),
    Invalid(Vec<String>),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io(m) => write!(f, "cannot read scenario: {m}"),
            ScenarioError::Parse { line, column, message } => {
                write!(f, "line {line}, column {column}: {message}")
            }
            ScenarioError::Override(m) => write!(f, "bad override: {m}"),
            ScenarioError::Invalid(problems) => {
                writeln!(f, "{} problem(s):", problems.len())?;
                for p in problems {
                    writeln!(f, "  {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ScenarioError {}

fn parse_error(e: serde_json::Error) -> ScenarioError {
    ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parse, apply `key=value` overrides and validate.
pub fn parse_scenario(text: &str, overrides: &[(String, String)]) -> Result<Scenario, ScenarioError> {
    // typed parse first so errors carry positions in the file
    let direct: Scenario = serde_json::from_str(text).map_err(parse_error)?;
    let scenario = if overrides.is_empty() {
        direct
    } else {
        let mut value: Value = serde_json::from_str(text).map_err(parse_error)?;
        apply_overrides(&mut value, overrides).map_err(ScenarioError::Override)?;
        serde_json::from_value(value).map_err(|e| ScenarioError::Override(e.to_string()))?
    };
    let problems = validate(&scenario);
    if problems.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Invalid(problems))
    }
}

pub fn load_scenario(path: &Path, overrides: &[(String, String)]) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text, overrides)
}

/// Split `a.b=c` into its path and value.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("`{s}` is not key=value"))?;
    if k.is_empty() {
        return Err(format!("`{s}` has an empty key"));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn literal(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Resolve a dotted path: object keys, array indices, element ids, and `*`
/// over every array element.
pub fn select_paths<'v>(root: &'v mut Value, path: &str) -> Result<Vec<&'v mut Value>, String> {
    let mut current: Vec<&mut Value> = vec![root];
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let mut next = Vec::new();
        for v in current {
            match v {
                Value::Array(items) => {
                    if *seg == "*" {
                        next.extend(items.iter_mut());
                    } else if let Ok(k) = seg.parse::<usize>() {
                        let len = items.len();
                        next.push(
                            items
                                .get_mut(k)
                                .ok_or_else(|| format!("{path}: index {k} out of range ({len})"))?,
                        );
                    } else {
                        let found = items
                            .iter_mut()
                            .find(|it| it.get("id").and_then(Value::as_str) == Some(*seg))
                            .ok_or_else(|| format!("{path}: no element with id `{seg}`"))?;
                        next.push(found);
                    }
                }
                Value::Object(map) => {
                    if !map.contains_key(*seg) {
                        // unknown keys are caught when the result is deserialized
                        let fresh = if last { Value::Null } else { Value::Object(Default::default()) };
                        map.insert(seg.to_string(), fresh);
                    }
                    next.push(map.get_mut(*seg).expect("present"));
                }
                _ => return Err(format!("{path}: `{seg}` does not index a scalar")),
            }
        }
        current = next;
    }
    Ok(current)
}

pub fn apply_overrides(root: &mut Value, overrides: &[(String, String)]) -> Result<(), String> {
    for (path, raw) in overrides {
        let value = literal(raw);
        for slot in select_paths(root, path)? {
            *slot = value.clone();
        }
    }
    Ok(())
}

impl Scenario {
    pub fn specs(&self) -> BTreeMap<ThreadId, Arc<ThreadSpec>> {
        self.threads
            .iter()
            .map(|t| (t.id.clone(), Arc::new(t.spec())))
            .collect()
    }

    /// Checkpoint work of one member in a fault-free checkpoint of `group`.
    pub fn nominal_checkpoint_cost(&self, group: &GroupConfig) -> SimTime {
        let specs = self.specs();
        let threads: Vec<&ThreadSpec> = group
            .thread_groups
            .iter()
            .filter_map(|tg| self.thread_groups.iter().find(|c| &c.id == tg))
            .flat_map(|tg| tg.threads.iter())
            .filter_map(|t| specs.get(t).map(|s| s.as_ref()))
            .collect();
        let delay = threads.iter().map(|s| s.checkpoint_delay).max().unwrap_or_default();
        let work: u64 = threads
            .iter()
            .map(|s| s.checksum_cost().ticks() + self.timing.context_switch_cost.ticks())
            .sum();
        delay + SimTime(work)
    }
}

fn duplicates<'a, T: Ord + fmt::Display + 'a>(items: impl Iterator<Item = &'a T>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for i in items {
        if !seen.insert(i) {
            dup.insert(i.to_string());
        }
    }
    dup.into_iter().collect()
}

/// Every problem in the scenario, each prefixed with its path.
pub fn validate(s: &Scenario) -> Vec<String> {
    let mut p = Vec::new();
    if s.horizon == SimTime::ZERO {
        p.push("horizon: must be > 0".to_string());
    }
    if s.tiles.is_empty() {
        p.push("tiles: at least one tile required".to_string());
    }
    for d in duplicates(s.tiles.iter().map(|t| &t.id)) {
        p.push(format!("tiles: duplicate id `{d}`"));
    }
    let partitions: Vec<PartitionId> = s
        .tiles
        .iter()
        .map(|t| t.partition_id())
        .chain(s.fabric.free_partitions.iter().cloned())
        .collect();
    for d in duplicates(partitions.iter()) {
        p.push(format!("fabric: partition `{d}` used twice"));
    }
    if partitions.iter().any(|x| x.as_str() == "shared") {
        p.push("fabric: partition id `shared` is reserved".to_string());
    }
    let tile_ids: BTreeSet<&TileId> = s.tiles.iter().map(|t| &t.id).collect();
    let spares: BTreeSet<&TileId> = s.tiles.iter().filter(|t| t.spare).map(|t| &t.id).collect();

    if s.fabric.cell_count == 0 {
        p.push("fabric.cell_count: must be > 0".to_string());
    }
    for (name, variants, cells) in [
        ("variants", s.fabric.tile_variants(), s.fabric.cell_count),
        ("shared_variants", s.fabric.region_variants(), s.fabric.shared_cell_count),
    ] {
        if variants.is_empty() {
            p.push(format!("fabric.{name}: at least one variant required"));
        }
        for (i, v) in variants.iter().enumerate() {
            if let Some(c) = v.footprint.iter().find(|c| **c >= cells) {
                p.push(format!("fabric.{name}[{i}]: cell {c} outside 0..{cells}"));
            }
        }
    }

    for d in duplicates(s.threads.iter().map(|t| &t.id)) {
        p.push(format!("threads: duplicate id `{d}`"));
    }
    for (i, t) in s.threads.iter().enumerate() {
        if t.state_words == 0 {
            p.push(format!("threads[{i}].state_words: must be >= 1"));
        }
        if t.period == SimTime::ZERO {
            p.push(format!("threads[{i}].period: must be > 0"));
        }
        if t.work_per_tick == 0 {
            p.push(format!("threads[{i}].work_per_tick: must be >= 1"));
        }
    }
    let thread_words: BTreeMap<&ThreadId, usize> = s.threads.iter().map(|t| (&t.id, t.state_words)).collect();

    for d in duplicates(s.thread_groups.iter().map(|t| &t.id)) {
        p.push(format!("thread_groups: duplicate id `{d}`"));
    }
    let mut owner: BTreeMap<&ThreadId, usize> = BTreeMap::new();
    for (i, tg) in s.thread_groups.iter().enumerate() {
        if tg.threads.is_empty() {
            p.push(format!("thread_groups[{i}].threads: must not be empty"));
        }
        for (j, t) in tg.threads.iter().enumerate() {
            if !thread_words.contains_key(t) {
                p.push(format!("thread_groups[{i}].threads[{j}]: unknown thread `{t}`"));
            }
            *owner.entry(t).or_default() += 1;
        }
    }
    for (t, n) in &owner {
        if *n > 1 {
            p.push(format!("thread_groups: thread `{t}` belongs to {n} thread groups"));
        }
    }
    let tg_ids: BTreeSet<&ThreadGroupId> = s.thread_groups.iter().map(|t| &t.id).collect();

    if s.groups.is_empty() {
        p.push("groups: at least one tile group required".to_string());
    }
    for d in duplicates(s.groups.iter().map(|g| &g.id)) {
        p.push(format!("groups: duplicate id `{d}`"));
    }
    let mut tg_owner: BTreeMap<&ThreadGroupId, usize> = BTreeMap::new();
    for (i, g) in s.groups.iter().enumerate() {
        if g.members.len() < 2 {
            p.push(format!("groups[{i}].members: at least 2 members required"));
        }
        for d in duplicates(g.members.iter()) {
            p.push(format!("groups[{i}].members: `{d}` listed twice"));
        }
        for (j, m) in g.members.iter().enumerate() {
            if !tile_ids.contains(m) {
                p.push(format!("groups[{i}].members[{j}]: unknown tile `{m}`"));
            } else if spares.contains(m) {
                p.push(format!("groups[{i}].members[{j}]: `{m}` is a spare"));
            }
        }
        if g.thread_groups.is_empty() {
            p.push(format!("groups[{i}].thread_groups: must not be empty"));
        }
        for (j, tg) in g.thread_groups.iter().enumerate() {
            if !tg_ids.contains(tg) {
                p.push(format!("groups[{i}].thread_groups[{j}]: unknown thread group `{tg}`"));
            }
            *tg_owner.entry(tg).or_default() += 1;
        }
        let cost = s.nominal_checkpoint_cost(g);
        if let Some(d) = g.comparison_deadline {
            if d <= cost {
                p.push(format!(
                    "groups[{i}].comparison_deadline: {d} does not exceed the checkpoint work of {cost}"
                ));
            }
        }
    }
    for (tg, n) in &tg_owner {
        if *n > 1 {
            p.push(format!("groups: thread group `{tg}` is assigned to {n} tile groups"));
        }
    }
    for tg in &tg_ids {
        if !tg_owner.contains_key(tg) {
            p.push(format!("thread_groups: `{tg}` is not assigned to any tile group"));
        }
    }

    let sv = &s.supervisor;
    if sv.transient_threshold == 0 {
        p.push("supervisor.transient_threshold: must be >= 1".to_string());
    }
    if sv.transient_threshold >= sv.defunct_threshold {
        p.push("supervisor: transient_threshold must be below defunct_threshold".to_string());
    }
    if sv.window == 0 {
        p.push("supervisor.window: must be >= 1".to_string());
    }
    if sv.watchdog_period == Some(SimTime::ZERO) {
        p.push("supervisor.watchdog_period: must be > 0".to_string());
    }

    let c = &s.criticality;
    if c.min_replicas_low == 0 || c.min_replicas_high < c.min_replicas_low {
        p.push("criticality: need min_replicas_high >= min_replicas_low >= 1".to_string());
    }
    if c.frequency_factor == 0 {
        p.push("criticality.frequency_factor: must be >= 1".to_string());
    }

    let f = &s.faults;
    for kind in FaultKind::ALL {
        let r = f.rates.get(kind);
        if !(r.is_finite() && r >= 0.0) {
            p.push(format!("faults.rates.{}: must be a finite rate >= 0", kind.label().replace('-', "_")));
        }
    }
    for (name, v) in [
        ("multi_word_share", f.multi_word_share),
        ("memory_share", f.memory_share),
        ("config_upset_share", f.config_upset_share),
    ] {
        if !(0.0..=1.0).contains(&v) {
            p.push(format!("faults.{name}: must lie in [0, 1]"));
        }
    }
    if f.sefi_duration == SimTime::ZERO {
        p.push("faults.sefi_duration: must be > 0".to_string());
    }
    for (i, w) in f.multipliers.iter().enumerate() {
        if w.from >= w.to || !(w.factor.is_finite() && w.factor >= 0.0) {
            p.push(format!("faults.multipliers[{i}]: need from < to and a factor >= 0"));
        }
    }
    let cells: BTreeMap<PartitionId, u32> = partitions
        .iter()
        .map(|x| (x.clone(), s.fabric.cell_count))
        .chain([(PartitionId::from("shared"), s.fabric.shared_cell_count)])
        .collect();
    for (i, e) in f.events.iter().enumerate() {
        let at = format!("faults.events[{i}]");
        match (e.kind, &e.target) {
            (FaultKind::TransientState, Some(FaultTarget::Word { tile, thread, word })) => {
                if !tile_ids.contains(tile) {
                    p.push(format!("{at}.target.tile: unknown tile `{tile}`"));
                }
                match thread_words.get(thread) {
                    None => p.push(format!("{at}.target.thread: unknown thread `{thread}`")),
                    Some(w) if word >= w => p.push(format!("{at}.target.word: {word} out of range ({w} words)")),
                    _ => {}
                }
                if e.masks.is_empty() || e.masks.contains(&0) {
                    p.push(format!("{at}.masks: masks must be nonzero"));
                }
            }
            (FaultKind::TransientValidationMemory, Some(FaultTarget::Checksum { tile, thread })) => {
                if !tile_ids.contains(tile) {
                    p.push(format!("{at}.target.tile: unknown tile `{tile}`"));
                }
                if !thread_words.contains_key(thread) {
                    p.push(format!("{at}.target.thread: unknown thread `{thread}`"));
                }
            }
            (FaultKind::PermanentCell, Some(FaultTarget::Cell { partition, cell })) => match cells.get(partition) {
                None => p.push(format!("{at}.target.partition: unknown partition `{partition}`")),
                Some(n) if cell >= n => p.push(format!("{at}.target.cell: {cell} outside 0..{n}")),
                _ => {}
            },
            (FaultKind::SefiTile, Some(FaultTarget::Tile { tile })) => {
                if !tile_ids.contains(tile) {
                    p.push(format!("{at}.target.tile: unknown tile `{tile}`"));
                }
                if e.duration.unwrap_or_default() == SimTime::ZERO {
                    p.push(format!("{at}.duration: interrupts need a duration > 0"));
                }
            }
            (FaultKind::SefiShared, None) => {
                if e.duration.unwrap_or_default() == SimTime::ZERO {
                    p.push(format!("{at}.duration: interrupts need a duration > 0"));
                }
            }
            (kind, _) => p.push(format!("{at}.target: does not fit kind {}", kind.label())),
        }
    }
    p
}

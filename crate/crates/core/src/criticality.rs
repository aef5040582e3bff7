//! Stage 3 reallocation: place thread groups on the surviving tiles in
//! descending criticality and degrade low-criticality work when capacity runs out.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::ids::{ThreadGroupId, TileId};
use crate::tile::TileGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lever {
    ReduceReplicas,
    ReduceCheckpointFrequency,
    Deactivate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticalityPolicy {
    pub min_replicas_high: usize,
    pub min_replicas_low: usize,
    /// Groups at or above this criticality are high-criticality.
    pub high_threshold: u32,
    pub degradation_order: Vec<Lever>,
    /// Period multiplier of the frequency lever.
    pub frequency_factor: u64,
    /// The frequency lever is at its floor once the period reaches this multiple.
    pub max_period_factor: u64,
}

impl Default for CriticalityPolicy {
    fn default() -> Self {
        Self {
            min_replicas_high: 3,
            min_replicas_low: 2,
            high_threshold: 2,
            degradation_order: vec![
                Lever::ReduceReplicas,
                Lever::ReduceCheckpointFrequency,
                Lever::Deactivate,
            ],
            frequency_factor: 2,
            max_period_factor: 4,
        }
    }
}

impl CriticalityPolicy {
    pub fn is_high(&self, criticality: u32) -> bool {
        criticality >= self.high_threshold
    }

    pub fn class_minimum(&self, criticality: u32) -> usize {
        if self.is_high(criticality) {
            self.min_replicas_high
        } else {
            self.min_replicas_low
        }
    }
}

/// What a thread group asks of every tile that hosts a replica.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDemand {
    pub tg_id: ThreadGroupId,
    pub criticality: u32,
    pub nominal_replicas: usize,
    pub current_hosts: BTreeSet<TileId>,
    /// Compute units per base period.
    pub load: u64,
    /// Checkpoint work per base period, in the same units.
    pub checkpoint: u64,
}

impl GroupDemand {
    pub fn demand(&self, period_factor: u64) -> u64 {
        self.load + self.checkpoint.div_ceil(period_factor.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CapacityModel {
    pub capacity: BTreeMap<TileId, u64>,
    pub groups: Vec<GroupDemand>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Annotation {
    Full,
    /// Two replicas: mismatches are detected but cannot be corrected.
    DetectOnly,
    /// A single replica: nothing to compare against.
    Unchecked,
    Deactivated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub hosts: BTreeSet<TileId>,
    pub period_factor: u64,
    pub annotation: Annotation,
    pub levers: Vec<Lever>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub placements: BTreeMap<ThreadGroupId, Placement>,
    pub loss_of_capability: Vec<ThreadGroupId>,
}

impl Plan {
    pub fn replicas(&self, tg: &ThreadGroupId) -> usize {
        self.placements.get(tg).map_or(0, |p| p.hosts.len())
    }

    /// Load placed on each tile.
    pub fn usage(&self, model: &CapacityModel) -> BTreeMap<TileId, u64> {
        let mut used: BTreeMap<TileId, u64> = model.capacity.keys().map(|t| (t.clone(), 0)).collect();
        for g in &model.groups {
            if let Some(p) = self.placements.get(&g.tg_id) {
                for h in &p.hosts {
                    *used.entry(h.clone()).or_default() += g.demand(p.period_factor);
                }
            }
        }
        used
    }

    pub fn fully_replicated_high(&self, model: &CapacityModel, policy: &CriticalityPolicy) -> usize {
        model
            .groups
            .iter()
            .filter(|g| policy.is_high(g.criticality) && self.replicas(&g.tg_id) >= policy.min_replicas_high)
            .count()
    }
}

fn annotate(replicas: usize) -> Annotation {
    match replicas {
        0 => Annotation::Deactivated,
        1 => Annotation::Unchecked,
        2 => Annotation::DetectOnly,
        _ => Annotation::Full,
    }
}

fn pick_hosts(
    g: &GroupDemand,
    remaining: &BTreeMap<TileId, u64>,
    demand: u64,
    want: usize,
) -> Vec<TileId> {
    let mut candidates: Vec<(&TileId, u64)> = remaining
        .iter()
        .filter(|(_, r)| **r >= demand)
        .map(|(t, r)| (t, *r))
        .collect();
    candidates.sort_by(|a, b| {
        let cur_a = g.current_hosts.contains(a.0);
        let cur_b = g.current_hosts.contains(b.0);
        cur_b
            .cmp(&cur_a)
            .then(b.1.cmp(&a.1))
            .then(a.0.cmp(b.0))
    });
    candidates
        .into_iter()
        .take(want)
        .map(|(t, _)| t.clone())
        .collect()
}

/// Greedy placement in descending criticality, ties broken by label.
pub fn reallocate(model: &CapacityModel, policy: &CriticalityPolicy) -> Plan {
    let mut remaining = model.capacity.clone();
    let mut order: Vec<&GroupDemand> = model.groups.iter().collect();
    order.sort_by(|a, b| b.criticality.cmp(&a.criticality).then(a.tg_id.cmp(&b.tg_id)));

    let mut plan = Plan::default();
    for g in order {
        let target = policy.class_minimum(g.criticality).max(g.nominal_replicas);
        let mut needed = target;
        let mut factor = 1u64;
        let mut levers = Vec::new();
        let mut hosts = pick_hosts(g, &remaining, g.demand(factor), target);
        let mut deactivated = false;

        if hosts.len() < needed {
            for lever in &policy.degradation_order {
                match lever {
                    Lever::ReduceReplicas => {
                        if needed <= policy.min_replicas_low {
                            continue;
                        }
                        needed = policy.min_replicas_low;
                    }
                    Lever::ReduceCheckpointFrequency => {
                        let next = factor * policy.frequency_factor.max(1);
                        if next > policy.max_period_factor || next == factor {
                            continue;
                        }
                        factor = next;
                    }
                    Lever::Deactivate => {
                        deactivated = true;
                        levers.push(*lever);
                        break;
                    }
                }
                levers.push(*lever);
                hosts = pick_hosts(g, &remaining, g.demand(factor), target);
                if hosts.len() >= needed {
                    break;
                }
            }
        }
        if deactivated || hosts.is_empty() {
            hosts.clear();
        }
        for h in &hosts {
            *remaining.get_mut(h).expect("host from capacity map") -= g.demand(factor);
        }
        if policy.is_high(g.criticality) && hosts.len() < policy.min_replicas_low {
            plan.loss_of_capability.push(g.tg_id.clone());
        }
        let annotation = annotate(hosts.len());
        plan.placements.insert(
            g.tg_id.clone(),
            Placement {
                hosts: hosts.into_iter().collect(),
                period_factor: factor,
                annotation,
                levers,
            },
        );
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DominanceViolation {
    pub starved: ThreadGroupId,
    pub tiles: Vec<TileId>,
}

/// Exchange argument: a group below its class minimum must not be able to
/// reach it by evicting strictly lower-criticality groups.
pub fn check_priority_dominance(
    plan: &Plan,
    model: &CapacityModel,
    policy: &CriticalityPolicy,
) -> Result<(), Vec<DominanceViolation>> {
    let used = plan.usage(model);
    let mut violations = Vec::new();
    for g in &model.groups {
        let have = plan.replicas(&g.tg_id);
        let min = policy.class_minimum(g.criticality);
        if have >= min {
            continue;
        }
        let factor = plan.placements.get(&g.tg_id).map_or(1, |p| p.period_factor);
        let need = g.demand(factor);
        let hosts = plan
            .placements
            .get(&g.tg_id)
            .map(|p| p.hosts.clone())
            .unwrap_or_default();
        let mut freeable = Vec::new();
        let mut evicts = false;
        for (t, cap) in model.capacity.iter().filter(|(t, _)| !hosts.contains(*t)) {
            let lower: u64 = model
                .groups
                .iter()
                .filter(|h| h.criticality < g.criticality)
                .filter_map(|h| {
                    let p = plan.placements.get(&h.tg_id)?;
                    p.hosts.contains(t).then(|| h.demand(p.period_factor))
                })
                .sum();
            if cap - used[t] + lower >= need {
                freeable.push(t.clone());
                evicts |= lower > 0;
            }
        }
        if evicts && have + freeable.len() >= min {
            violations.push(DominanceViolation {
                starved: g.tg_id.clone(),
                tiles: freeable,
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "kebab-case")]
pub enum LeverEffect {
    Shrunk { removed: TileId, detect_only: bool },
    PeriodChanged { from: SimTime, to: SimTime },
    Deactivated,
}

/// Apply one lever to a running tile group. Returns `None` when the lever is
/// already at its floor so the caller can try the next one.
pub fn apply_degradation(
    group: &mut TileGroup,
    lever: Lever,
    policy: &CriticalityPolicy,
    nominal_period: SimTime,
) -> Option<LeverEffect> {
    match lever {
        Lever::ReduceReplicas => {
            if group.members.len() <= policy.min_replicas_low.max(1) {
                return None;
            }
            let removed = group.members.pop()?;
            group.detect_only = group.members.len() == 2;
            Some(LeverEffect::Shrunk {
                removed,
                detect_only: group.detect_only,
            })
        }
        Lever::ReduceCheckpointFrequency => {
            let from = group.base_period;
            let to = SimTime(from.ticks() * policy.frequency_factor.max(1));
            if to == from || to.ticks() > nominal_period.ticks() * policy.max_period_factor {
                return None;
            }
            group.base_period = to;
            Some(LeverEffect::PeriodChanged { from, to })
        }
        Lever::Deactivate => {
            if group.thread_groups.is_empty() {
                return None;
            }
            group.thread_groups.clear();
            Some(LeverEffect::Deactivated)
        }
    }
}

/// Exhaustive optimum of fully replicated high-criticality groups, for
/// checking the greedy planner on small instances.
pub fn brute_force_best(model: &CapacityModel, policy: &CriticalityPolicy) -> usize {
    let tiles: Vec<&TileId> = model.capacity.keys().collect();
    let n = tiles.len();
    let high: Vec<&GroupDemand> = model.groups.iter().filter(|g| policy.is_high(g.criticality)).collect();
    // Only full placements of high groups matter; other groups can be dropped.
    let options: Vec<u32> = (0u32..(1 << n))
        .filter(|m| m.count_ones() as usize >= policy.min_replicas_high)
        .collect();
    fn go(
        i: usize,
        high: &[&GroupDemand],
        options: &[u32],
        tiles: &[&TileId],
        remaining: &mut Vec<u64>,
    ) -> usize {
        if i == high.len() {
            return 0;
        }
        // skip this group
        let mut best = go(i + 1, high, options, tiles, remaining);
        let d = high[i].demand(1);
        for &m in options {
            let fits = (0..tiles.len()).all(|k| m & (1 << k) == 0 || remaining[k] >= d);
            if !fits {
                continue;
            }
            for k in 0..tiles.len() {
                if m & (1 << k) != 0 {
                    remaining[k] -= d;
                }
            }
            best = best.max(1 + go(i + 1, high, options, tiles, remaining));
            for k in 0..tiles.len() {
                if m & (1 << k) != 0 {
                    remaining[k] += d;
                }
            }
        }
        best
    }
    let mut remaining: Vec<u64> = tiles.iter().map(|t| model.capacity[*t]).collect();
    go(0, &high, &options, &tiles, &mut remaining)
}

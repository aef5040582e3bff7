//! Fault model: transient state and checksum corruption, permanent cell
//! damage and functional interrupts, from scripts or Poisson arrivals.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::engine::{RandomStream, SimTime};
use crate::fabric::Fabric;
use crate::ids::{PartitionId, ThreadGroupId, ThreadId, TileId};
use crate::tile::{Tile, TileStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    TransientState,
    TransientValidationMemory,
    PermanentCell,
    SefiTile,
    SefiShared,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::TransientState,
        FaultKind::TransientValidationMemory,
        FaultKind::PermanentCell,
        FaultKind::SefiTile,
        FaultKind::SefiShared,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FaultKind::TransientState => "transient-state",
            FaultKind::TransientValidationMemory => "transient-validation-memory",
            FaultKind::PermanentCell => "permanent-cell",
            FaultKind::SefiTile => "sefi-tile",
            FaultKind::SefiShared => "sefi-shared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum FaultTarget {
    Word {
        tile: TileId,
        thread: ThreadId,
        word: usize,
    },
    Checksum {
        tile: TileId,
        thread: ThreadId,
    },
    Cell {
        partition: PartitionId,
        cell: u32,
    },
    Tile {
        tile: TileId,
    },
}

impl FaultTarget {
    pub fn tile(&self) -> Option<&TileId> {
        match self {
            FaultTarget::Word { tile, .. } | FaultTarget::Checksum { tile, .. } | FaultTarget::Tile { tile } => {
                Some(tile)
            }
            FaultTarget::Cell { .. } => None,
        }
    }
}

fn default_masks() -> Vec<u64> {
    vec![1]
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub at: SimTime,
    pub kind: FaultKind,
    /// Absent only for shared-region interrupts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<FaultTarget>,
    /// Interrupt length; permanent faults have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<SimTime>,
    /// XOR masks for consecutive words starting at the target word.
    #[serde(default = "default_masks")]
    pub masks: Vec<u64>,
    /// Hit main memory rather than processor logic.
    #[serde(default, skip_serializing_if = "is_false")]
    pub in_memory: bool,
    /// Configuration-memory upset: clears on the next reconfiguration.
    #[serde(default, skip_serializing_if = "is_false")]
    pub config_upset: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KindRates {
    pub transient_state: f64,
    pub transient_validation_memory: f64,
    pub permanent_cell: f64,
    pub sefi_tile: f64,
    pub sefi_shared: f64,
}

impl KindRates {
    pub fn get(&self, kind: FaultKind) -> f64 {
        match kind {
            FaultKind::TransientState => self.transient_state,
            FaultKind::TransientValidationMemory => self.transient_validation_memory,
            FaultKind::PermanentCell => self.permanent_cell,
            FaultKind::SefiTile => self.sefi_tile,
            FaultKind::SefiShared => self.sefi_shared,
        }
    }
}

/// Flux multiplier over `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateWindow {
    pub from: SimTime,
    pub to: SimTime,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultProfile {
    /// Events per simulated second.
    pub rates: KindRates,
    pub multipliers: Vec<RateWindow>,
    pub events: Vec<FaultEvent>,
    pub sefi_duration: SimTime,
    pub multi_word_share: f64,
    pub memory_share: f64,
    pub config_upset_share: f64,
}

impl Default for FaultProfile {
    fn default() -> Self {
        Self {
            rates: KindRates::default(),
            multipliers: Vec::new(),
            events: Vec::new(),
            sefi_duration: SimTime(3000),
            multi_word_share: 0.0,
            memory_share: 0.0,
            config_upset_share: 0.0,
        }
    }
}

impl FaultProfile {
    pub fn multiplier_at(&self, t: SimTime) -> f64 {
        self.multipliers
            .iter()
            .filter(|w| w.from <= t && t < w.to)
            .map(|w| w.factor)
            .product()
    }

    fn peak_multiplier(&self) -> f64 {
        // products of overlapping windows are bounded by the product of all factors above one
        self.multipliers
            .iter()
            .map(|w| w.factor.max(1.0))
            .product::<f64>()
    }
}

/// Valid targets at generation time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TargetSpace {
    /// (tile, thread, state words) for every hosted replica.
    pub replicas: Vec<(TileId, ThreadId, usize)>,
    pub cells: Vec<(PartitionId, u32)>,
    pub tiles: Vec<TileId>,
}

fn nonzero(stream: &mut RandomStream) -> u64 {
    loop {
        let m = stream.next_u64();
        if m != 0 {
            return m;
        }
    }
}

/// Scripted events plus Poisson arrivals for every kind with a positive rate,
/// sorted by time. Rate windows are realized by thinning.
pub fn generate(
    profile: &FaultProfile,
    horizon: SimTime,
    stream: &mut RandomStream,
    targets: &TargetSpace,
) -> Vec<FaultEvent> {
    let mut out: Vec<FaultEvent> = profile.events.iter().filter(|e| e.at < horizon).cloned().collect();
    let peak = profile.peak_multiplier();
    let total_words: usize = targets.replicas.iter().map(|r| r.2).sum();
    let total_cells: u64 = targets.cells.iter().map(|c| c.1 as u64).sum();

    for kind in FaultKind::ALL {
        let rate = profile.rates.get(kind);
        if rate <= 0.0 {
            continue;
        }
        let per_tick = rate / 1e6 * peak;
        let mut t = 0.0f64;
        loop {
            t += stream.exponential(per_tick).expect("positive rate");
            if t >= horizon.ticks() as f64 {
                break;
            }
            let at = SimTime(t as u64);
            if peak > 0.0 && stream.unit() >= profile.multiplier_at(at) / peak {
                continue;
            }
            let event = match kind {
                FaultKind::TransientState => {
                    if total_words == 0 {
                        continue;
                    }
                    let mut k = stream.range(0, total_words as u64 - 1) as usize;
                    let (tile, thread, word) = targets
                        .replicas
                        .iter()
                        .find_map(|(ti, th, w)| {
                            if k < *w {
                                Some((ti.clone(), th.clone(), k))
                            } else {
                                k -= w;
                                None
                            }
                        })
                        .expect("index within total");
                    let words = if stream.bernoulli(profile.multi_word_share) { 2 } else { 1 };
                    FaultEvent {
                        at,
                        kind,
                        target: Some(FaultTarget::Word { tile, thread, word }),
                        duration: None,
                        masks: (0..words).map(|_| nonzero(stream)).collect(),
                        in_memory: stream.bernoulli(profile.memory_share),
                        config_upset: false,
                    }
                }
                FaultKind::TransientValidationMemory => {
                    let Some((tile, thread, _)) = stream.pick(&targets.replicas).cloned() else {
                        continue;
                    };
                    FaultEvent {
                        at,
                        kind,
                        target: Some(FaultTarget::Checksum { tile, thread }),
                        duration: None,
                        masks: vec![nonzero(stream)],
                        in_memory: false,
                        config_upset: false,
                    }
                }
                FaultKind::PermanentCell => {
                    if total_cells == 0 {
                        continue;
                    }
                    let mut k = stream.range(0, total_cells - 1);
                    let (partition, cell) = targets
                        .cells
                        .iter()
                        .find_map(|(p, n)| {
                            if k < *n as u64 {
                                Some((p.clone(), k as u32))
                            } else {
                                k -= *n as u64;
                                None
                            }
                        })
                        .expect("index within total");
                    FaultEvent {
                        at,
                        kind,
                        target: Some(FaultTarget::Cell { partition, cell }),
                        duration: None,
                        masks: Vec::new(),
                        in_memory: false,
                        config_upset: stream.bernoulli(profile.config_upset_share),
                    }
                }
                FaultKind::SefiTile => {
                    let Some(tile) = stream.pick(&targets.tiles).cloned() else {
                        continue;
                    };
                    FaultEvent {
                        at,
                        kind,
                        target: Some(FaultTarget::Tile { tile }),
                        duration: Some(profile.sefi_duration),
                        masks: Vec::new(),
                        in_memory: false,
                        config_upset: false,
                    }
                }
                FaultKind::SefiShared => FaultEvent {
                    at,
                    kind,
                    target: None,
                    duration: Some(profile.sefi_duration),
                    masks: Vec::new(),
                    in_memory: false,
                    config_upset: false,
                },
            };
            out.push(event);
        }
    }
    out.sort_by_key(|e| e.at);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "kebab-case")]
pub enum Effect {
    StateCorrupted { tile: TileId },
    ChecksumLatched { tile: TileId },
    /// Damage under a running tile's active configuration.
    CorruptingExecution { tile: TileId },
    /// Damage under the shared region's active configuration.
    SharedDamage,
    /// Damage outside every active footprint; recorded but inert for now.
    LatentDamage,
    SefiTile { tile: TileId, until: SimTime },
    SefiShared { until: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum ApplyOutcome {
    Applied(Effect),
    Absorbed { reason: String },
}

/// The parts of the system a fault can touch.
pub struct Injection<'a> {
    pub tiles: &'a mut BTreeMap<TileId, Tile>,
    pub fabric: &'a mut Fabric,
    pub thread_groups: &'a BTreeMap<ThreadId, ThreadGroupId>,
    pub ecc: bool,
    pub shared_blocked_until: &'a mut Option<SimTime>,
}

fn absorbed(reason: &str) -> ApplyOutcome {
    ApplyOutcome::Absorbed {
        reason: reason.to_string(),
    }
}

fn hosts(tile: &Tile, thread: &ThreadId, tgs: &BTreeMap<ThreadId, ThreadGroupId>) -> bool {
    tile.is_running()
        && tgs
            .get(thread)
            .is_some_and(|tg| tile.hosted_groups.contains(tg))
}

pub fn apply(event: &FaultEvent, sys: &mut Injection<'_>, now: SimTime) -> ApplyOutcome {
    match (event.kind, &event.target) {
        (FaultKind::TransientState, Some(FaultTarget::Word { tile, thread, word })) => {
            if sys.ecc && event.in_memory {
                return absorbed("ecc");
            }
            let Some(t) = sys.tiles.get_mut(tile) else {
                return absorbed("target-gone");
            };
            if !hosts(t, thread, sys.thread_groups) {
                return absorbed("target-gone");
            }
            let Some(state) = t.threads.get_mut(thread) else {
                return absorbed("target-gone");
            };
            let n = state.state.len();
            for (k, mask) in event.masks.iter().enumerate() {
                state.corrupt_word((word + k) % n, *mask);
            }
            ApplyOutcome::Applied(Effect::StateCorrupted { tile: tile.clone() })
        }
        (FaultKind::TransientValidationMemory, Some(FaultTarget::Checksum { tile, thread })) => {
            let Some(t) = sys.tiles.get_mut(tile) else {
                return absorbed("target-gone");
            };
            if !hosts(t, thread, sys.thread_groups) {
                return absorbed("target-gone");
            }
            let mask = event.masks.first().copied().filter(|m| *m != 0).unwrap_or(1);
            t.vmem.latch_flip(thread, mask);
            ApplyOutcome::Applied(Effect::ChecksumLatched { tile: tile.clone() })
        }
        (FaultKind::PermanentCell, Some(FaultTarget::Cell { partition, cell })) => {
            let under = sys.fabric.damage_cell(partition, *cell, event.config_upset);
            if !under {
                return ApplyOutcome::Applied(Effect::LatentDamage);
            }
            if sys.fabric.is_shared(partition) {
                return ApplyOutcome::Applied(Effect::SharedDamage);
            }
            let host = sys
                .tiles
                .values_mut()
                .find(|t| &t.partition == partition && t.status() != TileStatus::Defunct);
            match host {
                Some(t) if t.is_running() => {
                    t.corrupting = true;
                    ApplyOutcome::Applied(Effect::CorruptingExecution {
                        tile: t.tile_id.clone(),
                    })
                }
                _ => ApplyOutcome::Applied(Effect::LatentDamage),
            }
        }
        (FaultKind::SefiTile, Some(FaultTarget::Tile { tile })) => {
            let Some(t) = sys.tiles.get_mut(tile) else {
                return absorbed("target-gone");
            };
            if t.status() == TileStatus::Defunct {
                return absorbed("target-gone");
            }
            let until = now + event.duration.unwrap_or(SimTime(1));
            t.sefi_blocked = true;
            t.sefi_until = t.sefi_until.max(until);
            ApplyOutcome::Applied(Effect::SefiTile {
                tile: tile.clone(),
                until: t.sefi_until,
            })
        }
        (FaultKind::SefiShared, _) => {
            let until = now + event.duration.unwrap_or(SimTime(1));
            let until = sys.shared_blocked_until.map_or(until, |u| u.max(until));
            *sys.shared_blocked_until = Some(until);
            ApplyOutcome::Applied(Effect::SefiShared { until })
        }
        _ => absorbed("malformed"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::default_variants;

    fn space() -> TargetSpace {
        TargetSpace {
            replicas: (0..3)
                .flat_map(|i| {
                    [("Ta", 4), ("Tb", 2)].map(|(th, w)| (TileId(format!("C{i}")), ThreadId::from(th), w))
                })
                .collect(),
            cells: vec![(PartitionId::from("P0"), 64)],
            tiles: (0..3).map(|i| TileId(format!("C{i}"))).collect(),
        }
    }

    #[test]
    fn zero_rates_no_events() {
        let mut s = RandomStream::new(1, "faults");
        let ev = generate(&FaultProfile::default(), SimTime(1_000_000), &mut s, &space());
        assert!(ev.is_empty());
    }

    #[test]
    fn explicit_event_always_present() {
        let mut profile = FaultProfile::default();
        profile.rates.transient_state = 500.0;
        profile.events.push(FaultEvent {
            at: SimTime(42),
            kind: FaultKind::SefiShared,
            target: None,
            duration: Some(SimTime(10)),
            masks: vec![],
            in_memory: false,
            config_upset: false,
        });
        for seed in 0..5 {
            let mut s = RandomStream::new(seed, "faults");
            let ev = generate(&profile, SimTime(100_000), &mut s, &space());
            assert!(ev.iter().any(|e| e.at == SimTime(42) && e.kind == FaultKind::SefiShared));
            assert!(ev.windows(2).all(|w| w[0].at <= w[1].at));
        }
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        // 1e-3 per tick = 1000 per second, over 1e6 ticks: mean 1000, sigma ~31.6
        let mut profile = FaultProfile::default();
        profile.rates.transient_state = 1000.0;
        let mut total = 0usize;
        for seed in 0..20 {
            let mut s = RandomStream::new(seed, "faults");
            let n = generate(&profile, SimTime(1_000_000), &mut s, &space()).len();
            assert!((905..=1095).contains(&n), "seed {seed}: {n}");
            total += n;
        }
        let mean = total as f64 / 20.0;
        assert!((mean - 1000.0).abs() < 3.0 * 31.63 / 20f64.sqrt(), "{mean}");
    }

    #[test]
    fn windows_scale_arrivals() {
        let mut profile = FaultProfile::default();
        profile.rates.sefi_tile = 1000.0;
        profile.multipliers.push(RateWindow {
            from: SimTime(0),
            to: SimTime(500_000),
            factor: 4.0,
        });
        let mut s = RandomStream::new(3, "faults");
        let ev = generate(&profile, SimTime(1_000_000), &mut s, &space());
        let early = ev.iter().filter(|e| e.at < SimTime(500_000)).count() as f64;
        let late = ev.len() as f64 - early;
        assert!((early / late - 4.0).abs() < 0.6, "{early} {late}");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut profile = FaultProfile::default();
        profile.rates = KindRates {
            transient_state: 100.0,
            transient_validation_memory: 20.0,
            permanent_cell: 5.0,
            sefi_tile: 5.0,
            sefi_shared: 1.0,
        };
        let a = generate(&profile, SimTime(1_000_000), &mut RandomStream::new(9, "faults"), &space());
        let b = generate(&profile, SimTime(1_000_000), &mut RandomStream::new(9, "faults"), &space());
        assert_eq!(a, b);
        for e in &a {
            match &e.target {
                Some(FaultTarget::Word { word, thread, .. }) => {
                    assert!(*word < if thread.as_str() == "Ta" { 4 } else { 2 });
                    assert!(e.masks.iter().all(|m| *m != 0));
                }
                Some(FaultTarget::Cell { cell, .. }) => assert!(*cell < 64),
                _ => {}
            }
        }
    }

    #[test]
    fn explicit_events_parse() {
        let e: FaultEvent = serde_json::from_str(
            r#"{"at": 1500, "kind": "transient-state", "target": {"tile": "C2", "thread": "Ta", "word": 0}}"#,
        )
        .unwrap();
        assert_eq!(e.masks, vec![1]);
        assert!(matches!(e.target, Some(FaultTarget::Word { word: 0, .. })));
        let e: FaultEvent =
            serde_json::from_str(r#"{"at": 5, "kind": "sefi-tile", "target": {"tile": "C1"}, "duration": 30}"#).unwrap();
        assert!(matches!(e.target, Some(FaultTarget::Tile { .. })));
        let e: FaultEvent =
            serde_json::from_str(r#"{"at": 5, "kind": "permanent-cell", "target": {"partition": "P1", "cell": 9}}"#)
                .unwrap();
        assert!(matches!(e.target, Some(FaultTarget::Cell { cell: 9, .. })));
    }

    #[test]
    fn ecc_absorbs_memory_hits_and_damage_is_latent_off_footprint() {
        let pids = vec![PartitionId::from("P0")];
        let mut fabric = Fabric::uniform(&pids, 64, default_variants(64));
        let mut tiles = BTreeMap::new();
        tiles.insert(TileId::from("C0"), Tile::new(TileId::from("C0"), pids[0].clone(), 1000));
        let tgs = BTreeMap::new();
        let mut shared = None;
        let mut inj = Injection {
            tiles: &mut tiles,
            fabric: &mut fabric,
            thread_groups: &tgs,
            ecc: true,
            shared_blocked_until: &mut shared,
        };
        let hit = FaultEvent {
            at: SimTime(0),
            kind: FaultKind::TransientState,
            target: Some(FaultTarget::Word {
                tile: "C0".into(),
                thread: "Ta".into(),
                word: 0,
            }),
            duration: None,
            masks: vec![1],
            in_memory: true,
            config_upset: false,
        };
        assert_eq!(apply(&hit, &mut inj, SimTime(0)), absorbed("ecc"));
        // variant A covers anchors and cells 2..22; cell 40 is outside it
        let dmg = FaultEvent {
            at: SimTime(0),
            kind: FaultKind::PermanentCell,
            target: Some(FaultTarget::Cell {
                partition: "P0".into(),
                cell: 40,
            }),
            duration: None,
            masks: vec![],
            in_memory: false,
            config_upset: false,
        };
        assert_eq!(apply(&dmg, &mut inj, SimTime(0)), ApplyOutcome::Applied(Effect::LatentDamage));
        assert_eq!(inj.fabric.damage_count(), 1);
        let shared_sefi = FaultEvent {
            at: SimTime(0),
            kind: FaultKind::SefiShared,
            target: None,
            duration: Some(SimTime(50)),
            masks: vec![],
            in_memory: false,
            config_upset: false,
        };
        apply(&shared_sefi, &mut inj, SimTime(10));
        assert_eq!(shared, Some(SimTime(60)));
    }
}

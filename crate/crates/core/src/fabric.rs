//! Reconfigurable fabric: partitions of logic cells, accumulated damage,
//! differently routed configuration variants and the repair search over them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{PartitionId, TileId, VariantId};

/// A differently routed, functionally equivalent configuration of one design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigVariant {
    pub variant_id: VariantId,
    pub footprint: BTreeSet<u32>,
}

impl ConfigVariant {
    pub fn new(id: &str, cells: impl IntoIterator<Item = u32>) -> Self {
        Self {
            variant_id: VariantId::from(id),
            footprint: cells.into_iter().collect(),
        }
    }
}

/// Three variants over distinct thirds of the partition, all sharing two
/// anchor cells.
pub fn default_variants(cell_count: u32) -> Vec<ConfigVariant> {
    let anchors = [0u32, 1];
    let third = (cell_count.saturating_sub(2)) / 3;
    (0..3)
        .map(|k| {
            let lo = 2 + k * third;
            let cells = anchors.iter().copied().chain(lo..lo + third);
            ConfigVariant::new(&["A", "B", "C"][k as usize], cells)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub partition_id: PartitionId,
    pub cell_count: u32,
    pub hosted_tile: Option<TileId>,
    pub active_variant: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fabric {
    pub partitions: BTreeMap<PartitionId, Partition>,
    pub shared_region: Partition,
    pub variants: Vec<ConfigVariant>,
    pub shared_variants: Vec<ConfigVariant>,
    damaged: BTreeSet<(PartitionId, u32)>,
    /// Configuration-memory upsets: behave like damage until the partition is
    /// successfully reconfigured.
    upsets: BTreeSet<(PartitionId, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricFault {
    pub partition: PartitionId,
    pub overlapping: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RepairOutcome {
    Repaired {
        partition: PartitionId,
        variant: usize,
        attempts: usize,
    },
    Exhausted {
        evidence: BTreeMap<PartitionId, Vec<u32>>,
        attempts: usize,
    },
}

/// One step of an in-progress repair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RepairStep {
    Reconfigure { partition: PartitionId, variant: usize },
    Relocate { from: PartitionId, to: PartitionId },
    Exhausted,
}

/// Iterates configuration variants over the tile's partition, then over free
/// partitions, one reconfiguration at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairJob {
    pub tile: TileId,
    pub partition: PartitionId,
    next_variant: usize,
    tried_partitions: BTreeSet<PartitionId>,
    pub attempts: usize,
    pub evidence: BTreeMap<PartitionId, Vec<u32>>,
}

impl RepairJob {
    pub fn new(tile: TileId, partition: PartitionId) -> Self {
        let mut tried = BTreeSet::new();
        tried.insert(partition.clone());
        Self {
            tile,
            partition,
            next_variant: 0,
            tried_partitions: tried,
            attempts: 0,
            evidence: BTreeMap::new(),
        }
    }

    /// What to try next. Relocation moves the job to a free partition and
    /// restarts the variant sequence there.
    pub fn next_step(&mut self, fabric: &Fabric) -> RepairStep {
        if self.next_variant < fabric.variants.len() {
            let v = self.next_variant;
            self.next_variant += 1;
            self.attempts += 1;
            return RepairStep::Reconfigure {
                partition: self.partition.clone(),
                variant: v,
            };
        }
        let free = fabric
            .partitions
            .values()
            .find(|p| p.hosted_tile.is_none() && !self.tried_partitions.contains(&p.partition_id));
        match free {
            Some(p) => {
                let to = p.partition_id.clone();
                let from = std::mem::replace(&mut self.partition, to.clone());
                self.tried_partitions.insert(to.clone());
                self.next_variant = 0;
                RepairStep::Relocate { from, to }
            }
            None => RepairStep::Exhausted,
        }
    }

    pub fn record_failure(&mut self, fault: FabricFault) {
        self.evidence
            .entry(fault.partition)
            .or_default()
            .extend(fault.overlapping);
    }
}

impl Fabric {
    /// Partitions of equal size sharing one variant set; the shared region
    /// uses the default geometry.
    pub fn uniform(ids: &[PartitionId], cell_count: u32, variants: Vec<ConfigVariant>) -> Self {
        let partitions = ids
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    Partition {
                        partition_id: id.clone(),
                        cell_count,
                        hosted_tile: None,
                        active_variant: 0,
                    },
                )
            })
            .collect();
        Self {
            partitions,
            shared_region: Partition {
                partition_id: PartitionId::from("shared"),
                cell_count: 64,
                hosted_tile: None,
                active_variant: 0,
            },
            variants,
            shared_variants: default_variants(64),
            damaged: BTreeSet::new(),
            upsets: BTreeSet::new(),
        }
    }

    pub fn is_shared(&self, partition: &PartitionId) -> bool {
        partition == &self.shared_region.partition_id
    }

    pub fn partition(&self, id: &PartitionId) -> Option<&Partition> {
        if self.is_shared(id) {
            Some(&self.shared_region)
        } else {
            self.partitions.get(id)
        }
    }

    fn partition_mut(&mut self, id: &PartitionId) -> Option<&mut Partition> {
        if self.is_shared(id) {
            Some(&mut self.shared_region)
        } else {
            self.partitions.get_mut(id)
        }
    }

    fn variants_for(&self, partition: &PartitionId) -> &[ConfigVariant] {
        if self.is_shared(partition) {
            &self.shared_variants
        } else {
            &self.variants
        }
    }

    pub fn damaged_cells(&self) -> &BTreeSet<(PartitionId, u32)> {
        &self.damaged
    }

    pub fn damage_count(&self) -> usize {
        self.damaged.len()
    }

    fn faulty_cells(&self, partition: &PartitionId) -> BTreeSet<u32> {
        self.damaged
            .iter()
            .chain(self.upsets.iter())
            .filter(|(p, _)| p == partition)
            .map(|(_, c)| *c)
            .collect()
    }

    fn overlap(&self, partition: &PartitionId, variant: usize) -> Vec<u32> {
        let Some(v) = self.variants_for(partition).get(variant) else {
            return Vec::new();
        };
        let bad = self.faulty_cells(partition);
        v.footprint.intersection(&bad).copied().collect()
    }

    /// Record a damaged cell. Returns true when it lies under the partition's
    /// active configuration. Permanent damage never clears; upsets clear on the
    /// next successful reconfiguration.
    pub fn damage_cell(&mut self, partition: &PartitionId, cell: u32, clears_on_reconfig: bool) -> bool {
        let key = (partition.clone(), cell);
        if clears_on_reconfig {
            self.upsets.insert(key);
        } else {
            self.damaged.insert(key);
        }
        let active = self.partition(partition).map(|p| p.active_variant).unwrap_or(0);
        self.variants_for(partition)
            .get(active)
            .is_some_and(|v| v.footprint.contains(&cell))
    }

    /// Self-test of the active configuration.
    pub fn self_test(&self, partition: &PartitionId) -> Result<(), Vec<u32>> {
        let Some(p) = self.partition(partition) else {
            return Ok(());
        };
        let overlap = self.overlap(partition, p.active_variant);
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(overlap)
        }
    }

    /// Program `variant` into `partition`. The caller guarantees no active
    /// tile runs on the partition; other partitions are untouched.
    pub fn partial_reconfigure(&mut self, partition: &PartitionId, variant: usize) -> Result<(), FabricFault> {
        self.upsets.retain(|(p, _)| p != partition);
        let overlap = self.overlap(partition, variant);
        if let Some(p) = self.partition_mut(partition) {
            p.active_variant = variant;
        }
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(FabricFault {
                partition: partition.clone(),
                overlapping: overlap,
            })
        }
    }

    pub fn validate_partition(&self, partition: &PartitionId) -> Result<(), FabricFault> {
        self.self_test(partition).map_err(|cells| FabricFault {
            partition: partition.clone(),
            overlapping: cells,
        })
    }

    /// Move a tile's binding between partitions.
    pub fn relocate(&mut self, tile: &TileId, from: &PartitionId, to: &PartitionId) {
        if let Some(p) = self.partitions.get_mut(from) {
            if p.hosted_tile.as_ref() == Some(tile) {
                p.hosted_tile = None;
            }
        }
        if let Some(p) = self.partitions.get_mut(to) {
            p.hosted_tile = Some(tile.clone());
        }
    }

    /// Run a whole repair without simulated time: variants in order over the
    /// tile's partition, then free partitions.
    pub fn repair_tile(&mut self, tile: &TileId, partition: &PartitionId) -> RepairOutcome {
        let mut job = RepairJob::new(tile.clone(), partition.clone());
        loop {
            match job.next_step(self) {
                RepairStep::Reconfigure { partition, variant } => {
                    match self
                        .partial_reconfigure(&partition, variant)
                        .and_then(|_| self.validate_partition(&partition))
                    {
                        Ok(()) => {
                            return RepairOutcome::Repaired {
                                partition,
                                variant,
                                attempts: job.attempts,
                            }
                        }
                        Err(f) => job.record_failure(f),
                    }
                }
                RepairStep::Relocate { from, to } => self.relocate(tile, &from, &to),
                RepairStep::Exhausted => {
                    return RepairOutcome::Exhausted {
                        evidence: job.evidence,
                        attempts: job.attempts,
                    }
                }
            }
        }
    }

    /// Reprogram the whole device, advancing the shared region to the next
    /// variant that avoids its damage. Every tile partition is reprogrammed
    /// with its current variant, clearing configuration upsets.
    pub fn full_reconfigure(&mut self) -> Result<usize, FabricFault> {
        self.upsets.clear();
        let shared = self.shared_region.partition_id.clone();
        let n = self.shared_variants.len();
        let current = self.shared_region.active_variant;
        for step in 1..=n {
            let v = (current + step) % n;
            if self.overlap(&shared, v).is_empty() {
                self.shared_region.active_variant = v;
                return Ok(v);
            }
        }
        Err(FabricFault {
            partition: shared.clone(),
            overlapping: self.faulty_cells(&shared).into_iter().collect(),
        })
    }
}

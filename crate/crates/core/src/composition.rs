//! Resource composition: decomposes Active ScalerNodes into typed resource
//! units, tracks the global pool, and composes units into instances via
//! blueprints or custom requirement lists.
//!
//! Selection is greedy over an exact-rational score per candidate node
//! (performance, price, availability), filled from the highest score down
//! with ties broken by ascending node id. For a single requirement this
//! maximizes total units x score over all feasible splits, since demand is
//! divisible.
//!
//! The composer never touches token balances; fees are computed here and
//! charged by the caller against the ledger.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::Registry;
use crate::types::{
    AccountId, BlueprintId, CapacityVector, Epoch, InstanceId, NodeId, Rational, RegionId,
    ResourceType, ServiceId, TokenAmount,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompositionError {
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} already exists")]
    DuplicateInstance(InstanceId),
    #[error("unknown blueprint {0}")]
    UnknownBlueprint(BlueprintId),
    #[error("malformed blueprint: {0}")]
    MalformedBlueprint(String),
    #[error("no free capacity for {rtype}: need {needed}, available {available}")]
    InsufficientCapacity { rtype: ResourceType, needed: u64, available: u64 },
    #[error("no active node lies in the locality set for {0}")]
    LocalityUnsatisfiable(ResourceType),
    #[error("no candidate meets the KPI thresholds for {0}")]
    KpiUnsatisfiable(ResourceType),
    #[error("instance is not elastic")]
    NotElastic,
    #[error("scaling {rtype} to {requested} leaves the elastic bounds [{low}, {high}]")]
    BoundsExceeded { rtype: ResourceType, requested: u64, low: u64, high: u64 },
    #[error("provider of node {0} declined the extension")]
    ProviderDeclined(NodeId),
    #[error("node {0} is committed for less than the extended booking")]
    CommitmentTooShort(NodeId),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

type Result<T> = std::result::Result<T, CompositionError>;

/// Quantity of one resource type allocated on one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUnit {
    pub node: NodeId,
    pub rtype: ResourceType,
    pub quantity: u64,
    pub region: RegionId,
}

/// One line of demand: so much of a type, optionally pinned to regions and
/// minimum KPI medians (absolute milli-unit thresholds).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirement {
    pub rtype: ResourceType,
    pub quantity: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality: Option<BTreeSet<RegionId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_kpi: Option<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElasticBounds {
    pub min_factor: Rational,
    pub max_factor: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceBlueprint {
    pub id: BlueprintId,
    pub requirements: Vec<Requirement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elastic: Option<ElasticBounds>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub services: Vec<ServiceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub owner: AccountId,
    pub allocations: Vec<ResourceUnit>,
    /// `None` for custom requirement lists.
    pub blueprint: Option<BlueprintId>,
    pub requirements: Vec<Requirement>,
    pub booked_at: Epoch,
    pub booked_until: Epoch,
    /// Last epoch whose fee has been charged.
    pub paid_through: Epoch,
    /// Per-unit per-epoch price frozen at booking.
    pub fixed_unit_prices: BTreeMap<ResourceType, TokenAmount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elastic: Option<ElasticBounds>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub services: Vec<ServiceId>,
}

impl Instance {
    /// Currently allocated units of one type, summed across nodes.
    pub fn allocated_quantity(&self, rtype: &ResourceType) -> u64 {
        self.allocations.iter().filter(|u| &u.rtype == rtype).map(|u| u.quantity).sum()
    }

    /// Originally required units of one type, summed across requirements.
    pub fn base_quantity(&self, rtype: &ResourceType) -> u64 {
        self.requirements.iter().filter(|r| &r.rtype == rtype).map(|r| r.quantity).sum()
    }

    /// Fee for one epoch at the frozen prices.
    pub fn epoch_fee(&self) -> TokenAmount {
        let mut total = TokenAmount::ZERO;
        for unit in &self.allocations {
            let price = self.fixed_unit_prices.get(&unit.rtype).copied().unwrap_or(TokenAmount::ZERO);
            let due = price.checked_mul(unit.quantity as u128).expect("fee overflow");
            total = total.checked_add(due).expect("fee overflow");
        }
        total
    }

    /// Units per (node, type), for fee routing.
    pub fn units_by_node(&self) -> BTreeMap<(NodeId, ResourceType), u64> {
        let mut map = BTreeMap::new();
        for unit in &self.allocations {
            *map.entry((unit.node.clone(), unit.rtype.clone())).or_insert(0) += unit.quantity;
        }
        map
    }
}

/// Weights for the selection score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringWeights {
    pub performance: Rational,
    pub price: Rational,
    pub availability: Rational,
}

impl Default for ScoringWeights {
    fn default() -> ScoringWeights {
        ScoringWeights {
            performance: Rational::new(1, 3),
            price: Rational::new(1, 3),
            availability: Rational::new(1, 3),
        }
    }
}

/// Latest aggregated KPI medians per subject, supplied by the enforcement
/// layer: node id -> KPI name -> milli-unit value.
pub type PerformanceView = BTreeMap<NodeId, BTreeMap<String, u64>>;

/// A scored candidate for one requirement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedCandidate {
    pub node: NodeId,
    pub score: Rational,
    pub free: u64,
    pub reservation_price: TokenAmount,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composer {
    blueprints: BTreeMap<BlueprintId, InstanceBlueprint>,
    instances: BTreeMap<InstanceId, Instance>,
    /// Live allocated units per node, kept in sync with `instances`.
    allocated: BTreeMap<NodeId, CapacityVector>,
}

impl Composer {
    pub fn new() -> Composer {
        Composer::default()
    }

    pub fn register_blueprint(&mut self, blueprint: InstanceBlueprint) -> Result<()> {
        validate_requirements(&blueprint.requirements)?;
        if let Some(el) = &blueprint.elastic {
            validate_elastic(el)?;
        }
        if self.blueprints.contains_key(&blueprint.id) {
            return Err(CompositionError::MalformedBlueprint(format!(
                "blueprint {} already defined",
                blueprint.id
            )));
        }
        self.blueprints.insert(blueprint.id.clone(), blueprint);
        Ok(())
    }

    pub fn blueprint(&self, id: &BlueprintId) -> Option<&InstanceBlueprint> {
        self.blueprints.get(id)
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn instances(&self) -> &BTreeMap<InstanceId, Instance> {
        &self.instances
    }

    pub fn allocated(&self) -> &BTreeMap<NodeId, CapacityVector> {
        &self.allocated
    }

    pub fn node_has_allocations(&self, node: &NodeId) -> bool {
        self.allocated.get(node).map(|v| !v.is_all_zero()).unwrap_or(false)
    }

    fn free_on(&self, registry: &Registry, node: &NodeId, rtype: &ResourceType) -> u64 {
        let capacity = registry.node(node).map(|n| n.capacity.get(rtype)).unwrap_or(0);
        let used = self.allocated.get(node).map(|v| v.get(rtype)).unwrap_or(0);
        capacity.saturating_sub(used)
    }

    /// Scores every eligible node for one requirement and returns them
    /// best-first (ties by ascending node id). The returned list is the
    /// greedy fill order.
    pub fn rank_candidates(
        &self,
        registry: &Registry,
        perf: &PerformanceView,
        weights: &ScoringWeights,
        requirement: &Requirement,
        booked_until: Epoch,
        duration: u64,
    ) -> Result<Vec<RankedCandidate>> {
        let in_locality: Vec<&crate::registry::ScalerNode> = registry
            .active_nodes()
            .filter(|n| {
                requirement.locality.as_ref().map(|set| set.contains(&n.region)).unwrap_or(true)
            })
            .collect();
        if in_locality.is_empty() {
            return Err(CompositionError::LocalityUnsatisfiable(requirement.rtype.clone()));
        }
        let eligible: Vec<&crate::registry::ScalerNode> = in_locality
            .into_iter()
            .filter(|n| n.max_booking_duration >= duration && n.commitment_end >= booked_until)
            .filter(|n| meets_min_kpi(requirement, &n.id, perf))
            .collect();
        if eligible.is_empty() {
            return Err(CompositionError::KpiUnsatisfiable(requirement.rtype.clone()));
        }
        let with_free: Vec<(&crate::registry::ScalerNode, u64)> = eligible
            .into_iter()
            .map(|n| {
                let free = self.free_on(registry, &n.id, &requirement.rtype);
                (n, free)
            })
            .filter(|(_, free)| *free > 0)
            .collect();
        let available: u64 = with_free.iter().map(|(_, f)| f).sum();
        if available < requirement.quantity {
            return Err(CompositionError::InsufficientCapacity {
                rtype: requirement.rtype.clone(),
                needed: requirement.quantity,
                available,
            });
        }

        let min_price = with_free.iter().map(|(n, _)| n.reservation_price.0).min().unwrap();
        let max_free = with_free.iter().map(|(_, f)| *f).max().unwrap();
        let overflow =
            || CompositionError::InvalidParameters("score arithmetic overflow".to_string());

        let mut ranked = Vec::with_capacity(with_free.len());
        for (node, free) in with_free {
            let perf_score = performance_score(registry, perf, &node.id);
            let price_score = if node.reservation_price.0 == min_price {
                Rational::one()
            } else {
                Rational::new(min_price, node.reservation_price.0)
            };
            let avail_score = Rational::new(free as u128, max_free as u128);
            let score = weights
                .performance
                .checked_mul(&perf_score)
                .and_then(|p| {
                    weights.price.checked_mul(&price_score).and_then(|q| p.checked_add(&q))
                })
                .and_then(|pq| {
                    weights
                        .availability
                        .checked_mul(&avail_score)
                        .and_then(|a| pq.checked_add(&a))
                })
                .ok_or_else(overflow)?;
            ranked.push(RankedCandidate {
                node: node.id.clone(),
                score,
                free,
                reservation_price: node.reservation_price,
            });
        }
        ranked.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.node.cmp(&b.node)));
        Ok(ranked)
    }

    /// Plans a deployment without mutating the pool. The returned instance
    /// carries the frozen prices; commit it with [`Composer::commit`] once
    /// the first-epoch fee has cleared.
    #[allow(clippy::too_many_arguments)]
    pub fn plan(
        &self,
        registry: &Registry,
        perf: &PerformanceView,
        weights: &ScoringWeights,
        id: InstanceId,
        owner: AccountId,
        blueprint: Option<BlueprintId>,
        requirements: Vec<Requirement>,
        elastic: Option<ElasticBounds>,
        services: Vec<ServiceId>,
        duration: u64,
        now: Epoch,
    ) -> Result<Instance> {
        if self.instances.contains_key(&id) {
            return Err(CompositionError::DuplicateInstance(id));
        }
        if duration == 0 {
            return Err(CompositionError::InvalidParameters("duration must be positive".into()));
        }
        validate_requirements(&requirements)?;
        if let Some(el) = &elastic {
            validate_elastic(el)?;
        }
        let booked_until = now.saturating_add(duration);

        // Fill requirement by requirement against a scratch view of the
        // pool, so one deploy's own picks reduce capacity for its later
        // requirements.
        let mut scratch = self.clone();
        let mut allocations: Vec<ResourceUnit> = Vec::new();
        let mut fixed_unit_prices: BTreeMap<ResourceType, TokenAmount> = BTreeMap::new();
        for requirement in &requirements {
            let ranked =
                scratch.rank_candidates(registry, perf, weights, requirement, booked_until, duration)?;
            let mut remaining = requirement.quantity;
            for candidate in ranked {
                if remaining == 0 {
                    break;
                }
                let take = remaining.min(candidate.free);
                let region = registry.node(&candidate.node).unwrap().region.clone();
                allocations.push(ResourceUnit {
                    node: candidate.node.clone(),
                    rtype: requirement.rtype.clone(),
                    quantity: take,
                    region,
                });
                scratch
                    .allocated
                    .entry(candidate.node.clone())
                    .or_default()
                    .add_entry(&requirement.rtype, take);
                // The instance pays one price per type: the highest
                // reservation price among its selected nodes, frozen for
                // the booking's life.
                let slot =
                    fixed_unit_prices.entry(requirement.rtype.clone()).or_insert(TokenAmount::ZERO);
                if candidate.reservation_price > *slot {
                    *slot = candidate.reservation_price;
                }
                remaining -= take;
            }
            debug_assert_eq!(remaining, 0, "ranked candidates guarantee feasibility");
        }

        Ok(Instance {
            id,
            owner,
            allocations,
            blueprint,
            requirements,
            booked_at: now,
            booked_until,
            paid_through: now,
            fixed_unit_prices,
            elastic,
            services,
        })
    }

    /// Records a planned instance and marks its units allocated.
    pub fn commit(&mut self, instance: Instance) -> Result<()> {
        if self.instances.contains_key(&instance.id) {
            return Err(CompositionError::DuplicateInstance(instance.id.clone()));
        }
        for unit in &instance.allocations {
            self.allocated.entry(unit.node.clone()).or_default().add_entry(&unit.rtype, unit.quantity);
        }
        self.instances.insert(instance.id.clone(), instance);
        Ok(())
    }

    /// Adjusts one resource type of an elastic instance by `delta` units.
    /// Growth allocates at the instance's frozen prices; shrink releases
    /// units back to the pool immediately, from the highest node id down.
    #[allow(clippy::too_many_arguments)]
    pub fn scale(
        &mut self,
        registry: &Registry,
        perf: &PerformanceView,
        weights: &ScoringWeights,
        id: &InstanceId,
        rtype: &ResourceType,
        delta: i64,
        now: Epoch,
    ) -> Result<()> {
        let instance =
            self.instances.get(id).ok_or_else(|| CompositionError::UnknownInstance(id.clone()))?;
        let elastic = instance.elastic.ok_or(CompositionError::NotElastic)?;
        let base = instance.base_quantity(rtype);
        let current = instance.allocated_quantity(rtype);
        let requested = if delta >= 0 {
            current.checked_add(delta as u64)
        } else {
            current.checked_sub(delta.unsigned_abs())
        }
        .ok_or_else(|| CompositionError::InvalidParameters("quantity underflow".into()))?;

        // requested must satisfy min_factor * base <= requested <= max_factor * base.
        let low_ok = elastic.min_factor.le_scaled(base as u128, requested as u128);
        let high_ok = elastic.max_factor.ge_scaled(base as u128, requested as u128);
        if base == 0 || !high_ok || !low_ok {
            return Err(CompositionError::BoundsExceeded {
                rtype: rtype.clone(),
                requested,
                low: elastic.min_factor.mul_floor(base as u128).unwrap_or(0) as u64,
                high: elastic.max_factor.mul_floor(base as u128).unwrap_or(0) as u64,
            });
        }

        if requested > current {
            // Growth: merged constraint across the instance's requirements
            // of this type (intersection of localities, max of thresholds).
            let requirement = merged_requirement(&instance.requirements, rtype, requested - current)
                .ok_or_else(|| {
                    CompositionError::InvalidParameters(format!(
                        "instance has no requirement of type {rtype}"
                    ))
                })?;
            let duration = instance.booked_until.0.saturating_sub(now.0);
            let ranked = self.rank_candidates(
                registry,
                perf,
                weights,
                &requirement,
                instance.booked_until,
                duration,
            )?;
            let mut remaining = requirement.quantity;
            let mut new_units = Vec::new();
            for candidate in ranked {
                if remaining == 0 {
                    break;
                }
                let take = remaining.min(candidate.free);
                let region = registry.node(&candidate.node).unwrap().region.clone();
                new_units.push(ResourceUnit {
                    node: candidate.node,
                    rtype: rtype.clone(),
                    quantity: take,
                    region,
                });
                remaining -= take;
            }
            for unit in &new_units {
                self.allocated.entry(unit.node.clone()).or_default().add_entry(rtype, unit.quantity);
            }
            let instance = self.instances.get_mut(id).unwrap();
            instance.allocations.extend(new_units);
        } else if requested < current {
            let mut to_release = current - requested;
            let instance = self.instances.get_mut(id).unwrap();
            // Deterministic shrink order: reverse of the allocation
            // tie-break, so the least-preferred placements go first.
            let mut order: Vec<usize> = (0..instance.allocations.len())
                .filter(|&i| &instance.allocations[i].rtype == rtype)
                .collect();
            order.sort_by(|&a, &b| {
                instance.allocations[b].node.cmp(&instance.allocations[a].node)
            });
            let mut released: Vec<(NodeId, u64)> = Vec::new();
            for idx in order {
                if to_release == 0 {
                    break;
                }
                let unit = &mut instance.allocations[idx];
                let give = unit.quantity.min(to_release);
                unit.quantity -= give;
                to_release -= give;
                released.push((unit.node.clone(), give));
            }
            instance.allocations.retain(|u| u.quantity > 0);
            for (node, give) in released {
                self.allocated.entry(node).or_default().saturating_sub_entry(rtype, give);
            }
        }
        Ok(())
    }

    /// Tears the instance down and returns its units to the pool. Fees stop
    /// accruing from the next epoch; the current epoch stays paid.
    pub fn release(&mut self, id: &InstanceId) -> Result<Instance> {
        let instance =
            self.instances.remove(id).ok_or_else(|| CompositionError::UnknownInstance(id.clone()))?;
        for unit in &instance.allocations {
            self.allocated
                .entry(unit.node.clone())
                .or_default()
                .saturating_sub_entry(&unit.rtype, unit.quantity);
        }
        Ok(instance)
    }

    /// Extends the booking at the original frozen prices. All-or-nothing:
    /// every backing provider must accept, and every backing node's
    /// commitment must cover the new horizon.
    pub fn extend_reservation(
        &mut self,
        registry: &Registry,
        id: &InstanceId,
        extra: u64,
        provider_accepts: &BTreeMap<NodeId, bool>,
    ) -> Result<Epoch> {
        let instance =
            self.instances.get(id).ok_or_else(|| CompositionError::UnknownInstance(id.clone()))?;
        if extra == 0 {
            return Err(CompositionError::InvalidParameters("extension must be positive".into()));
        }
        let new_until = instance.booked_until.saturating_add(extra);
        let mut nodes: Vec<NodeId> =
            instance.allocations.iter().map(|u| u.node.clone()).collect();
        nodes.sort();
        nodes.dedup();
        for node_id in &nodes {
            if !provider_accepts.get(node_id).copied().unwrap_or(false) {
                return Err(CompositionError::ProviderDeclined(node_id.clone()));
            }
            let node = registry
                .node(node_id)
                .ok_or_else(|| CompositionError::InvalidParameters(format!("node {node_id} missing")))?;
            if node.commitment_end < new_until {
                return Err(CompositionError::CommitmentTooShort(node_id.clone()));
            }
        }
        self.instances.get_mut(id).unwrap().booked_until = new_until;
        Ok(new_until)
    }

    /// Marks the epoch fee paid. Returns the amount due (zero if already
    /// paid through `epoch`).
    pub fn mark_billed(&mut self, id: &InstanceId, epoch: Epoch) -> Result<TokenAmount> {
        let instance =
            self.instances.get_mut(id).ok_or_else(|| CompositionError::UnknownInstance(id.clone()))?;
        if instance.paid_through >= epoch {
            return Ok(TokenAmount::ZERO);
        }
        instance.paid_through = epoch;
        Ok(instance.epoch_fee())
    }

    /// Removes instances whose booking ended (booked_until <= now) and
    /// returns them, units already back in the pool.
    pub fn expire(&mut self, now: Epoch) -> Vec<Instance> {
        let expired: Vec<InstanceId> = self
            .instances
            .values()
            .filter(|i| i.booked_until <= now)
            .map(|i| i.id.clone())
            .collect();
        expired.into_iter().map(|id| self.release(&id).unwrap()).collect()
    }

    /// Recomputes allocation totals from raw instance records and checks
    /// them against the cache and against node capacities. Returns a
    /// description of the first violation found.
    pub fn check_consistency(&self, registry: &Registry) -> std::result::Result<(), String> {
        let mut recomputed: BTreeMap<NodeId, CapacityVector> = BTreeMap::new();
        for instance in self.instances.values() {
            for unit in &instance.allocations {
                if unit.quantity == 0 {
                    return Err(format!("instance {} holds a zero-quantity unit", instance.id));
                }
                recomputed.entry(unit.node.clone()).or_default().add_entry(&unit.rtype, unit.quantity);
            }
        }
        let normalized = |m: &BTreeMap<NodeId, CapacityVector>| -> BTreeMap<NodeId, CapacityVector> {
            m.iter()
                .filter(|(_, v)| !v.is_all_zero())
                .map(|(k, v)| {
                    let trimmed: CapacityVector =
                        v.iter().filter(|(_, &q)| q > 0).map(|(t, &q)| (t.clone(), q)).collect();
                    (k.clone(), trimmed)
                })
                .collect()
        };
        if normalized(&recomputed) != normalized(&self.allocated) {
            return Err("allocation cache diverged from instance records".into());
        }
        for (node_id, used) in &recomputed {
            let node = registry
                .node(node_id)
                .ok_or_else(|| format!("allocation references unknown node {node_id}"))?;
            for (rtype, &q) in used.iter() {
                if q > node.capacity.get(rtype) {
                    return Err(format!(
                        "double allocation on {node_id}/{rtype}: {q} > capacity {}",
                        node.capacity.get(rtype)
                    ));
                }
            }
        }
        // Locality soundness: every unit's region must appear in the
        // locality set of some same-type requirement of its instance.
        for instance in self.instances.values() {
            for unit in &instance.allocations {
                let admissible = instance
                    .requirements
                    .iter()
                    .filter(|r| r.rtype == unit.rtype)
                    .any(|r| r.locality.as_ref().map(|s| s.contains(&unit.region)).unwrap_or(true));
                if !admissible && instance.requirements.iter().any(|r| r.rtype == unit.rtype) {
                    return Err(format!(
                        "instance {} holds {} in region {} outside its locality sets",
                        instance.id, unit.rtype, unit.region
                    ));
                }
            }
        }
        Ok(())
    }
}

fn validate_requirements(requirements: &[Requirement]) -> Result<()> {
    if requirements.is_empty() {
        return Err(CompositionError::MalformedBlueprint("requirements must not be empty".into()));
    }
    for r in requirements {
        if r.quantity == 0 {
            return Err(CompositionError::MalformedBlueprint(format!(
                "requirement for {} has zero quantity",
                r.rtype
            )));
        }
        if let Some(set) = &r.locality {
            if set.is_empty() {
                return Err(CompositionError::MalformedBlueprint(format!(
                    "requirement for {} has an empty locality set",
                    r.rtype
                )));
            }
        }
    }
    Ok(())
}

fn validate_elastic(el: &ElasticBounds) -> Result<()> {
    let one = Rational::one();
    if el.min_factor > one || el.max_factor < one {
        return Err(CompositionError::MalformedBlueprint(
            "elastic bounds must satisfy min_factor <= 1 <= max_factor".into(),
        ));
    }
    Ok(())
}

fn meets_min_kpi(requirement: &Requirement, node: &NodeId, perf: &PerformanceView) -> bool {
    let Some(thresholds) = &requirement.min_kpi else { return true };
    let Some(report) = perf.get(node) else { return false };
    thresholds.iter().all(|(kpi, min)| report.get(kpi).map(|v| v >= min).unwrap_or(false))
}

/// Mean of per-KPI scores against the class's nominal profile, each clamped
/// to [0, 1]. Nodes without any aggregated report score zero.
fn performance_score(registry: &Registry, perf: &PerformanceView, node: &NodeId) -> Rational {
    let Some(node_record) = registry.node(node) else { return Rational::zero() };
    let Some(class) = registry.class(&node_record.class) else { return Rational::zero() };
    let profile = &class.performance_profile;
    let Some(report) = perf.get(node) else { return Rational::zero() };
    if profile.is_empty() {
        return Rational::zero();
    }
    let mut sum = Rational::zero();
    for (kpi, &nominal) in profile {
        let measured = report.get(kpi).copied().unwrap_or(0);
        let ratio = if nominal == 0 || measured >= nominal {
            Rational::one()
        } else {
            Rational::new(measured as u128, nominal as u128)
        };
        sum = sum.checked_add(&ratio).unwrap_or_else(Rational::one);
    }
    sum.checked_mul(&Rational::new(1, profile.len() as u128)).unwrap_or_else(Rational::zero)
}

/// Collapses same-type requirements into one constraint for scaling:
/// locality intersected, thresholds maxed.
fn merged_requirement(
    requirements: &[Requirement],
    rtype: &ResourceType,
    quantity: u64,
) -> Option<Requirement> {
    let same: Vec<&Requirement> = requirements.iter().filter(|r| &r.rtype == rtype).collect();
    if same.is_empty() {
        return None;
    }
    let mut locality: Option<BTreeSet<RegionId>> = None;
    for r in &same {
        if let Some(set) = &r.locality {
            locality = Some(match locality {
                None => set.clone(),
                Some(acc) => acc.intersection(set).cloned().collect(),
            });
        }
    }
    let mut min_kpi: BTreeMap<String, u64> = BTreeMap::new();
    for r in &same {
        if let Some(thresholds) = &r.min_kpi {
            for (kpi, &min) in thresholds {
                let slot = min_kpi.entry(kpi.clone()).or_insert(0);
                *slot = (*slot).max(min);
            }
        }
    }
    Some(Requirement {
        rtype: rtype.clone(),
        quantity,
        locality,
        min_kpi: if min_kpi.is_empty() { None } else { Some(min_kpi) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{CollateralRates, HardwareClass};
    use crate::types::{ChallengeKindId, ClassId, ResourceKind};

    fn storage_type() -> ResourceType {
        ResourceType::new(ResourceKind::Storage)
    }

    fn storage(q: u64) -> CapacityVector {
        let mut v = CapacityVector::new();
        v.set(storage_type(), q);
        v
    }

    fn registry_with_nodes(nodes: &[(&str, &str, u64, u128)]) -> Registry {
        // (id, region, capacity, price)
        let mut r = Registry::new();
        r.add_region(RegionId::from("eu"));
        r.add_region(RegionId::from("us"));
        r.add_class(HardwareClass {
            id: ClassId::from("std"),
            capacity_template: storage(1),
            performance_profile: [("read_throughput".to_string(), 100_000u64)].into(),
            challenge_set: vec![ChallengeKindId::from("storage-read")],
        })
        .unwrap();
        let rates = CollateralRates::default();
        for (id, region, cap, price) in nodes {
            r.register_node(
                NodeId::from(*id),
                AccountId::from("provider"),
                ClassId::from("std"),
                RegionId::from(*region),
                storage(*cap),
                Rational::new(7, 10),
                TokenAmount(*price),
                100,
                Epoch(1000),
                Epoch(0),
            )
            .unwrap();
            r.activate(&NodeId::from(*id), TokenAmount::ZERO, &rates).unwrap();
        }
        r
    }

    fn requirement(q: u64, locality: Option<&[&str]>) -> Requirement {
        Requirement {
            rtype: storage_type(),
            quantity: q,
            locality: locality
                .map(|rs| rs.iter().map(|r| RegionId::from(*r)).collect::<BTreeSet<_>>()),
            min_kpi: None,
        }
    }

    fn deploy(
        composer: &mut Composer,
        registry: &Registry,
        perf: &PerformanceView,
        id: &str,
        req: Requirement,
        elastic: Option<ElasticBounds>,
    ) -> Result<Instance> {
        let planned = composer.plan(
            registry,
            perf,
            &ScoringWeights::default(),
            InstanceId::from(id),
            AccountId::from("user"),
            None,
            vec![req],
            elastic,
            vec![],
            10,
            Epoch(0),
        )?;
        composer.commit(planned.clone())?;
        Ok(planned)
    }

    #[test]
    fn locality_restricts_allocation() {
        let registry =
            registry_with_nodes(&[("eu-node", "eu", 200, 2), ("us-node", "us", 500, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let instance = deploy(
            &mut composer,
            &registry,
            &perf,
            "i1",
            requirement(100, Some(&["eu"])),
            None,
        )
        .unwrap();
        assert_eq!(instance.allocations.len(), 1);
        assert_eq!(instance.allocations[0].node, NodeId::from("eu-node"));
        assert_eq!(instance.allocations[0].quantity, 100);
        composer.check_consistency(&registry).unwrap();
    }

    #[test]
    fn no_node_in_locality_is_locality_error() {
        let registry = registry_with_nodes(&[("us-node", "us", 500, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let err = deploy(
            &mut composer,
            &registry,
            &perf,
            "i1",
            requirement(100, Some(&["eu"])),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CompositionError::LocalityUnsatisfiable(_)));
    }

    #[test]
    fn demand_beyond_pool_is_insufficient_capacity() {
        let registry = registry_with_nodes(&[("n1", "eu", 50, 1), ("n2", "eu", 40, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let err =
            deploy(&mut composer, &registry, &perf, "i1", requirement(100, None), None).unwrap_err();
        assert_eq!(
            err,
            CompositionError::InsufficientCapacity {
                rtype: storage_type(),
                needed: 100,
                available: 90
            }
        );
    }

    #[test]
    fn min_kpi_filters_candidates() {
        let registry = registry_with_nodes(&[("n1", "eu", 100, 1), ("n2", "eu", 100, 1)]);
        let mut perf = PerformanceView::new();
        perf.insert(NodeId::from("n1"), [("read_throughput".to_string(), 50_000u64)].into());
        perf.insert(NodeId::from("n2"), [("read_throughput".to_string(), 90_000u64)].into());
        let mut composer = Composer::new();
        let mut req = requirement(40, None);
        req.min_kpi = Some([("read_throughput".to_string(), 80_000u64)].into());
        let instance = deploy(&mut composer, &registry, &perf, "i1", req, None).unwrap();
        assert_eq!(instance.allocations[0].node, NodeId::from("n2"));

        // Threshold nobody meets -> KpiUnsatisfiable.
        let mut composer = Composer::new();
        let mut req = requirement(40, None);
        req.min_kpi = Some([("read_throughput".to_string(), 95_000u64)].into());
        let err = deploy(&mut composer, &registry, &perf, "i2", req, None).unwrap_err();
        assert!(matches!(err, CompositionError::KpiUnsatisfiable(_)));
    }

    #[test]
    fn equal_scores_tie_break_by_node_id() {
        let registry = registry_with_nodes(&[("nb", "eu", 100, 1), ("na", "eu", 100, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let instance =
            deploy(&mut composer, &registry, &perf, "i1", requirement(60, None), None).unwrap();
        assert_eq!(instance.allocations.len(), 1);
        assert_eq!(instance.allocations[0].node, NodeId::from("na"));
    }

    #[test]
    fn performance_weight_prefers_faster_node() {
        let registry = registry_with_nodes(&[("fast", "eu", 100, 1), ("slow", "eu", 100, 1)]);
        let mut perf = PerformanceView::new();
        perf.insert(NodeId::from("fast"), [("read_throughput".to_string(), 90_000u64)].into());
        perf.insert(NodeId::from("slow"), [("read_throughput".to_string(), 50_000u64)].into());
        let weights = ScoringWeights {
            performance: Rational::one(),
            price: Rational::zero(),
            availability: Rational::zero(),
        };
        let composer = Composer::new();
        let ranked = composer
            .rank_candidates(&registry, &perf, &weights, &requirement(10, None), Epoch(10), 10)
            .unwrap();
        assert_eq!(ranked[0].node, NodeId::from("fast"));
        assert_eq!(ranked[0].score, Rational::new(9, 10));
        assert_eq!(ranked[1].score, Rational::new(1, 2));
    }

    #[test]
    fn price_weight_prefers_cheaper_node() {
        let registry = registry_with_nodes(&[("cheap", "eu", 100, 2), ("dear", "eu", 100, 6)]);
        let weights = ScoringWeights {
            performance: Rational::zero(),
            price: Rational::one(),
            availability: Rational::zero(),
        };
        let composer = Composer::new();
        let perf = PerformanceView::new();
        let ranked = composer
            .rank_candidates(&registry, &perf, &weights, &requirement(10, None), Epoch(10), 10)
            .unwrap();
        assert_eq!(ranked[0].node, NodeId::from("cheap"));
        assert_eq!(ranked[0].score, Rational::one());
        assert_eq!(ranked[1].score, Rational::new(1, 3));
    }

    #[test]
    fn demand_splits_across_nodes_best_first() {
        let registry = registry_with_nodes(&[("n1", "eu", 60, 1), ("n2", "eu", 60, 3)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let instance =
            deploy(&mut composer, &registry, &perf, "i1", requirement(100, None), None).unwrap();
        let by_node = instance.units_by_node();
        assert_eq!(by_node[&(NodeId::from("n1"), storage_type())], 60);
        assert_eq!(by_node[&(NodeId::from("n2"), storage_type())], 40);
        // Frozen price is the max across selected nodes.
        assert_eq!(instance.fixed_unit_prices[&storage_type()], TokenAmount(3));
        assert_eq!(instance.epoch_fee(), TokenAmount(300));
    }

    #[test]
    fn deploy_release_round_trips_capability_map() {
        let registry = registry_with_nodes(&[("n1", "eu", 100, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let region = RegionId::from("eu");
        let before = registry.capability_map(&region, composer.allocated()).unwrap();
        deploy(&mut composer, &registry, &perf, "i1", requirement(40, None), None).unwrap();
        let during = registry.capability_map(&region, composer.allocated()).unwrap();
        assert_eq!(during.get(&storage_type()), 60);
        composer.release(&InstanceId::from("i1")).unwrap();
        let after = registry.capability_map(&region, composer.allocated()).unwrap();
        assert_eq!(before, after);
        // Double release.
        assert!(matches!(
            composer.release(&InstanceId::from("i1")),
            Err(CompositionError::UnknownInstance(_))
        ));
    }

    #[test]
    fn elastic_scale_bounds() {
        let registry = registry_with_nodes(&[("n1", "eu", 300, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let elastic = Some(ElasticBounds {
            min_factor: Rational::new(1, 2),
            max_factor: Rational::new(2, 1),
        });
        deploy(&mut composer, &registry, &perf, "i1", requirement(100, None), elastic).unwrap();
        let weights = ScoringWeights::default();
        let id = InstanceId::from("i1");

        // +100 reaches the 2.0x bound exactly.
        composer.scale(&registry, &perf, &weights, &id, &storage_type(), 100, Epoch(0)).unwrap();
        assert_eq!(composer.instance(&id).unwrap().allocated_quantity(&storage_type()), 200);
        // One more unit exceeds it.
        let err = composer
            .scale(&registry, &perf, &weights, &id, &storage_type(), 1, Epoch(0))
            .unwrap_err();
        assert!(matches!(err, CompositionError::BoundsExceeded { requested: 201, .. }));
        // Shrinking to 40 would undercut min_factor 0.5 x 100 = 50.
        let err = composer
            .scale(&registry, &perf, &weights, &id, &storage_type(), -160, Epoch(0))
            .unwrap_err();
        assert!(matches!(err, CompositionError::BoundsExceeded { requested: 40, .. }));
        // Shrinking to exactly 50 is fine and frees the pool.
        composer.scale(&registry, &perf, &weights, &id, &storage_type(), -150, Epoch(0)).unwrap();
        assert_eq!(composer.instance(&id).unwrap().allocated_quantity(&storage_type()), 50);
        assert_eq!(
            registry
                .capability_map(&RegionId::from("eu"), composer.allocated())
                .unwrap()
                .get(&storage_type()),
            250
        );
        composer.check_consistency(&registry).unwrap();
    }

    #[test]
    fn scale_without_elastic_is_rejected() {
        let registry = registry_with_nodes(&[("n1", "eu", 300, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        deploy(&mut composer, &registry, &perf, "i1", requirement(100, None), None).unwrap();
        let err = composer
            .scale(
                &registry,
                &perf,
                &ScoringWeights::default(),
                &InstanceId::from("i1"),
                &storage_type(),
                10,
                Epoch(0),
            )
            .unwrap_err();
        assert_eq!(err, CompositionError::NotElastic);
    }

    #[test]
    fn scale_up_keeps_frozen_prices() {
        let registry = registry_with_nodes(&[("n1", "eu", 100, 5)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        let elastic = Some(ElasticBounds {
            min_factor: Rational::new(1, 2),
            max_factor: Rational::new(2, 1),
        });
        deploy(&mut composer, &registry, &perf, "i1", requirement(40, None), elastic).unwrap();

        // Provider raises the price after booking; the instance must not see it.
        let mut registry = registry;
        registry.set_reservation_price(&NodeId::from("n1"), TokenAmount(50)).unwrap();
        composer
            .scale(
                &registry,
                &perf,
                &ScoringWeights::default(),
                &InstanceId::from("i1"),
                &storage_type(),
                20,
                Epoch(0),
            )
            .unwrap();
        let instance = composer.instance(&InstanceId::from("i1")).unwrap();
        assert_eq!(instance.fixed_unit_prices[&storage_type()], TokenAmount(5));
        assert_eq!(instance.epoch_fee(), TokenAmount(300)); // 60 units x 5
    }

    #[test]
    fn extend_reservation_needs_unanimous_acceptance() {
        let registry = registry_with_nodes(&[("n1", "eu", 60, 1), ("n2", "eu", 60, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        deploy(&mut composer, &registry, &perf, "i1", requirement(100, None), None).unwrap();
        let id = InstanceId::from("i1");

        let mut accepts: BTreeMap<NodeId, bool> =
            [(NodeId::from("n1"), true), (NodeId::from("n2"), false)].into();
        let err = composer.extend_reservation(&registry, &id, 5, &accepts).unwrap_err();
        assert_eq!(err, CompositionError::ProviderDeclined(NodeId::from("n2")));
        assert_eq!(composer.instance(&id).unwrap().booked_until, Epoch(10));

        accepts.insert(NodeId::from("n2"), true);
        let until = composer.extend_reservation(&registry, &id, 5, &accepts).unwrap();
        assert_eq!(until, Epoch(15));

        // Extension that outruns the node commitment (epoch 1000) fails.
        let err = composer.extend_reservation(&registry, &id, 100_000, &accepts).unwrap_err();
        assert!(matches!(err, CompositionError::CommitmentTooShort(_)));
    }

    #[test]
    fn expire_releases_at_booked_until() {
        let registry = registry_with_nodes(&[("n1", "eu", 100, 1)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        deploy(&mut composer, &registry, &perf, "i1", requirement(40, None), None).unwrap();
        assert!(composer.expire(Epoch(9)).is_empty());
        let expired = composer.expire(Epoch(10));
        assert_eq!(expired.len(), 1);
        assert!(composer.instances().is_empty());
        assert!(!composer.node_has_allocations(&NodeId::from("n1")));
    }

    #[test]
    fn billing_marks_paid_through() {
        let registry = registry_with_nodes(&[("n1", "eu", 100, 2)]);
        let mut composer = Composer::new();
        let perf = PerformanceView::new();
        deploy(&mut composer, &registry, &perf, "i1", requirement(40, None), None).unwrap();
        let id = InstanceId::from("i1");
        // Deploy epoch was prepaid.
        assert_eq!(composer.mark_billed(&id, Epoch(0)).unwrap(), TokenAmount::ZERO);
        assert_eq!(composer.mark_billed(&id, Epoch(1)).unwrap(), TokenAmount(80));
        assert_eq!(composer.mark_billed(&id, Epoch(1)).unwrap(), TokenAmount::ZERO);
    }

    // Brute-force oracle: enumerate every split of the demand across nodes
    // (unit granularity) and maximize total units x score.
    fn brute_force_best(ranked: &[RankedCandidate], demand: u64) -> Rational {
        fn go(cands: &[RankedCandidate], remaining: u64, acc: Rational) -> Option<Rational> {
            if remaining == 0 {
                return Some(acc);
            }
            let (first, rest) = cands.split_first()?;
            let mut best: Option<Rational> = None;
            for take in 0..=first.free.min(remaining) {
                let gain = first
                    .score
                    .checked_mul(&Rational::from_integer(take as u128))
                    .unwrap();
                if let Some(total) = go(rest, remaining - take, acc.checked_add(&gain).unwrap()) {
                    best = Some(match best {
                        None => total,
                        Some(b) if total > b => total,
                        Some(b) => b,
                    });
                }
            }
            best
        }
        go(ranked, demand, Rational::zero()).expect("demand known feasible")
    }

    #[test]
    fn greedy_matches_brute_force_on_small_pools() {
        let registry = registry_with_nodes(&[
            ("n1", "eu", 4, 1),
            ("n2", "eu", 6, 2),
            ("n3", "eu", 3, 5),
            ("n4", "us", 8, 1),
        ]);
        let mut perf = PerformanceView::new();
        perf.insert(NodeId::from("n1"), [("read_throughput".to_string(), 40_000u64)].into());
        perf.insert(NodeId::from("n2"), [("read_throughput".to_string(), 100_000u64)].into());
        perf.insert(NodeId::from("n4"), [("read_throughput".to_string(), 70_000u64)].into());
        let composer = Composer::new();
        let weights = ScoringWeights {
            performance: Rational::new(1, 2),
            price: Rational::new(3, 10),
            availability: Rational::new(1, 5),
        };
        for demand in [1u64, 5, 9, 15] {
            let req = requirement(demand, None);
            let ranked =
                composer.rank_candidates(&registry, &perf, &weights, &req, Epoch(10), 10).unwrap();
            // Greedy total: fill best-first.
            let mut remaining = demand;
            let mut greedy_total = Rational::zero();
            for c in &ranked {
                let take = remaining.min(c.free);
                greedy_total = greedy_total
                    .checked_add(&c.score.checked_mul(&Rational::from_integer(take as u128)).unwrap())
                    .unwrap();
                remaining -= take;
            }
            assert_eq!(remaining, 0);
            assert_eq!(greedy_total, brute_force_best(&ranked, demand), "demand {demand}");
        }
    }

    #[test]
    fn blueprint_validation() {
        let mut composer = Composer::new();
        let err = composer
            .register_blueprint(InstanceBlueprint {
                id: BlueprintId::from("empty"),
                requirements: vec![],
                elastic: None,
                services: vec![],
            })
            .unwrap_err();
        assert!(matches!(err, CompositionError::MalformedBlueprint(_)));

        let err = composer
            .register_blueprint(InstanceBlueprint {
                id: BlueprintId::from("bad-elastic"),
                requirements: vec![requirement(10, None)],
                elastic: Some(ElasticBounds {
                    min_factor: Rational::new(3, 2),
                    max_factor: Rational::new(2, 1),
                }),
                services: vec![],
            })
            .unwrap_err();
        assert!(matches!(err, CompositionError::MalformedBlueprint(_)));

        composer
            .register_blueprint(InstanceBlueprint {
                id: BlueprintId::from("ok"),
                requirements: vec![requirement(10, Some(&["eu"]))],
                elastic: None,
                services: vec![ServiceId::from("db")],
            })
            .unwrap();
        assert!(composer.blueprint(&BlueprintId::from("ok")).is_some());
    }

    #[test]
    fn deterministic_allocation() {
        let build = || {
            let registry = registry_with_nodes(&[
                ("n1", "eu", 60, 2),
                ("n2", "eu", 60, 1),
                ("n3", "us", 60, 1),
            ]);
            let mut composer = Composer::new();
            let perf = PerformanceView::new();
            deploy(&mut composer, &registry, &perf, "i1", requirement(150, None), None).unwrap()
        };
        assert_eq!(build(), build());
    }
}

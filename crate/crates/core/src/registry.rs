//! ScalerNode catalog: hardware classes, node registration, activation
//! against collateral minimums, suspension, retirement, and the per-region
//! capability map.
//!
//! The registry tracks node lifecycle only. Token custody lives in the
//! ledger and allocation bookkeeping in the composition layer; callers pass
//! the relevant figures in (locked collateral, live allocations) so each
//! module stays independently testable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    AccountId, CapacityVector, ChallengeKindId, ClassId, Epoch, NodeId, Rational, RegionId,
    ResourceType, TokenAmount,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown hardware class {0}")]
    UnknownClass(ClassId),
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is already registered")]
    DuplicateNode(NodeId),
    #[error("hardware class {0} is already defined")]
    DuplicateClass(ClassId),
    #[error("capacity does not conform to class template: {0}")]
    MalformedCapacity(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("commitment must end after the current epoch")]
    InvalidCommitment,
    #[error("insufficient collateral: locked {locked}, minimum {required}")]
    InsufficientCollateral { locked: TokenAmount, required: TokenAmount },
    #[error("node {node} is {status:?}; operation not allowed")]
    InvalidStatus { node: NodeId, status: NodeStatus },
    #[error("commitment runs until epoch {until}")]
    CommitmentActive { until: Epoch },
    #[error("node still backs live allocations")]
    AllocationsOutstanding,
}

type Result<T> = std::result::Result<T, RegistryError>;

/// Hardware class template nodes register under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareClass {
    pub id: ClassId,
    pub capacity_template: CapacityVector,
    /// KPI name -> nominal value in milli-units (e.g. throughput, iops).
    pub performance_profile: BTreeMap<String, u64>,
    pub challenge_set: Vec<ChallengeKindId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Registered,
    Active,
    Suspended,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalerNode {
    pub id: NodeId,
    pub provider: AccountId,
    pub class: ClassId,
    pub region: RegionId,
    pub capacity: CapacityVector,
    /// Provider's fraction of node revenue; the rest goes to stakers.
    pub rewards_share: Rational,
    /// Price per canonical capacity unit per epoch.
    pub reservation_price: TokenAmount,
    pub max_booking_duration: u64,
    pub commitment_end: Epoch,
    pub status: NodeStatus,
    pub registered_at: Epoch,
}

impl ScalerNode {
    /// Total canonical units across all resource types.
    pub fn total_units(&self) -> u64 {
        self.capacity.iter().map(|(_, q)| q).sum()
    }
}

/// Per-unit collateral rates. Lookup tries the full type ("storage:fast")
/// first, then falls back to the bare kind ("storage"); unlisted types
/// require no collateral.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CollateralRates(pub BTreeMap<String, TokenAmount>);

impl CollateralRates {
    pub fn rate_for(&self, rtype: &ResourceType) -> TokenAmount {
        self.0
            .get(&rtype.to_string())
            .or_else(|| self.0.get(rtype.kind.as_str()))
            .copied()
            .unwrap_or(TokenAmount::ZERO)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    regions: Vec<RegionId>,
    classes: BTreeMap<ClassId, HardwareClass>,
    nodes: BTreeMap<NodeId, ScalerNode>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn add_region(&mut self, region: RegionId) {
        if !self.regions.contains(&region) {
            self.regions.push(region);
            self.regions.sort();
        }
    }

    pub fn region_exists(&self, region: &RegionId) -> bool {
        self.regions.contains(region)
    }

    pub fn regions(&self) -> &[RegionId] {
        &self.regions
    }

    pub fn add_class(&mut self, class: HardwareClass) -> Result<()> {
        if self.classes.contains_key(&class.id) {
            return Err(RegistryError::DuplicateClass(class.id));
        }
        if class.capacity_template.is_all_zero() {
            return Err(RegistryError::InvalidParameters(
                "capacity template must have a positive quantity".into(),
            ));
        }
        if class.challenge_set.is_empty() {
            return Err(RegistryError::InvalidParameters(
                "challenge set must not be empty".into(),
            ));
        }
        self.classes.insert(class.id.clone(), class);
        Ok(())
    }

    pub fn class(&self, id: &ClassId) -> Option<&HardwareClass> {
        self.classes.get(id)
    }

    pub fn classes(&self) -> &BTreeMap<ClassId, HardwareClass> {
        &self.classes
    }

    pub fn node(&self, id: &NodeId) -> Option<&ScalerNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, ScalerNode> {
        &self.nodes
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = &ScalerNode> {
        self.nodes.values().filter(|n| n.status == NodeStatus::Active)
    }

    /// Registers a node in `Registered` status. It joins the resource pool
    /// only after `activate`.
    #[allow(clippy::too_many_arguments)]
    pub fn register_node(
        &mut self,
        id: NodeId,
        provider: AccountId,
        class: ClassId,
        region: RegionId,
        capacity: CapacityVector,
        rewards_share: Rational,
        reservation_price: TokenAmount,
        max_booking_duration: u64,
        commitment_end: Epoch,
        now: Epoch,
    ) -> Result<()> {
        if self.nodes.contains_key(&id) {
            return Err(RegistryError::DuplicateNode(id));
        }
        let template = &self
            .classes
            .get(&class)
            .ok_or_else(|| RegistryError::UnknownClass(class.clone()))?
            .capacity_template;
        if !self.region_exists(&region) {
            return Err(RegistryError::UnknownRegion(region));
        }
        // Capacity must cover exactly the template's resource types, each an
        // integer multiple >= 1 of the template quantity.
        for (rtype, &base) in template.iter() {
            let q = capacity.get(rtype);
            if base == 0 {
                if q != 0 {
                    return Err(RegistryError::MalformedCapacity(format!(
                        "{rtype} not offered by class"
                    )));
                }
                continue;
            }
            if q < base || !q.is_multiple_of(base) {
                return Err(RegistryError::MalformedCapacity(format!(
                    "{rtype}: {q} is not a positive multiple of template {base}"
                )));
            }
        }
        for (rtype, &q) in capacity.iter() {
            if q > 0 && template.get(rtype) == 0 {
                return Err(RegistryError::MalformedCapacity(format!(
                    "{rtype} not in class template"
                )));
            }
        }
        if !rewards_share.in_unit_interval() {
            return Err(RegistryError::InvalidParameters(
                "rewards_share must be within [0, 1]".into(),
            ));
        }
        if max_booking_duration == 0 {
            return Err(RegistryError::InvalidParameters(
                "max_booking_duration must be positive".into(),
            ));
        }
        if commitment_end <= now {
            return Err(RegistryError::InvalidCommitment);
        }
        self.nodes.insert(
            id.clone(),
            ScalerNode {
                id,
                provider,
                class,
                region,
                capacity,
                rewards_share,
                reservation_price,
                max_booking_duration,
                commitment_end,
                status: NodeStatus::Registered,
                registered_at: now,
            },
        );
        Ok(())
    }

    /// Minimum collateral for a node: sum over resource types of
    /// quantity x per-unit rate.
    pub fn min_collateral(&self, node: &NodeId, rates: &CollateralRates) -> Result<TokenAmount> {
        let node = self.nodes.get(node).ok_or_else(|| RegistryError::UnknownNode(node.clone()))?;
        let mut total = TokenAmount::ZERO;
        for (rtype, &q) in node.capacity.iter() {
            let due = rates
                .rate_for(rtype)
                .checked_mul(q as u128)
                .ok_or_else(|| RegistryError::InvalidParameters("collateral overflow".into()))?;
            total = total
                .checked_add(due)
                .ok_or_else(|| RegistryError::InvalidParameters("collateral overflow".into()))?;
        }
        Ok(total)
    }

    /// Moves a Registered or Suspended node to Active, provided `locked`
    /// collateral meets the node's minimum. Idempotent on Active nodes.
    pub fn activate(
        &mut self,
        node_id: &NodeId,
        locked: TokenAmount,
        rates: &CollateralRates,
    ) -> Result<()> {
        let required = self.min_collateral(node_id, rates)?;
        let node = self.nodes.get_mut(node_id).unwrap();
        match node.status {
            NodeStatus::Active => Ok(()),
            NodeStatus::Retired => {
                Err(RegistryError::InvalidStatus { node: node_id.clone(), status: node.status })
            }
            NodeStatus::Registered | NodeStatus::Suspended => {
                if locked < required {
                    return Err(RegistryError::InsufficientCollateral { locked, required });
                }
                node.status = NodeStatus::Active;
                Ok(())
            }
        }
    }

    /// Pulls an Active node out of the pool (collateral shortfall). Its
    /// existing allocations keep running; it accepts no new ones.
    pub fn suspend(&mut self, node_id: &NodeId) -> Result<()> {
        let node =
            self.nodes.get_mut(node_id).ok_or_else(|| RegistryError::UnknownNode(node_id.clone()))?;
        match node.status {
            NodeStatus::Active => {
                node.status = NodeStatus::Suspended;
                Ok(())
            }
            NodeStatus::Suspended => Ok(()),
            _ => Err(RegistryError::InvalidStatus { node: node_id.clone(), status: node.status }),
        }
    }

    /// Terminal retirement once the commitment period has elapsed and no
    /// live allocations remain. `live_allocations` comes from the
    /// composition layer.
    pub fn retire(&mut self, node_id: &NodeId, now: Epoch, live_allocations: bool) -> Result<()> {
        let node =
            self.nodes.get_mut(node_id).ok_or_else(|| RegistryError::UnknownNode(node_id.clone()))?;
        if node.status == NodeStatus::Retired {
            return Ok(());
        }
        if now < node.commitment_end {
            return Err(RegistryError::CommitmentActive { until: node.commitment_end });
        }
        if live_allocations {
            return Err(RegistryError::AllocationsOutstanding);
        }
        node.status = NodeStatus::Retired;
        Ok(())
    }

    /// Updates the price new bookings on this node will be quoted at.
    /// Already-booked instances keep their frozen prices.
    pub fn set_reservation_price(&mut self, node_id: &NodeId, price: TokenAmount) -> Result<()> {
        let node =
            self.nodes.get_mut(node_id).ok_or_else(|| RegistryError::UnknownNode(node_id.clone()))?;
        if node.status == NodeStatus::Retired {
            return Err(RegistryError::InvalidStatus { node: node_id.clone(), status: node.status });
        }
        node.reservation_price = price;
        Ok(())
    }

    /// Residual free capacity per resource type across Active nodes in the
    /// region: total capacity minus `allocated` units per node.
    pub fn capability_map(
        &self,
        region: &RegionId,
        allocated: &BTreeMap<NodeId, CapacityVector>,
    ) -> Result<CapacityVector> {
        if !self.region_exists(region) {
            return Err(RegistryError::UnknownRegion(region.clone()));
        }
        let mut map = CapacityVector::new();
        for node in self.active_nodes().filter(|n| &n.region == region) {
            for (rtype, &q) in node.capacity.iter() {
                let used = allocated.get(&node.id).map(|v| v.get(rtype)).unwrap_or(0);
                map.add_entry(rtype, q.saturating_sub(used.min(q)));
            }
        }
        Ok(map)
    }
}

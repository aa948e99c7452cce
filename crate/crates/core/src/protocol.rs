//! The protocol facade: one deterministic state machine wiring the ledger,
//! registry, composer, enforcement, and economics together, exposing the
//! operations scenarios and the CLI drive.
//!
//! An epoch proceeds in a fixed order:
//!
//! 1. caller-applied events (register, deploy, stake, faults, ...)
//! 2. [`Protocol::run_enforcement`] — schedule, execute, aggregate, slash
//! 3. [`Protocol::settle_current_epoch`] — billing, rewards, emission
//! 4. [`Protocol::advance_epoch`] — decay, expiry, suspension sweep, eviction
//!
//! Fees always flow through the escrow account ([`ESCROW_ACCOUNT`]) and are
//! fully drained at settlement, so escrow holds zero between epochs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::composition::{
    Composer, CompositionError, ElasticBounds, Instance, InstanceBlueprint, Requirement,
    ScoringWeights,
};
use crate::economics::{Economics, EconomicsError, RegionEconomy, RewardStatement, SettlementSummary};
use crate::enforcement::{
    ChallengeSpec, ChallengeSubject, ChallengerFault, Enforcement, EnforcementError, FaultEvent,
};
use crate::ledger::{EpochSummary, Ledger, LedgerError, SlashOutcome, TargetId};
use crate::registry::{CollateralRates, HardwareClass, Registry, RegistryError};
use crate::types::{
    AccountId, BlueprintId, ChallengeKindId, Epoch, HyperNodeId, InstanceId, NftId, NodeId,
    Rational, RegionId, ServiceId, SubjectId, TokenAmount,
};

/// Account all instance fees pass through between charge and distribution.
pub const ESCROW_ACCOUNT: &str = "escrow:fees";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Enforcement(#[from] EnforcementError),
    #[error(transparent)]
    Economics(#[from] EconomicsError),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{0} is already defined")]
    DuplicateId(String),
}

type Result<T> = std::result::Result<T, ProtocolError>;

/// A deployment request with any blueprint reference expanded:
/// (blueprint, requirements, elastic bounds, attached services).
type ResolvedSpec = (Option<BlueprintId>, Vec<Requirement>, Option<ElasticBounds>, Vec<ServiceId>);

/// Global protocol parameters, fixed for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub seed: u64,
    /// Challenge replication factor k.
    pub replication: usize,
    /// Measurement noise amplitude in per-mille of nominal.
    pub noise_amplitude: u64,
    pub weights: ScoringWeights,
    /// Satellite store retention window in epochs.
    pub retention_epochs: u64,
    /// Severity applied when slashing a misbehaving challenger.
    pub challenger_slash_rate: Rational,
}

impl Default for ProtocolParams {
    fn default() -> ProtocolParams {
        ProtocolParams {
            seed: 0,
            replication: 3,
            noise_amplitude: 0,
            weights: ScoringWeights::default(),
            retention_epochs: 8,
            challenger_slash_rate: Rational::new(1, 10),
        }
    }
}

/// An integrated service block that can be challenged like hardware.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub id: ServiceId,
    /// KPI name -> nominal value in milli-units.
    pub performance_profile: BTreeMap<String, u64>,
}

/// A KPI fault injected on a subject for a bounded number of epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveFault {
    pub multiplier: Rational,
    /// First epoch at which the fault is no longer in effect.
    pub until: Epoch,
}

/// What one enforcement pass produced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnforcementOutcome {
    pub reports: usize,
    pub faults: Vec<FaultEvent>,
    pub challenger_faults: Vec<ChallengerFault>,
    pub slashes: Vec<SlashOutcome>,
}

/// What advancing the epoch changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceOutcome {
    pub ledger: EpochSummary,
    pub expired_instances: Vec<InstanceId>,
    pub suspended_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub params: ProtocolParams,
    pub ledger: Ledger,
    pub registry: Registry,
    pub composer: Composer,
    pub enforcement: Enforcement,
    pub economics: Economics,
    services: BTreeMap<ServiceId, ServiceSpec>,
    /// Collateral locks opened for each node, auto-released at retirement.
    node_locks: BTreeMap<NodeId, Vec<u64>>,
    fault_multipliers: BTreeMap<SubjectId, ActiveFault>,
    /// Per-node fee shares charged into escrow this epoch, awaiting
    /// settlement.
    pending_routes: BTreeMap<NodeId, TokenAmount>,
    /// Subjects whose aggregate verdict failed this epoch.
    failed_this_epoch: BTreeSet<SubjectId>,
}

impl Protocol {
    pub fn new(
        params: ProtocolParams,
        initial_balances: BTreeMap<AccountId, TokenAmount>,
        economies: BTreeMap<RegionId, RegionEconomy>,
    ) -> Protocol {
        let mut balances = initial_balances;
        balances.entry(AccountId::from(ESCROW_ACCOUNT)).or_insert(TokenAmount::ZERO);
        let mut registry = Registry::new();
        for region in economies.keys() {
            registry.add_region(region.clone());
        }
        let retention = params.retention_epochs;
        Protocol {
            params,
            ledger: Ledger::new(balances),
            registry,
            composer: Composer::new(),
            enforcement: Enforcement::new(retention),
            economics: Economics::new(economies),
            services: BTreeMap::new(),
            node_locks: BTreeMap::new(),
            fault_multipliers: BTreeMap::new(),
            pending_routes: BTreeMap::new(),
            failed_this_epoch: BTreeSet::new(),
        }
    }

    pub fn escrow_account() -> AccountId {
        AccountId::from(ESCROW_ACCOUNT)
    }

    pub fn current_epoch(&self) -> Epoch {
        self.ledger.current_epoch()
    }

    pub fn services(&self) -> &BTreeMap<ServiceId, ServiceSpec> {
        &self.services
    }

    pub fn active_faults(&self) -> &BTreeMap<SubjectId, ActiveFault> {
        &self.fault_multipliers
    }

    fn rates_for(&self, region: &RegionId) -> CollateralRates {
        self.economics
            .economy(region)
            .map(|e| e.collateral_rates.clone())
            .unwrap_or_default()
    }

    // ---- catalog management ----

    pub fn add_region(&mut self, region: RegionId) {
        self.registry.add_region(region);
    }

    pub fn add_class(&mut self, class: HardwareClass) -> Result<()> {
        self.registry.add_class(class)?;
        Ok(())
    }

    pub fn add_service(&mut self, service: ServiceSpec) -> Result<()> {
        if self.services.contains_key(&service.id) {
            return Err(ProtocolError::DuplicateId(format!("service {}", service.id)));
        }
        self.services.insert(service.id.clone(), service);
        Ok(())
    }

    pub fn add_blueprint(&mut self, blueprint: InstanceBlueprint) -> Result<()> {
        self.composer.register_blueprint(blueprint)?;
        Ok(())
    }

    pub fn register_challenge_spec(&mut self, spec: ChallengeSpec) -> Result<()> {
        let subject_known = match &spec.subject {
            ChallengeSubject::Class(class) => self.registry.class(class).is_some(),
            ChallengeSubject::Service(service) => self.services.contains_key(service),
        };
        self.enforcement.register_spec(spec, subject_known)?;
        Ok(())
    }

    // ---- node lifecycle ----

    /// Registers a node and locks `collateral` against it until
    /// commitment_end.
    #[allow(clippy::too_many_arguments)]
    pub fn register_node(
        &mut self,
        id: NodeId,
        provider: AccountId,
        class: crate::types::ClassId,
        region: RegionId,
        capacity: crate::types::CapacityVector,
        rewards_share: Rational,
        reservation_price: TokenAmount,
        max_booking_duration: u64,
        commitment_end: Epoch,
        collateral: TokenAmount,
    ) -> Result<()> {
        let now = self.ledger.current_epoch();
        self.registry.register_node(
            id.clone(),
            provider.clone(),
            class,
            region,
            capacity,
            rewards_share,
            reservation_price,
            max_booking_duration,
            commitment_end,
            now,
        )?;
        if !collateral.is_zero() {
            let lock = self.ledger.lock_collateral(&provider, &id, collateral, commitment_end)?;
            self.node_locks.entry(id).or_default().push(lock);
        }
        Ok(())
    }

    /// Locks additional collateral against a node (e.g. to recover from a
    /// post-slash shortfall).
    pub fn lock_collateral(
        &mut self,
        owner: &AccountId,
        node: &NodeId,
        amount: TokenAmount,
        until: Epoch,
    ) -> Result<u64> {
        if self.registry.node(node).is_none() {
            return Err(ProtocolError::UnknownNode(node.clone()));
        }
        let lock = self.ledger.lock_collateral(owner, node, amount, until)?;
        self.node_locks.entry(node.clone()).or_default().push(lock);
        Ok(lock)
    }

    pub fn activate(&mut self, node_id: &NodeId) -> Result<()> {
        let node =
            self.registry.node(node_id).ok_or_else(|| ProtocolError::UnknownNode(node_id.clone()))?;
        let rates = self.rates_for(&node.region.clone());
        let locked = self.ledger.collateral_for(node_id);
        self.registry.activate(node_id, locked, &rates)?;
        Ok(())
    }

    /// Retires the node and returns its remaining collateral to the
    /// provider. Locks whose timelock has not elapsed yet stay in custody
    /// and must be released by their owner later.
    pub fn retire(&mut self, node_id: &NodeId) -> Result<()> {
        let now = self.ledger.current_epoch();
        let live = self.composer.node_has_allocations(node_id);
        self.registry.retire(node_id, now, live)?;
        for lock in self.node_locks.remove(node_id).unwrap_or_default() {
            match self.ledger.release_collateral(lock) {
                Ok(_) | Err(LedgerError::StillLocked { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    pub fn set_reservation_price(&mut self, node_id: &NodeId, price: TokenAmount) -> Result<()> {
        self.registry.set_reservation_price(node_id, price)?;
        Ok(())
    }

    // ---- security ----

    pub fn add_stake(
        &mut self,
        staker: &AccountId,
        target: &TargetId,
        amount: TokenAmount,
    ) -> Result<u64> {
        Ok(self.ledger.add_stake(staker, target, amount)?)
    }

    pub fn mint_nft(
        &mut self,
        id: NftId,
        owner: &AccountId,
        initial_sink: TokenAmount,
        timelock_epochs: u64,
    ) -> Result<()> {
        Ok(self.ledger.mint_nft(id, owner, initial_sink, timelock_epochs)?)
    }

    pub fn stake_nft(&mut self, pass: &NftId, target: &TargetId) -> Result<()> {
        Ok(self.ledger.stake_nft(pass, target)?)
    }

    pub fn register_hypernode(&mut self, id: HyperNodeId, operator: AccountId) -> Result<()> {
        self.enforcement.register_hypernode(id, operator.clone())?;
        self.ledger.open_account(operator.clone());
        self.ledger.register_submitter(operator);
        Ok(())
    }

    // ---- instances ----

    fn resolve_spec(
        &self,
        blueprint: Option<&BlueprintId>,
        requirements: Vec<Requirement>,
        elastic: Option<ElasticBounds>,
    ) -> Result<ResolvedSpec> {
        match blueprint {
            Some(id) => {
                let bp = self
                    .composer
                    .blueprint(id)
                    .ok_or_else(|| CompositionError::UnknownBlueprint(id.clone()))?;
                Ok((Some(id.clone()), bp.requirements.clone(), bp.elastic, bp.services.clone()))
            }
            None => Ok((None, requirements, elastic, Vec::new())),
        }
    }

    /// Books an instance: plans the composition, charges the first epoch's
    /// fee into escrow, and commits the allocation.
    pub fn deploy(
        &mut self,
        id: InstanceId,
        owner: &AccountId,
        blueprint: Option<&BlueprintId>,
        requirements: Vec<Requirement>,
        elastic: Option<ElasticBounds>,
        duration: u64,
    ) -> Result<Instance> {
        let (blueprint, requirements, elastic, services) =
            self.resolve_spec(blueprint, requirements, elastic)?;
        let now = self.ledger.current_epoch();
        let planned = self.composer.plan(
            &self.registry,
            &self.enforcement.latest_medians_by_node(),
            &self.params.weights,
            id,
            owner.clone(),
            blueprint,
            requirements,
            elastic,
            services,
            duration,
            now,
        )?;
        let fee = planned.epoch_fee();
        self.ledger.transfer(owner, &Self::escrow_account(), fee)?;
        self.route_fees(&planned);
        self.composer.commit(planned.clone())?;
        Ok(planned)
    }

    /// The per-epoch fee a deploy would lock in right now, without touching
    /// any state.
    pub fn quote_price(
        &self,
        blueprint: Option<&BlueprintId>,
        requirements: Vec<Requirement>,
        duration: u64,
    ) -> Result<TokenAmount> {
        let (blueprint, requirements, elastic, services) =
            self.resolve_spec(blueprint, requirements, None)?;
        let now = self.ledger.current_epoch();
        let planned = self.composer.plan(
            &self.registry,
            &self.enforcement.latest_medians_by_node(),
            &self.params.weights,
            InstanceId::from("quote:probe"),
            AccountId::from("quote:probe"),
            blueprint,
            requirements,
            elastic,
            services,
            duration,
            now,
        )?;
        Ok(planned.epoch_fee())
    }

    fn route_fees(&mut self, instance: &Instance) {
        for ((node, rtype), units) in instance.units_by_node() {
            let price =
                instance.fixed_unit_prices.get(&rtype).copied().unwrap_or(TokenAmount::ZERO);
            let share = price.checked_mul(units as u128).expect("fee overflow");
            let slot = self.pending_routes.entry(node).or_insert(TokenAmount::ZERO);
            *slot = slot.checked_add(share).expect("fee overflow");
        }
    }

    pub fn scale(&mut self, id: &InstanceId, rtype: &crate::types::ResourceType, delta: i64) -> Result<()> {
        let now = self.ledger.current_epoch();
        self.composer.scale(
            &self.registry,
            &self.enforcement.latest_medians_by_node(),
            &self.params.weights,
            id,
            rtype,
            delta,
            now,
        )?;
        Ok(())
    }

    /// Releases an instance. If the current epoch has not been billed yet
    /// it is charged now (the epoch is consumed), so fees stop only from
    /// the next epoch.
    pub fn release(&mut self, id: &InstanceId) -> Result<Instance> {
        let now = self.ledger.current_epoch();
        let instance =
            self.composer.instance(id).ok_or_else(|| CompositionError::UnknownInstance(id.clone()))?;
        if instance.paid_through < now {
            let owner = instance.owner.clone();
            let fee = instance.epoch_fee();
            let snapshot = instance.clone();
            match self.ledger.transfer(&owner, &Self::escrow_account(), fee) {
                Ok(()) => {
                    self.composer.mark_billed(id, now)?;
                    self.route_fees(&snapshot);
                }
                // An owner who cannot pay the final epoch forfeits service
                // without a charge.
                Err(LedgerError::InsufficientBalance { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(self.composer.release(id)?)
    }

    pub fn extend_reservation(
        &mut self,
        id: &InstanceId,
        extra: u64,
        provider_accepts: &BTreeMap<NodeId, bool>,
    ) -> Result<Epoch> {
        Ok(self.composer.extend_reservation(&self.registry, id, extra, provider_accepts)?)
    }

    // ---- faults ----

    /// Degrades (or boosts) a subject's measured KPIs by `multiplier` for
    /// `duration` epochs starting now.
    pub fn inject_fault(
        &mut self,
        subject: SubjectId,
        multiplier: Rational,
        duration: u64,
    ) -> Result<()> {
        let known = self.registry.node(&NodeId::from(subject.as_str())).is_some()
            || self.services.contains_key(&ServiceId::from(subject.as_str()));
        if !known {
            return Err(ProtocolError::UnknownNode(NodeId::from(subject.as_str())));
        }
        let until = self.ledger.current_epoch().saturating_add(duration);
        self.fault_multipliers.insert(subject, ActiveFault { multiplier, until });
        Ok(())
    }

    fn fault_multiplier(&self, subject: &SubjectId) -> Rational {
        self.fault_multipliers.get(subject).map(|f| f.multiplier).unwrap_or_else(Rational::one)
    }

    fn profile_for(&self, subject: &SubjectId) -> Option<BTreeMap<String, u64>> {
        if let Some(node) = self.registry.node(&NodeId::from(subject.as_str())) {
            return self.registry.class(&node.class).map(|c| c.performance_profile.clone());
        }
        self.services.get(&ServiceId::from(subject.as_str())).map(|s| s.performance_profile.clone())
    }

    /// Challenge subjects for the current epoch: every Active node with its
    /// class's registered challenge kinds, plus every service that has a
    /// service-level spec.
    pub fn challenge_subjects(&self) -> Vec<(SubjectId, Vec<ChallengeKindId>)> {
        let mut subjects = Vec::new();
        for node in self.registry.active_nodes() {
            let Some(class) = self.registry.class(&node.class) else { continue };
            let kinds: Vec<ChallengeKindId> = class
                .challenge_set
                .iter()
                .filter(|k| self.enforcement.specs().contains_key(*k))
                .cloned()
                .collect();
            if !kinds.is_empty() {
                subjects.push((SubjectId::from(&node.id), kinds));
            }
        }
        for service in self.services.keys() {
            let kinds: Vec<ChallengeKindId> = self
                .enforcement
                .specs()
                .values()
                .filter(|s| matches!(&s.subject, ChallengeSubject::Service(id) if id == service))
                .map(|s| s.kind.clone())
                .collect();
            if !kinds.is_empty() {
                subjects.push((SubjectId::from(service), kinds));
            }
        }
        subjects.sort_by(|a, b| a.0.cmp(&b.0));
        subjects
    }

    /// HyperNodes currently backed by security.
    pub fn eligible_hypernodes(&self) -> Vec<HyperNodeId> {
        self.enforcement
            .hypernodes()
            .keys()
            .filter(|h| !self.ledger.security_for(&TargetId::from(h.as_str())).is_zero())
            .cloned()
            .collect()
    }

    /// Runs the full enforcement pass for the current epoch: scheduling,
    /// measurement, aggregation with on-ledger anchors, fault slashing, and
    /// challenger-misbehavior slashing. A network without eligible
    /// HyperNodes (or without subjects) skips the pass.
    pub fn run_enforcement(&mut self) -> Result<EnforcementOutcome> {
        let epoch = self.ledger.current_epoch();
        let subjects = self.challenge_subjects();
        let eligible = self.eligible_hypernodes();
        let mut outcome = EnforcementOutcome::default();
        if subjects.is_empty() || eligible.is_empty() {
            return Ok(outcome);
        }
        let assignments = self.enforcement.schedule_challenges(
            epoch,
            self.params.seed,
            self.params.replication,
            &subjects,
            &eligible,
        )?;

        // One merged report per (subject, challenger) covering all its
        // assigned kinds.
        let mut grouped: BTreeMap<(SubjectId, HyperNodeId), Vec<ChallengeKindId>> = BTreeMap::new();
        for a in &assignments {
            let kinds = grouped.entry((a.subject.clone(), a.challenger.clone())).or_default();
            if !kinds.contains(&a.kind) {
                kinds.push(a.kind.clone());
            }
        }
        let mut challengers_per_subject: BTreeMap<SubjectId, BTreeSet<HyperNodeId>> =
            BTreeMap::new();
        for (subject, challenger) in grouped.keys() {
            challengers_per_subject.entry(subject.clone()).or_default().insert(challenger.clone());
        }
        for ((subject, challenger), kinds) in &grouped {
            let profile = self.profile_for(subject).expect("subject built from catalogs");
            let report = self.enforcement.execute_challenge(
                epoch,
                self.params.seed,
                subject,
                challenger,
                kinds,
                &profile,
                self.fault_multiplier(subject),
                self.params.noise_amplitude,
            )?;
            self.enforcement.submit_report(report)?;
            outcome.reports += 1;
        }

        let mut misbehaving: BTreeSet<HyperNodeId> = BTreeSet::new();
        for (subject, kinds) in &subjects {
            let challengers = &challengers_per_subject[subject];
            let submitter_node = challengers.iter().next().expect("k >= 1");
            let submitter =
                self.enforcement.hypernodes()[submitter_node].operator.clone();
            let profile = self.profile_for(subject).expect("subject built from catalogs");
            let (_, fault) = self.enforcement.aggregate_and_commit(
                epoch,
                subject,
                kinds,
                &profile,
                challengers.len(),
                &mut self.ledger,
                &submitter,
            )?;
            if let Some(fault) = fault {
                self.failed_this_epoch.insert(subject.clone());
                let target = TargetId::from(subject.as_str());
                if self.ledger.has_security_positions(&target) && !fault.severity.is_zero() {
                    outcome.slashes.push(self.ledger.slash(&target, fault.severity)?);
                }
                outcome.faults.push(fault);
            }
            for cf in self.enforcement.flag_misbehaving_challengers(
                epoch,
                subject,
                self.params.noise_amplitude,
            ) {
                misbehaving.insert(cf.challenger.clone());
                outcome.challenger_faults.push(cf);
            }
        }
        // A challenger is slashed at most once per epoch, however many
        // subjects it lied about.
        for challenger in misbehaving {
            let target = TargetId::from(challenger.as_str());
            if self.ledger.has_security_positions(&target)
                && !self.params.challenger_slash_rate.is_zero()
            {
                outcome
                    .slashes
                    .push(self.ledger.slash(&target, self.params.challenger_slash_rate)?);
            }
        }
        Ok(outcome)
    }

    /// Access fees charged into escrow so far this epoch, awaiting
    /// settlement. Deploy and release charge up front; everything else is
    /// billed at the boundary.
    pub fn pending_fee_total(&self) -> TokenAmount {
        self.pending_routes
            .values()
            .fold(TokenAmount::ZERO, |acc, v| acc.checked_add(*v).expect("fee overflow"))
    }

    /// Bills and distributes the current epoch.
    pub fn settle_current_epoch(&mut self) -> Result<(Vec<RewardStatement>, SettlementSummary)> {
        let epoch = self.ledger.current_epoch();
        let routes = std::mem::take(&mut self.pending_routes);
        let failed = self.failed_this_epoch.clone();
        Ok(self.economics.settle_epoch(
            epoch,
            &mut self.ledger,
            &self.registry,
            &mut self.composer,
            &failed,
            routes,
            &Self::escrow_account(),
        )?)
    }

    /// Moves to the next epoch: NFT decay, booking expiry, the
    /// collateral-sufficiency suspension sweep, satellite-store eviction,
    /// and fault expiry.
    pub fn advance_epoch(&mut self) -> Result<AdvanceOutcome> {
        let summary = self.ledger.advance_epoch()?;
        let now = summary.epoch;
        let expired_instances: Vec<InstanceId> =
            self.composer.expire(now).into_iter().map(|i| i.id).collect();
        let mut suspended = Vec::new();
        let active: Vec<(NodeId, RegionId)> = self
            .registry
            .active_nodes()
            .map(|n| (n.id.clone(), n.region.clone()))
            .collect();
        for (node_id, region) in active {
            let rates = self.rates_for(&region);
            let required = self.registry.min_collateral(&node_id, &rates)?;
            if self.ledger.collateral_for(&node_id) < required {
                self.registry.suspend(&node_id)?;
                suspended.push(node_id);
            }
        }
        self.enforcement.evict(now);
        self.fault_multipliers.retain(|_, f| f.until > now);
        self.failed_this_epoch.clear();
        Ok(AdvanceOutcome { ledger: summary, expired_instances, suspended_nodes: suspended })
    }

    // ---- snapshots and invariants ----

    /// Canonical JSON snapshot of the entire protocol state.
    pub fn snapshot(&self) -> String {
        to_canonical_string(self).expect("protocol state always serializes")
    }

    pub fn from_snapshot(json: &str) -> std::result::Result<Protocol, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Cross-module invariant suite, meant to run between epochs (after
    /// [`Protocol::advance_epoch`]). Returns the first violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        self.ledger
            .check_conservation()
            .map_err(|terms| format!("conservation identity violated: {terms}"))?;
        self.composer.check_consistency(&self.registry)?;
        // Escrow is drained completely at every settlement, so between
        // epochs it must hold exactly zero.
        let escrow = self
            .ledger
            .balance(&Self::escrow_account())
            .map_err(|e| format!("escrow account missing: {e}"))?;
        if !self.pending_routes.is_empty() {
            // Mid-epoch (deploys charged but not yet settled): escrow must
            // hold at least the pending routes; exact equality is only
            // guaranteed between epochs.
            return Ok(());
        }
        if !escrow.is_zero() {
            return Err(format!("escrow holds {escrow} outside a billing cycle"));
        }
        // Every Active node that came through the boundary sweep holds
        // sufficient collateral.
        for node in self.registry.active_nodes() {
            let rates = self.rates_for(&node.region);
            let required = self
                .registry
                .min_collateral(&node.id, &rates)
                .map_err(|e| format!("collateral check failed: {e}"))?;
            if self.ledger.collateral_for(&node.id) < required {
                return Err(format!(
                    "active node {} holds {} collateral, below the required {}",
                    node.id,
                    self.ledger.collateral_for(&node.id),
                    required
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CapacityVector, ClassId, ResourceKind, ResourceType};

    fn acct(s: &str) -> AccountId {
        AccountId::from(s)
    }

    fn storage_type() -> ResourceType {
        ResourceType::new(ResourceKind::Storage)
    }

    fn storage(q: u64) -> CapacityVector {
        let mut v = CapacityVector::new();
        v.set(storage_type(), q);
        v
    }

    fn base_protocol() -> Protocol {
        let params = ProtocolParams { seed: 7, replication: 3, ..ProtocolParams::default() };
        let balances: BTreeMap<AccountId, TokenAmount> = [
            (acct("provider"), TokenAmount(100_000)),
            (acct("user"), TokenAmount(100_000)),
            (acct("staker"), TokenAmount(100_000)),
            (acct("op1"), TokenAmount(10_000)),
            (acct("op2"), TokenAmount(10_000)),
            (acct("op3"), TokenAmount(10_000)),
        ]
        .into();
        let economies = [(
            RegionId::from("eu"),
            RegionEconomy {
                region: RegionId::from("eu"),
                target_capacity: storage(1_000),
                bootstrap_end: Epoch(0),
                bootstrap_emission_per_epoch: TokenAmount(0),
                collateral_rates: CollateralRates(
                    [("storage".to_string(), TokenAmount(1))].into(),
                ),
            },
        )]
        .into();
        let mut p = Protocol::new(params, balances, economies);
        p.add_class(HardwareClass {
            id: ClassId::from("std"),
            capacity_template: storage(10),
            performance_profile: [("read_throughput".to_string(), 200_000u64)].into(),
            challenge_set: vec![ChallengeKindId::from("storage-read")],
        })
        .unwrap();
        p.register_challenge_spec(ChallengeSpec {
            kind: ChallengeKindId::from("storage-read"),
            subject: ChallengeSubject::Class(ClassId::from("std")),
            kpis: vec!["read_throughput".to_string()],
            pass_thresholds: [("read_throughput".to_string(), Rational::new(4, 5))].into(),
        })
        .unwrap();
        p
    }

    fn with_node(p: &mut Protocol, id: &str, cap: u64, collateral: u128) {
        p.register_node(
            NodeId::from(id),
            acct("provider"),
            ClassId::from("std"),
            RegionId::from("eu"),
            storage(cap),
            Rational::new(7, 10),
            TokenAmount(2),
            50,
            Epoch(500),
            TokenAmount(collateral),
        )
        .unwrap();
        p.activate(&NodeId::from(id)).unwrap();
    }

    fn with_hypernodes(p: &mut Protocol) {
        for (h, op) in [("h1", "op1"), ("h2", "op2"), ("h3", "op3")] {
            p.register_hypernode(HyperNodeId::from(h), acct(op)).unwrap();
            p.add_stake(&acct(op), &TargetId::from(h), TokenAmount(100)).unwrap();
        }
    }

    fn run_one_epoch(p: &mut Protocol) {
        p.run_enforcement().unwrap();
        p.settle_current_epoch().unwrap();
        p.advance_epoch().unwrap();
        p.check_invariants().unwrap();
    }

    #[test]
    fn deploy_charges_first_epoch_and_routes_at_settle() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        p.deploy(
            InstanceId::from("i1"),
            &acct("user"),
            None,
            vec![Requirement {
                rtype: storage_type(),
                quantity: 50,
                locality: None,
                min_kpi: None,
            }],
            None,
            5,
        )
        .unwrap();
        // 50 units x price 2 = 100 moved to escrow immediately.
        assert_eq!(p.ledger.balance(&acct("user")).unwrap(), TokenAmount(99_900));
        assert_eq!(p.ledger.balance(&Protocol::escrow_account()).unwrap(), TokenAmount(100));

        let (statements, _) = p.settle_current_epoch().unwrap();
        assert_eq!(statements.len(), 1);
        assert_eq!(statements[0].gross, TokenAmount(100));
        assert_eq!(p.ledger.balance(&Protocol::escrow_account()).unwrap(), TokenAmount(0));
        // provider has full share (no stakers): 100_000 - 100 collateral + 100 fee
        assert_eq!(p.ledger.balance(&acct("provider")).unwrap(), TokenAmount(100_000));
        p.check_invariants().unwrap();
    }

    #[test]
    fn quote_matches_deploy_and_tracks_price_changes() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        let req = vec![Requirement {
            rtype: storage_type(),
            quantity: 50,
            locality: None,
            min_kpi: None,
        }];
        let quote = p.quote_price(None, req.clone(), 5).unwrap();
        let instance =
            p.deploy(InstanceId::from("i1"), &acct("user"), None, req.clone(), None, 5).unwrap();
        assert_eq!(quote, instance.epoch_fee());

        // Provider raises the price: the existing instance is immune, the
        // new quote rises.
        p.set_reservation_price(&NodeId::from("n1"), TokenAmount(9)).unwrap();
        let quote2 = p.quote_price(None, req, 5).unwrap();
        assert!(quote2 > quote);
        assert_eq!(
            p.composer.instance(&InstanceId::from("i1")).unwrap().epoch_fee(),
            TokenAmount(100)
        );
    }

    #[test]
    fn enforcement_pass_produces_reports_and_anchor() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        with_hypernodes(&mut p);
        let outcome = p.run_enforcement().unwrap();
        assert_eq!(outcome.reports, 3);
        assert!(outcome.faults.is_empty());
        assert_eq!(p.ledger.anchors().len(), 1);
        let subject = SubjectId::from("n1");
        assert_eq!(p.enforcement.store().reports_for(Epoch(0), &subject).len(), 3);
    }

    #[test]
    fn injected_fault_slashes_and_blocks_rewards() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        with_hypernodes(&mut p);
        p.add_stake(&acct("staker"), &NodeId::from("n1"), TokenAmount(400)).unwrap();
        p.deploy(
            InstanceId::from("i1"),
            &acct("user"),
            None,
            vec![Requirement {
                rtype: storage_type(),
                quantity: 50,
                locality: None,
                min_kpi: None,
            }],
            None,
            5,
        )
        .unwrap();

        // multiplier 0.5 against threshold 0.8: severity (0.8-0.5)/0.8 = 3/8.
        p.inject_fault(SubjectId::from("n1"), Rational::new(1, 2), 1).unwrap();
        let outcome = p.run_enforcement().unwrap();
        assert_eq!(outcome.faults.len(), 1);
        assert_eq!(outcome.faults[0].severity, Rational::new(3, 8));
        // slash: floor(3/8 x 100) = 37 from collateral, floor(3/8 x 400) =
        // 150 from the stake.
        assert_eq!(p.ledger.collateral_for(&NodeId::from("n1")), TokenAmount(63));
        assert_eq!(p.ledger.stake_total_for(&NodeId::from("n1")), TokenAmount(250));

        let (statements, summary) = p.settle_current_epoch().unwrap();
        // The failed node earns nothing; its 100 fee burns.
        assert!(statements.is_empty());
        assert_eq!(summary.fees_burned, TokenAmount(100));
        assert_eq!(p.ledger.burned_total(), TokenAmount(100 + 37 + 150));

        // Collateral 63 < min 100: the sweep suspends the node at the
        // boundary.
        let advance = p.advance_epoch().unwrap();
        assert_eq!(advance.suspended_nodes, vec![NodeId::from("n1")]);
        p.check_invariants().unwrap();
        // Fault expires after its 1-epoch duration.
        assert!(p.active_faults().is_empty());
    }

    #[test]
    fn suspended_node_rejoins_after_topping_up() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        with_hypernodes(&mut p);
        p.inject_fault(SubjectId::from("n1"), Rational::new(1, 2), 1).unwrap();
        run_one_epoch(&mut p);
        assert_eq!(
            p.registry.node(&NodeId::from("n1")).unwrap().status,
            crate::registry::NodeStatus::Suspended
        );
        // Top up a fresh lock and reactivate.
        p.lock_collateral(&acct("provider"), &NodeId::from("n1"), TokenAmount(40), Epoch(500))
            .unwrap();
        p.activate(&NodeId::from("n1")).unwrap();
        assert_eq!(
            p.registry.node(&NodeId::from("n1")).unwrap().status,
            crate::registry::NodeStatus::Active
        );
    }

    #[test]
    fn retire_releases_remaining_collateral() {
        let mut p = base_protocol();
        p.register_node(
            NodeId::from("n1"),
            acct("provider"),
            ClassId::from("std"),
            RegionId::from("eu"),
            storage(100),
            Rational::new(7, 10),
            TokenAmount(2),
            50,
            Epoch(3),
            TokenAmount(100),
        )
        .unwrap();
        p.activate(&NodeId::from("n1")).unwrap();
        assert_eq!(p.ledger.balance(&acct("provider")).unwrap(), TokenAmount(99_900));
        let err = p.retire(&NodeId::from("n1")).unwrap_err();
        assert!(matches!(err, ProtocolError::Registry(RegistryError::CommitmentActive { .. })));
        for _ in 0..3 {
            p.settle_current_epoch().unwrap();
            p.advance_epoch().unwrap();
        }
        p.retire(&NodeId::from("n1")).unwrap();
        assert_eq!(p.ledger.balance(&acct("provider")).unwrap(), TokenAmount(100_000));
        p.check_invariants().unwrap();
    }

    #[test]
    fn service_subjects_are_challenged() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        with_hypernodes(&mut p);
        p.add_service(ServiceSpec {
            id: ServiceId::from("db"),
            performance_profile: [("query_latency".to_string(), 5_000u64)].into(),
        })
        .unwrap();
        p.register_challenge_spec(ChallengeSpec {
            kind: ChallengeKindId::from("db-probe"),
            subject: ChallengeSubject::Service(ServiceId::from("db")),
            kpis: vec!["query_latency".to_string()],
            pass_thresholds: [("query_latency".to_string(), Rational::new(1, 2))].into(),
        })
        .unwrap();
        let outcome = p.run_enforcement().unwrap();
        // 3 reports for the node + 3 for the service.
        assert_eq!(outcome.reports, 6);
        assert_eq!(p.ledger.anchors().len(), 2);
        assert!(p
            .enforcement
            .latest_medians()
            .contains_key(&SubjectId::from("db")));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut p = base_protocol();
        with_node(&mut p, "n1", 100, 100);
        with_hypernodes(&mut p);
        run_one_epoch(&mut p);
        let snap = p.snapshot();
        let restored = Protocol::from_snapshot(&snap).unwrap();
        assert_eq!(p, restored);
        assert_eq!(snap, restored.snapshot());
    }

    #[test]
    fn full_epoch_loop_is_deterministic() {
        let run = || {
            let mut p = base_protocol();
            with_node(&mut p, "n1", 100, 100);
            with_node(&mut p, "n2", 200, 200);
            with_hypernodes(&mut p);
            p.deploy(
                InstanceId::from("i1"),
                &acct("user"),
                None,
                vec![Requirement {
                    rtype: storage_type(),
                    quantity: 120,
                    locality: None,
                    min_kpi: None,
                }],
                None,
                8,
            )
            .unwrap();
            for _ in 0..5 {
                run_one_epoch(&mut p);
            }
            p.snapshot()
        };
        assert_eq!(run(), run());
    }
}

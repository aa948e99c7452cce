//! The epoch loop: builds a protocol instance from a scenario and drives it
//! epoch by epoch in the fixed order
//!
//!   scripted events -> challenges -> settlement -> epoch advance ->
//!   invariant assertions -> metrics frame
//!
//! Any invariant violation aborts the run, naming the invariant and the
//! epoch. Identical (scenario, seed) inputs produce identical outputs.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use icn_core::economics::{RegionEconomy, RewardSource};
use icn_core::ledger::ProofAnchor;
use icn_core::protocol::{Protocol, ProtocolError, ProtocolParams};
use icn_core::registry::CollateralRates;
use icn_core::types::{AccountId, InstanceId, NftId, NodeId, RegionId, TokenAmount};

use crate::metrics::{MetricsFrame, RewardRow};
use crate::scenario::{Action, Diagnostic, Scenario};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario invalid:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("event /events/{index} ({action}, epoch {epoch}) failed: {source}")]
    Event {
        index: usize,
        epoch: u64,
        action: &'static str,
        #[source]
        source: ProtocolError,
    },
    #[error("invariant violated at epoch {epoch}: {message}")]
    Invariant { epoch: u64, message: String },
    #[error("epoch {epoch} could not complete: {source}")]
    Epoch {
        epoch: u64,
        #[source]
        source: ProtocolError,
    },
}

impl RunError {
    /// Process exit code the failure maps to: invalid input is 2,
    /// violated invariants are 1.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Invalid(_) | RunError::Event { .. } => 2,
            RunError::Invariant { .. } | RunError::Epoch { .. } => 1,
        }
    }
}

fn format_diagnostics(ds: &[Diagnostic]) -> String {
    ds.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<u64>,
}

/// Aggregate totals for the whole run, written as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub epochs: u64,
    pub genesis_supply: TokenAmount,
    pub emitted_total: TokenAmount,
    pub burned_total: TokenAmount,
    pub fees_charged: TokenAmount,
    pub fees_burned: TokenAmount,
    pub rewards_by_source: BTreeMap<String, TokenAmount>,
    pub reports: usize,
    pub faults: usize,
    pub challenger_faults: usize,
    pub slashes: usize,
    pub instances_deployed: usize,
    pub instances_released: usize,
    pub live_instances: usize,
    pub conservation: String,
}

/// Everything a completed run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub protocol: Protocol,
    pub frames: Vec<MetricsFrame>,
    pub rewards: Vec<RewardRow>,
    pub summary: Summary,
}

/// Instantiates the protocol at epoch 0 from the scenario's static
/// configuration (catalogs, genesis balances, hypernodes).
pub fn build_protocol(scenario: &Scenario, seed: u64) -> Result<Protocol, ProtocolError> {
    let params = ProtocolParams {
        seed,
        replication: scenario.replication,
        noise_amplitude: scenario.noise_amplitude,
        weights: scenario.weights.clone().unwrap_or_default(),
        retention_epochs: scenario.retention_epochs,
        challenger_slash_rate: scenario.challenger_slash_rate,
    };
    let economies: BTreeMap<RegionId, RegionEconomy> = scenario
        .regions
        .iter()
        .map(|(region, cfg)| {
            (
                region.clone(),
                RegionEconomy {
                    region: region.clone(),
                    target_capacity: cfg.target_capacity.clone(),
                    bootstrap_end: cfg.bootstrap_end,
                    bootstrap_emission_per_epoch: cfg.bootstrap_emission_per_epoch,
                    collateral_rates: CollateralRates(cfg.collateral_rates.clone()),
                },
            )
        })
        .collect();
    let mut protocol = Protocol::new(params, scenario.balances.clone(), economies);
    for class in &scenario.classes {
        protocol.add_class(class.clone())?;
    }
    for service in &scenario.services {
        protocol.add_service(service.clone())?;
    }
    for spec in &scenario.challenge_specs {
        protocol.register_challenge_spec(spec.clone())?;
    }
    for blueprint in &scenario.blueprints {
        protocol.add_blueprint(blueprint.clone())?;
    }
    for hn in &scenario.hypernodes {
        protocol.register_hypernode(hn.id.clone(), hn.operator.clone())?;
        if !hn.stake.is_zero() {
            protocol.add_stake(&hn.operator, &NodeId::from(hn.id.as_str()), hn.stake)?;
        }
    }
    Ok(protocol)
}

fn apply_action(protocol: &mut Protocol, action: &Action) -> Result<(), ProtocolError> {
    match action {
        Action::RegisterNode {
            node,
            provider,
            class,
            region,
            capacity,
            rewards_share,
            reservation_price,
            max_booking_duration,
            commitment_end,
            collateral,
        } => protocol.register_node(
            node.clone(),
            provider.clone(),
            class.clone(),
            region.clone(),
            capacity.clone(),
            *rewards_share,
            *reservation_price,
            *max_booking_duration,
            *commitment_end,
            *collateral,
        ),
        Action::Activate { node } => protocol.activate(node),
        Action::Deploy { instance, owner, blueprint, requirements, elastic, duration } => protocol
            .deploy(
                instance.clone(),
                owner,
                blueprint.as_ref(),
                requirements.clone(),
                *elastic,
                *duration,
            )
            .map(drop),
        Action::Scale { instance, resource, delta } => protocol.scale(instance, resource, *delta),
        Action::Release { instance } => protocol.release(instance).map(drop),
        Action::Extend { instance, extra, accepts } => {
            // Build the full response map: every backing node accepts unless
            // the event says otherwise.
            let mut responses: BTreeMap<NodeId, bool> = BTreeMap::new();
            if let Some(inst) = protocol.composer.instance(instance) {
                for unit in &inst.allocations {
                    responses.insert(unit.node.clone(), true);
                }
            }
            if let Some(overrides) = accepts {
                for (node, ok) in overrides {
                    responses.insert(node.clone(), *ok);
                }
            }
            protocol.extend_reservation(instance, *extra, &responses).map(drop)
        }
        Action::Stake { staker, target, amount } => {
            protocol.add_stake(staker, target, *amount).map(drop)
        }
        Action::StakeNft { pass, owner, initial_sink, timelock, target } => {
            if protocol.ledger.pass(pass).is_none() {
                protocol.mint_nft(pass.clone(), owner, *initial_sink, *timelock)?;
            }
            protocol.stake_nft(pass, target)
        }
        Action::InjectFault { node, multiplier, duration } => {
            protocol.inject_fault(node.clone(), *multiplier, *duration)
        }
        Action::Retire { node } => protocol.retire(node),
        Action::SetPrice { node, price } => protocol.set_reservation_price(node, *price),
    }
}

/// Tracks cross-epoch invariants that need history: anchors must only be
/// appended, and NFT sinks must never grow.
struct HistoryChecks {
    anchors: Vec<ProofAnchor>,
    sinks: BTreeMap<NftId, TokenAmount>,
}

impl HistoryChecks {
    fn new() -> HistoryChecks {
        HistoryChecks { anchors: Vec::new(), sinks: BTreeMap::new() }
    }

    fn check(&mut self, protocol: &Protocol) -> Result<(), String> {
        let anchors = protocol.ledger.anchors();
        if anchors.len() < self.anchors.len() || anchors[..self.anchors.len()] != self.anchors[..]
        {
            return Err("anchor log is append-only but history changed".into());
        }
        self.anchors = anchors.to_vec();
        for (id, pass) in protocol.ledger.passes() {
            if let Some(prev) = self.sinks.get(id) {
                if pass.sink_value > *prev {
                    return Err(format!(
                        "sink of pass {id} grew from {prev} to {}",
                        pass.sink_value
                    ));
                }
            }
            self.sinks.insert(id.clone(), pass.sink_value);
        }
        Ok(())
    }
}

/// Runs the scenario to completion.
pub fn run(scenario: &Scenario, overrides: Overrides) -> Result<RunOutput, RunError> {
    let diagnostics = scenario.validate();
    if !diagnostics.is_empty() {
        return Err(RunError::Invalid(diagnostics));
    }
    let seed = overrides.seed.unwrap_or(scenario.seed);
    let epochs = overrides.epochs.unwrap_or(scenario.epochs);
    let mut protocol =
        build_protocol(scenario, seed).map_err(|source| RunError::Epoch { epoch: 0, source })?;

    let mut frames = Vec::with_capacity(epochs as usize);
    let mut rewards = Vec::new();
    let mut history = HistoryChecks::new();
    let mut cursor = 0usize;
    let mut totals = Totals::default();

    for epoch in 0..epochs {
        // 1. Scripted events for this epoch, in file order.
        while cursor < scenario.events.len() && scenario.events[cursor].epoch.0 <= epoch {
            let event = &scenario.events[cursor];
            if event.epoch.0 == epoch {
                apply_action(&mut protocol, &event.action).map_err(|source| RunError::Event {
                    index: cursor,
                    epoch,
                    action: event.action.name(),
                    source,
                })?;
                if let Action::Deploy { .. } = event.action {
                    totals.deployed += 1;
                }
                if let Action::Release { .. } = event.action {
                    totals.released += 1;
                }
            }
            cursor += 1;
        }
        // Deploy and release charge fees into escrow as they happen; the
        // buffered total is this epoch's up-front portion of fees_charged.
        totals.fees_charged = add(totals.fees_charged, protocol.pending_fee_total());

        // 2.-4. Challenge schedule, execution, aggregation, slashing.
        let subjects = protocol.challenge_subjects().len();
        let eligible = protocol.eligible_hypernodes().len();
        let expected_reports = if eligible == 0 {
            0
        } else {
            subjects * scenario.replication.min(eligible)
        };
        let outcome =
            protocol.run_enforcement().map_err(|source| RunError::Epoch { epoch, source })?;
        if outcome.reports != expected_reports {
            return Err(RunError::Invariant {
                epoch,
                message: format!(
                    "report completeness: expected {expected_reports} reports, got {}",
                    outcome.reports
                ),
            });
        }

        // 5. Billing, reward distribution, emission.
        let (statements, settlement) =
            protocol.settle_current_epoch().map_err(|source| RunError::Epoch { epoch, source })?;
        for statement in &statements {
            if !statement.is_exact() {
                return Err(RunError::Invariant {
                    epoch,
                    message: format!(
                        "split exactness: statement for {} does not sum to gross",
                        statement.node
                    ),
                });
            }
            rewards.push(RewardRow {
                epoch,
                node: statement.node.clone(),
                source: statement.source.as_str(),
                gross: statement.gross,
                provider_cut: statement.provider_cut,
                staker_total: statement.staker_total(),
            });
            match statement.source {
                RewardSource::Bootstrap => totals.add_bootstrap(statement.gross),
                RewardSource::AccessFee => totals.add_access_fee(statement.gross),
            }
        }
        totals.released += settlement.forced_releases.len();
        totals.fees_charged = add(totals.fees_charged, settlement.fees_charged);
        totals.fees_burned = add(totals.fees_burned, settlement.fees_burned);

        // Capture occupancy before the boundary sweep so the frame reflects
        // what actually served (and was billed) during this epoch.
        let residual = residual_by_region(&protocol);
        let live_instances = protocol.composer.instances().len();

        // 6. Epoch boundary: decay, expiry, suspension sweep, eviction.
        let advance =
            protocol.advance_epoch().map_err(|source| RunError::Epoch { epoch, source })?;
        totals.released += advance.expired_instances.len();

        // 7. Invariant suite.
        protocol
            .check_invariants()
            .map_err(|message| RunError::Invariant { epoch, message })?;
        history.check(&protocol).map_err(|message| RunError::Invariant { epoch, message })?;

        totals.reports += outcome.reports;
        totals.faults += outcome.faults.len();
        totals.challenger_faults += outcome.challenger_faults.len();
        totals.slashes += outcome.slashes.len();

        // 8. Metrics frame.
        frames.push(MetricsFrame {
            epoch,
            residual,
            live_instances,
            rewards_bootstrap: totals.rewards_bootstrap,
            rewards_access_fee: totals.rewards_access_fee,
            burned_total: protocol.ledger.burned_total(),
            faults: outcome.faults.len(),
            conservation: "ok".into(),
        });
    }

    let summary = Summary {
        seed,
        epochs,
        genesis_supply: protocol.ledger.genesis_supply(),
        emitted_total: protocol.ledger.emitted_total(),
        burned_total: protocol.ledger.burned_total(),
        fees_charged: totals.fees_charged,
        fees_burned: totals.fees_burned,
        rewards_by_source: [
            ("access_fee".to_string(), totals.rewards_access_fee),
            ("bootstrap".to_string(), totals.rewards_bootstrap),
        ]
        .into(),
        reports: totals.reports,
        faults: totals.faults,
        challenger_faults: totals.challenger_faults,
        slashes: totals.slashes,
        instances_deployed: totals.deployed,
        instances_released: totals.released,
        live_instances: protocol.composer.instances().len(),
        conservation: "ok".into(),
    };
    Ok(RunOutput { protocol, frames, rewards, summary })
}

/// Residual (free) capacity per region, packed deterministically as
/// `region:type=units` entries joined with `|`.
fn residual_by_region(protocol: &Protocol) -> String {
    let mut parts = Vec::new();
    for region in protocol.registry.regions() {
        let map = protocol
            .registry
            .capability_map(region, protocol.composer.allocated())
            .expect("regions in the registry resolve");
        for (rtype, q) in map.iter() {
            parts.push(format!("{region}:{rtype}={q}"));
        }
    }
    parts.join("|")
}

fn add(a: TokenAmount, b: TokenAmount) -> TokenAmount {
    a.checked_add(b).expect("metric totals stay within u128")
}

#[derive(Default)]
struct Totals {
    rewards_bootstrap: TokenAmount,
    rewards_access_fee: TokenAmount,
    fees_charged: TokenAmount,
    fees_burned: TokenAmount,
    reports: usize,
    faults: usize,
    challenger_faults: usize,
    slashes: usize,
    deployed: usize,
    released: usize,
}

impl Totals {
    fn add_bootstrap(&mut self, amount: TokenAmount) {
        self.rewards_bootstrap = add(self.rewards_bootstrap, amount);
    }

    fn add_access_fee(&mut self, amount: TokenAmount) {
        self.rewards_access_fee = add(self.rewards_access_fee, amount);
    }
}

/// Applies one ad-hoc action against a loaded state (the CLI `deploy`
/// path), outside any scenario.
pub fn apply_adhoc(protocol: &mut Protocol, action: &Action) -> Result<(), ProtocolError> {
    apply_action(protocol, action)
}

/// Resolves an account for CLI defaults: the lexicographically first
/// account that is not protocol-owned.
pub fn default_owner(protocol: &Protocol) -> Option<AccountId> {
    protocol
        .ledger
        .accounts()
        .keys()
        .find(|a| a.as_str() != icn_core::protocol::ESCROW_ACCOUNT)
        .cloned()
}

/// Deterministic instance id for CLI deploys.
pub fn next_cli_instance_id(protocol: &Protocol) -> InstanceId {
    let mut n = protocol.composer.instances().len();
    loop {
        let id = InstanceId::from(format!("cli-{n}").as_str());
        if protocol.composer.instance(&id).is_none() {
            return id;
        }
        n += 1;
    }
}

//! Scenario files: the JSON schema the harness consumes, plus a validator
//! that returns JSON-pointer-style diagnostics instead of failing on the
//! first problem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use icn_core::composition::{ElasticBounds, InstanceBlueprint, Requirement, ScoringWeights};
use icn_core::enforcement::{ChallengeSpec, ChallengeSubject};
use icn_core::protocol::{ServiceSpec, ESCROW_ACCOUNT};
use icn_core::registry::HardwareClass;
use icn_core::types::{
    AccountId, BlueprintId, CapacityVector, ClassId, Epoch, HyperNodeId, InstanceId, NftId,
    NodeId, Rational, RegionId, ResourceType, SubjectId, TokenAmount,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// One validation finding, addressed by a JSON pointer into the scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Per-region economic configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    #[serde(default)]
    pub target_capacity: CapacityVector,
    #[serde(default)]
    pub bootstrap_end: Epoch,
    #[serde(default)]
    pub bootstrap_emission_per_epoch: TokenAmount,
    /// Per-unit collateral rates keyed by resource type name.
    #[serde(default)]
    pub collateral_rates: BTreeMap<String, TokenAmount>,
}

/// A HyperNode present from genesis, with its operator's security stake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperNodeConfig {
    pub id: HyperNodeId,
    pub operator: AccountId,
    #[serde(default)]
    pub stake: TokenAmount,
}

/// A scripted action, applied at the start of its epoch in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    RegisterNode {
        node: NodeId,
        provider: AccountId,
        class: ClassId,
        region: RegionId,
        capacity: CapacityVector,
        rewards_share: Rational,
        reservation_price: TokenAmount,
        max_booking_duration: u64,
        commitment_end: Epoch,
        #[serde(default)]
        collateral: TokenAmount,
    },
    Activate {
        node: NodeId,
    },
    Deploy {
        instance: InstanceId,
        owner: AccountId,
        #[serde(default)]
        blueprint: Option<BlueprintId>,
        #[serde(default)]
        requirements: Vec<Requirement>,
        #[serde(default)]
        elastic: Option<ElasticBounds>,
        duration: u64,
    },
    Scale {
        instance: InstanceId,
        resource: ResourceType,
        delta: i64,
    },
    Release {
        instance: InstanceId,
    },
    Extend {
        instance: InstanceId,
        extra: u64,
        /// Per-node provider responses; omitted nodes accept.
        #[serde(default)]
        accepts: Option<BTreeMap<NodeId, bool>>,
    },
    Stake {
        staker: AccountId,
        target: NodeId,
        amount: TokenAmount,
    },
    /// Mints the pass if it does not exist yet, then stakes it 1:1.
    StakeNft {
        pass: NftId,
        owner: AccountId,
        initial_sink: TokenAmount,
        timelock: u64,
        target: NodeId,
    },
    InjectFault {
        node: SubjectId,
        multiplier: Rational,
        duration: u64,
    },
    Retire {
        node: NodeId,
    },
    /// Changes a node's reservation price for future bookings only.
    SetPrice {
        node: NodeId,
        price: TokenAmount,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::RegisterNode { .. } => "register_node",
            Action::Activate { .. } => "activate",
            Action::Deploy { .. } => "deploy",
            Action::Scale { .. } => "scale",
            Action::Release { .. } => "release",
            Action::Extend { .. } => "extend",
            Action::Stake { .. } => "stake",
            Action::StakeNft { .. } => "stake_nft",
            Action::InjectFault { .. } => "inject_fault",
            Action::Retire { .. } => "retire",
            Action::SetPrice { .. } => "set_price",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub epoch: Epoch,
    #[serde(flatten)]
    pub action: Action,
}

fn default_replication() -> usize {
    3
}

fn default_retention() -> u64 {
    8
}

fn default_challenger_slash_rate() -> Rational {
    Rational::new(1, 10)
}

/// A complete simulation input: protocol parameters, genesis state, and the
/// scripted event timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub epochs: u64,
    #[serde(default = "default_replication")]
    pub replication: usize,
    /// Measurement noise amplitude in per-mille of nominal.
    #[serde(default)]
    pub noise_amplitude: u64,
    #[serde(default)]
    pub weights: Option<ScoringWeights>,
    #[serde(default = "default_retention")]
    pub retention_epochs: u64,
    #[serde(default = "default_challenger_slash_rate")]
    pub challenger_slash_rate: Rational,
    /// Genesis balances; their sum is the genesis supply.
    pub balances: BTreeMap<AccountId, TokenAmount>,
    pub regions: BTreeMap<RegionId, RegionConfig>,
    #[serde(default)]
    pub classes: Vec<HardwareClass>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub challenge_specs: Vec<ChallengeSpec>,
    #[serde(default)]
    pub blueprints: Vec<InstanceBlueprint>,
    #[serde(default)]
    pub hypernodes: Vec<HyperNodeConfig>,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: display.clone(), source })?;
        serde_json::from_str(&text).map_err(|source| ScenarioError::Parse { path: display, source })
    }

    /// Runs every schema and referential check; an empty list means the
    /// scenario is runnable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut ds = Vec::new();
        self.check_parameters(&mut ds);
        let catalogs = self.check_catalogs(&mut ds);
        self.check_events(&catalogs, &mut ds);
        ds
    }

    fn check_parameters(&self, ds: &mut Vec<Diagnostic>) {
        if self.epochs == 0 {
            ds.push(Diagnostic::new("/epochs", "must be positive"));
        }
        if self.replication == 0 {
            ds.push(Diagnostic::new("/replication", "must be at least 1"));
        }
        if self.retention_epochs == 0 {
            ds.push(Diagnostic::new("/retention_epochs", "must be at least 1"));
        }
        if !self.challenger_slash_rate.in_unit_interval() {
            ds.push(Diagnostic::new("/challenger_slash_rate", "must be within [0, 1]"));
        }
        if self.balances.contains_key(&AccountId::from(ESCROW_ACCOUNT)) {
            ds.push(Diagnostic::new(
                format!("/balances/{ESCROW_ACCOUNT}"),
                "the escrow account is protocol-owned and must start empty",
            ));
        }
        if self.regions.is_empty() {
            ds.push(Diagnostic::new("/regions", "at least one region is required"));
        }
    }

    fn check_catalogs(&self, ds: &mut Vec<Diagnostic>) -> Catalogs {
        let mut catalogs =
            Catalogs { regions: self.regions.keys().cloned().collect(), ..Catalogs::default() };

        for (i, class) in self.classes.iter().enumerate() {
            if !catalogs.classes.insert(class.id.clone()) {
                ds.push(Diagnostic::new(format!("/classes/{i}/id"), "duplicate class id"));
            }
        }
        for (i, service) in self.services.iter().enumerate() {
            if !catalogs.services.insert(service.id.clone()) {
                ds.push(Diagnostic::new(format!("/services/{i}/id"), "duplicate service id"));
            }
        }

        let mut kinds = BTreeSet::new();
        for (i, spec) in self.challenge_specs.iter().enumerate() {
            if !kinds.insert(spec.kind.clone()) {
                ds.push(Diagnostic::new(
                    format!("/challenge_specs/{i}/kind"),
                    "duplicate challenge kind",
                ));
            }
            let profile = match &spec.subject {
                ChallengeSubject::Class(class) => {
                    let found = self.classes.iter().find(|c| &c.id == class);
                    if found.is_none() {
                        ds.push(Diagnostic::new(
                            format!("/challenge_specs/{i}/subject"),
                            format!("unknown class {class}"),
                        ));
                    }
                    found.map(|c| &c.performance_profile)
                }
                ChallengeSubject::Service(service) => {
                    let found = self.services.iter().find(|s| &s.id == service);
                    if found.is_none() {
                        ds.push(Diagnostic::new(
                            format!("/challenge_specs/{i}/subject"),
                            format!("unknown service {service}"),
                        ));
                    }
                    found.map(|s| &s.performance_profile)
                }
            };
            for (j, kpi) in spec.kpis.iter().enumerate() {
                if let Some(profile) = profile {
                    if !profile.contains_key(kpi) {
                        ds.push(Diagnostic::new(
                            format!("/challenge_specs/{i}/kpis/{j}"),
                            format!("KPI {kpi} absent from the subject's performance profile"),
                        ));
                    }
                }
                match spec.pass_thresholds.get(kpi) {
                    None => ds.push(Diagnostic::new(
                        format!("/challenge_specs/{i}/pass_thresholds"),
                        format!("no threshold for KPI {kpi}"),
                    )),
                    Some(t) if t.is_zero() || !t.in_unit_interval() => {
                        ds.push(Diagnostic::new(
                            format!("/challenge_specs/{i}/pass_thresholds/{kpi}"),
                            "threshold must be within (0, 1]",
                        ));
                    }
                    Some(_) => {}
                }
            }
        }

        for (i, class) in self.classes.iter().enumerate() {
            for (j, kind) in class.challenge_set.iter().enumerate() {
                if !kinds.contains(kind) {
                    ds.push(Diagnostic::new(
                        format!("/classes/{i}/challenge_set/{j}"),
                        format!("unknown challenge kind {kind}"),
                    ));
                }
            }
        }

        for (i, bp) in self.blueprints.iter().enumerate() {
            if !catalogs.blueprints.insert(bp.id.clone()) {
                ds.push(Diagnostic::new(format!("/blueprints/{i}/id"), "duplicate blueprint id"));
            }
            check_requirements(
                &bp.requirements,
                &catalogs.regions,
                &format!("/blueprints/{i}/requirements"),
                ds,
            );
            for (j, service) in bp.services.iter().enumerate() {
                if !catalogs.services.contains(service) {
                    ds.push(Diagnostic::new(
                        format!("/blueprints/{i}/services/{j}"),
                        format!("unknown service {service}"),
                    ));
                }
            }
        }

        for (i, hn) in self.hypernodes.iter().enumerate() {
            if !catalogs.hypernodes.insert(hn.id.clone()) {
                ds.push(Diagnostic::new(format!("/hypernodes/{i}/id"), "duplicate hypernode id"));
            }
            if !hn.stake.is_zero() && !self.balances.contains_key(&hn.operator) {
                ds.push(Diagnostic::new(
                    format!("/hypernodes/{i}/operator"),
                    format!("operator {} has no genesis balance to stake from", hn.operator),
                ));
            }
        }
        catalogs
    }

    fn check_events(&self, catalogs: &Catalogs, ds: &mut Vec<Diagnostic>) {
        let mut prev_epoch = Epoch(0);
        // Nodes registered so far, with their scripted commitment horizon.
        let mut nodes: BTreeMap<NodeId, Epoch> = BTreeMap::new();
        // Instances deployed so far, with their scripted expiry epoch.
        let mut live_until: BTreeMap<InstanceId, u64> = BTreeMap::new();
        let mut released: BTreeSet<InstanceId> = BTreeSet::new();
        let mut passes: BTreeSet<NftId> = BTreeSet::new();
        let mut occupied: BTreeSet<NodeId> = BTreeSet::new();

        for (i, event) in self.events.iter().enumerate() {
            let at = format!("/events/{i}");
            if event.epoch < prev_epoch {
                ds.push(Diagnostic::new(
                    &at,
                    format!(
                        "epoch {} precedes epoch {} at /events/{}",
                        event.epoch.0,
                        prev_epoch.0,
                        i - 1
                    ),
                ));
            }
            prev_epoch = prev_epoch.max(event.epoch);
            if event.epoch.0 >= self.epochs {
                ds.push(Diagnostic::new(
                    format!("{at}/epoch"),
                    format!("epoch {} is past the last simulated epoch {}", event.epoch.0, self.epochs - 1),
                ));
            }
            let now = event.epoch;
            // An id may name either a hardware node or a hypernode when the
            // operation works on the shared security-target namespace.
            let known_target = |id: &NodeId| {
                nodes.contains_key(id) || catalogs.hypernodes.contains(&HyperNodeId::from(id.as_str()))
            };
            match &event.action {
                Action::RegisterNode {
                    node,
                    provider,
                    class,
                    region,
                    rewards_share,
                    max_booking_duration,
                    commitment_end,
                    ..
                } => {
                    if nodes.contains_key(node) {
                        ds.push(Diagnostic::new(format!("{at}/node"), "node already registered"));
                    }
                    if catalogs.hypernodes.contains(&HyperNodeId::from(node.as_str())) {
                        ds.push(Diagnostic::new(
                            format!("{at}/node"),
                            "id collides with a hypernode in the shared security-target namespace",
                        ));
                    }
                    if !catalogs.classes.contains(class) {
                        ds.push(Diagnostic::new(format!("{at}/class"), format!("unknown class {class}")));
                    }
                    if !catalogs.regions.contains(region) {
                        ds.push(Diagnostic::new(
                            format!("{at}/region"),
                            format!("unknown region {region}"),
                        ));
                    }
                    if !self.balances.contains_key(provider) {
                        ds.push(Diagnostic::new(
                            format!("{at}/provider"),
                            format!("provider {provider} has no genesis balance"),
                        ));
                    }
                    if !rewards_share.in_unit_interval() {
                        ds.push(Diagnostic::new(
                            format!("{at}/rewards_share"),
                            "must be within [0, 1]",
                        ));
                    }
                    if *max_booking_duration == 0 {
                        ds.push(Diagnostic::new(format!("{at}/max_booking_duration"), "must be positive"));
                    }
                    if *commitment_end <= now {
                        ds.push(Diagnostic::new(
                            format!("{at}/commitment_end"),
                            format!("must lie after the registration epoch {}", now.0),
                        ));
                    }
                    nodes.insert(node.clone(), *commitment_end);
                }
                Action::Activate { node } | Action::SetPrice { node, .. } => {
                    if !nodes.contains_key(node) {
                        ds.push(Diagnostic::new(format!("{at}/node"), format!("unknown node {node}")));
                    }
                }
                Action::Retire { node } => match nodes.get(node) {
                    None => {
                        ds.push(Diagnostic::new(format!("{at}/node"), format!("unknown node {node}")))
                    }
                    Some(commitment_end) if now < *commitment_end => {
                        ds.push(Diagnostic::new(
                            format!("{at}/epoch"),
                            format!("node {node} is committed until epoch {}", commitment_end.0),
                        ));
                    }
                    Some(_) => {}
                },
                Action::Deploy { instance, owner, blueprint, requirements, duration, .. } => {
                    if live_until.contains_key(instance) || released.contains(instance) {
                        ds.push(Diagnostic::new(
                            format!("{at}/instance"),
                            "instance id already used",
                        ));
                    }
                    if !self.balances.contains_key(owner) {
                        ds.push(Diagnostic::new(
                            format!("{at}/owner"),
                            format!("owner {owner} has no genesis balance"),
                        ));
                    }
                    match (blueprint, requirements.is_empty()) {
                        (Some(bp), true) => {
                            if !catalogs.blueprints.contains(bp) {
                                ds.push(Diagnostic::new(
                                    format!("{at}/blueprint"),
                                    format!("unknown blueprint {bp}"),
                                ));
                            }
                        }
                        (None, false) => check_requirements(
                            requirements,
                            &catalogs.regions,
                            &format!("{at}/requirements"),
                            ds,
                        ),
                        (Some(_), false) => ds.push(Diagnostic::new(
                            &at,
                            "give either a blueprint or inline requirements, not both",
                        )),
                        (None, true) => ds.push(Diagnostic::new(
                            &at,
                            "a deploy needs a blueprint or inline requirements",
                        )),
                    }
                    if *duration == 0 {
                        ds.push(Diagnostic::new(format!("{at}/duration"), "must be positive"));
                    }
                    live_until.insert(instance.clone(), now.0 + duration);
                }
                Action::Scale { instance, delta, .. } => {
                    check_instance_live(instance, now.0, &live_until, &released, &at, ds);
                    if *delta == 0 {
                        ds.push(Diagnostic::new(format!("{at}/delta"), "must be non-zero"));
                    }
                }
                Action::Release { instance } => {
                    check_instance_live(instance, now.0, &live_until, &released, &at, ds);
                    released.insert(instance.clone());
                    live_until.remove(instance);
                }
                Action::Extend { instance, extra, .. } => {
                    check_instance_live(instance, now.0, &live_until, &released, &at, ds);
                    if *extra == 0 {
                        ds.push(Diagnostic::new(format!("{at}/extra"), "must be positive"));
                    }
                    if let Some(until) = live_until.get_mut(instance) {
                        *until += extra;
                    }
                }
                Action::Stake { staker, target, amount } => {
                    if !known_target(target) {
                        ds.push(Diagnostic::new(
                            format!("{at}/target"),
                            format!("{target} is neither a registered node nor a hypernode"),
                        ));
                    }
                    if !self.balances.contains_key(staker) {
                        ds.push(Diagnostic::new(
                            format!("{at}/staker"),
                            format!("staker {staker} has no genesis balance"),
                        ));
                    }
                    if amount.is_zero() {
                        ds.push(Diagnostic::new(format!("{at}/amount"), "must be positive"));
                    }
                }
                Action::StakeNft { pass, owner, initial_sink, timelock, target } => {
                    if !passes.insert(pass.clone()) {
                        ds.push(Diagnostic::new(format!("{at}/pass"), "pass already staked"));
                    }
                    if !known_target(target) {
                        ds.push(Diagnostic::new(
                            format!("{at}/target"),
                            format!("{target} is neither a registered node nor a hypernode"),
                        ));
                    }
                    if !occupied.insert(target.clone()) {
                        ds.push(Diagnostic::new(
                            format!("{at}/target"),
                            format!("{target} already carries a staked pass (passes are 1:1)"),
                        ));
                    }
                    if !self.balances.contains_key(owner) {
                        ds.push(Diagnostic::new(
                            format!("{at}/owner"),
                            format!("owner {owner} has no genesis balance"),
                        ));
                    }
                    if initial_sink.is_zero() {
                        ds.push(Diagnostic::new(format!("{at}/initial_sink"), "must be positive"));
                    }
                    if *timelock == 0 {
                        ds.push(Diagnostic::new(format!("{at}/timelock"), "must be positive"));
                    }
                }
                Action::InjectFault { node, multiplier, duration } => {
                    let as_node = NodeId::from(node.as_str());
                    let is_service =
                        catalogs.services.iter().any(|s| s.as_str() == node.as_str());
                    if !nodes.contains_key(&as_node) && !is_service {
                        ds.push(Diagnostic::new(
                            format!("{at}/node"),
                            format!("{node} is neither a registered node nor a service"),
                        ));
                    }
                    let _ = multiplier;
                    if *duration == 0 {
                        ds.push(Diagnostic::new(format!("{at}/duration"), "must be positive"));
                    }
                }
            }
        }
    }
}

#[derive(Default)]
struct Catalogs {
    regions: BTreeSet<RegionId>,
    classes: BTreeSet<ClassId>,
    services: BTreeSet<icn_core::types::ServiceId>,
    blueprints: BTreeSet<BlueprintId>,
    hypernodes: BTreeSet<HyperNodeId>,
}

fn check_requirements(
    requirements: &[Requirement],
    regions: &BTreeSet<RegionId>,
    base: &str,
    ds: &mut Vec<Diagnostic>,
) {
    if requirements.is_empty() {
        ds.push(Diagnostic::new(base, "must not be empty"));
    }
    for (i, r) in requirements.iter().enumerate() {
        if r.quantity == 0 {
            ds.push(Diagnostic::new(format!("{base}/{i}/quantity"), "must be positive"));
        }
        if let Some(locality) = &r.locality {
            if locality.is_empty() {
                ds.push(Diagnostic::new(format!("{base}/{i}/locality"), "must not be empty"));
            }
            for (j, region) in locality.iter().enumerate() {
                if !regions.contains(region) {
                    ds.push(Diagnostic::new(
                        format!("{base}/{i}/locality/{j}"),
                        format!("unknown region {region}"),
                    ));
                }
            }
        }
    }
}

fn check_instance_live(
    instance: &InstanceId,
    now: u64,
    live_until: &BTreeMap<InstanceId, u64>,
    released: &BTreeSet<InstanceId>,
    at: &str,
    ds: &mut Vec<Diagnostic>,
) {
    match live_until.get(instance) {
        Some(&until) if now >= until => ds.push(Diagnostic::new(
            format!("{at}/instance"),
            format!("instance {instance} expires at epoch {until}, before this event"),
        )),
        Some(_) => {}
        None if released.contains(instance) => ds.push(Diagnostic::new(
            format!("{at}/instance"),
            format!("instance {instance} was already released"),
        )),
        None => ds.push(Diagnostic::new(
            format!("{at}/instance"),
            format!("unknown instance {instance}"),
        )),
    }
}

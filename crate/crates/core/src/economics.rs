//! Regional economics: per-epoch instance billing, bootstrap emission
//! against regional capacity targets, and reward splits between providers
//! and stakers.
//!
//! Money flow per settled epoch:
//! - every live instance is charged its epoch fee into the escrow account
//!   (instances that prepaid at deploy are not charged twice);
//! - escrowed fees route to the backing nodes exactly (price x units per
//!   node, no rounding), then each node's gross is split provider/stakers;
//! - fees earned by nodes whose aggregate verdict failed are burned;
//! - during a region's bootstrap phase, emission is minted pro-rata to
//!   committed capacity, capped at the regional target per resource type.
//!
//! All splits are exact: provider_cut + sum(staker_cuts) == gross, with the
//! rounding remainder going to the provider.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{Composer, CompositionError};
use crate::ledger::{Ledger, LedgerError};
use crate::registry::{CollateralRates, Registry};
use crate::types::{
    AccountId, CapacityVector, Epoch, InstanceId, NodeId, Rational, RegionId, SubjectId,
    TokenAmount,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EconomicsError {
    #[error("epochs must settle in sequence: expected {expected}, got {got}")]
    SettlementOutOfOrder { expected: Epoch, got: Epoch },
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("ledger error during settlement: {0}")]
    Ledger(#[from] LedgerError),
    #[error("composition error during settlement: {0}")]
    Composition(#[from] CompositionError),
}

type Result<T> = std::result::Result<T, EconomicsError>;

/// Economic parameters of one region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEconomy {
    pub region: RegionId,
    /// Capacity the bootstrap phase aims to attract, per resource type.
    pub target_capacity: CapacityVector,
    /// First epoch with no bootstrap emission.
    pub bootstrap_end: Epoch,
    pub bootstrap_emission_per_epoch: TokenAmount,
    pub collateral_rates: CollateralRates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardSource {
    Bootstrap,
    AccessFee,
}

impl RewardSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardSource::Bootstrap => "bootstrap",
            RewardSource::AccessFee => "access_fee",
        }
    }
}

/// One node's reward for one epoch from one source, already split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardStatement {
    pub epoch: Epoch,
    pub node: NodeId,
    pub source: RewardSource,
    pub gross: TokenAmount,
    pub provider_cut: TokenAmount,
    pub staker_cuts: BTreeMap<AccountId, TokenAmount>,
}

impl RewardStatement {
    pub fn staker_total(&self) -> TokenAmount {
        self.staker_cuts
            .values()
            .fold(TokenAmount::ZERO, |acc, c| acc.checked_add(*c).expect("staker total overflow"))
    }

    /// Split exactness: provider_cut + sum(staker_cuts) == gross.
    pub fn is_exact(&self) -> bool {
        self.provider_cut.checked_add(self.staker_total()) == Some(self.gross)
    }
}

/// What one settlement did, beyond the statements.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementSummary {
    pub fees_charged: TokenAmount,
    pub fees_burned: TokenAmount,
    pub emission_minted: TokenAmount,
    /// Instances force-released because their owner could not pay.
    pub forced_releases: Vec<InstanceId>,
}

/// Splits `gross` between the provider and the stakers: provider gets
/// floor(share x gross), stakers share the remainder pro-rata by weight,
/// and the rounding remainder returns to the provider. With no stakers the
/// provider takes everything.
pub fn split_reward(
    gross: TokenAmount,
    rewards_share: Rational,
    weights: &BTreeMap<AccountId, u128>,
) -> (TokenAmount, BTreeMap<AccountId, TokenAmount>) {
    let provider_base = rewards_share.mul_floor(gross.0).expect("share within [0,1]");
    let pool = gross.0 - provider_base;
    let total_weight: u128 = weights.values().sum();
    let mut cuts = BTreeMap::new();
    let mut distributed = 0u128;
    if total_weight > 0 && pool > 0 {
        for (staker, &w) in weights {
            // floor(pool * w / total). Weights are bounded by total supply,
            // so the product fits u128 at desk scale.
            let cut = pool * w / total_weight;
            if cut > 0 {
                cuts.insert(staker.clone(), TokenAmount(cut));
            }
            distributed += cut;
        }
    }
    (TokenAmount(provider_base + (pool - distributed)), cuts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Economics {
    economies: BTreeMap<RegionId, RegionEconomy>,
    next_epoch: Epoch,
}

impl Economics {
    pub fn new(economies: BTreeMap<RegionId, RegionEconomy>) -> Economics {
        Economics { economies, next_epoch: Epoch(0) }
    }

    pub fn economy(&self, region: &RegionId) -> Option<&RegionEconomy> {
        self.economies.get(region)
    }

    pub fn economies(&self) -> &BTreeMap<RegionId, RegionEconomy> {
        &self.economies
    }

    pub fn collateral_rates(&self, region: &RegionId) -> Result<&CollateralRates> {
        self.economies
            .get(region)
            .map(|e| &e.collateral_rates)
            .ok_or_else(|| EconomicsError::UnknownRegion(region.clone()))
    }

    /// Settles one epoch: billing, fee distribution (or burning for failed
    /// nodes), and bootstrap emission. `prepaid_routes` carries per-node fee
    /// shares already charged into escrow earlier this epoch (at deploy or
    /// release time); `failed` holds subjects whose aggregate verdict failed.
    #[allow(clippy::too_many_arguments)]
    pub fn settle_epoch(
        &mut self,
        epoch: Epoch,
        ledger: &mut Ledger,
        registry: &Registry,
        composer: &mut Composer,
        failed: &BTreeSet<SubjectId>,
        prepaid_routes: BTreeMap<NodeId, TokenAmount>,
        escrow: &AccountId,
    ) -> Result<(Vec<RewardStatement>, SettlementSummary)> {
        if epoch != self.next_epoch {
            return Err(EconomicsError::SettlementOutOfOrder { expected: self.next_epoch, got: epoch });
        }
        self.next_epoch = epoch.next();

        let mut summary = SettlementSummary::default();
        let mut node_gross: BTreeMap<NodeId, TokenAmount> = prepaid_routes;

        // (1) Billing. Instances that cannot pay are force-released without
        // charge; everyone else pays price x units into escrow, routed
        // exactly to the backing nodes.
        let due: Vec<InstanceId> = composer
            .instances()
            .values()
            .filter(|i| i.paid_through < epoch)
            .map(|i| i.id.clone())
            .collect();
        for id in due {
            let instance = composer.instance(&id).unwrap();
            let owner = instance.owner.clone();
            let fee = instance.epoch_fee();
            let routes = instance.units_by_node();
            let prices = instance.fixed_unit_prices.clone();
            match ledger.transfer(&owner, escrow, fee) {
                Ok(()) => {
                    composer.mark_billed(&id, epoch)?;
                    summary.fees_charged =
                        summary.fees_charged.checked_add(fee).expect("fee overflow");
                    for ((node, rtype), units) in routes {
                        let share = prices
                            .get(&rtype)
                            .copied()
                            .unwrap_or(TokenAmount::ZERO)
                            .checked_mul(units as u128)
                            .expect("fee overflow");
                        let slot = node_gross.entry(node).or_insert(TokenAmount::ZERO);
                        *slot = slot.checked_add(share).expect("fee overflow");
                    }
                }
                Err(LedgerError::InsufficientBalance { .. }) => {
                    composer.release(&id)?;
                    summary.forced_releases.push(id);
                }
                Err(e) => return Err(e.into()),
            }
        }

        // (2) Distribute access fees per node, burning the shares of failed
        // nodes.
        let mut statements = Vec::new();
        for (node_id, gross) in node_gross {
            if gross.is_zero() {
                continue;
            }
            let subject = SubjectId::from(&node_id);
            if failed.contains(&subject) {
                ledger.burn_from(escrow, gross)?;
                summary.fees_burned = summary.fees_burned.checked_add(gross).expect("fee overflow");
                continue;
            }
            let Some(node) = registry.node(&node_id) else {
                // Node vanished from the registry (cannot happen through the
                // public API); burn rather than strand the tokens in escrow.
                ledger.burn_from(escrow, gross)?;
                summary.fees_burned = summary.fees_burned.checked_add(gross).expect("fee overflow");
                continue;
            };
            let weights = ledger.staker_weights(&node_id);
            let (provider_cut, staker_cuts) = split_reward(gross, node.rewards_share, &weights);
            ledger.transfer(escrow, &node.provider, provider_cut)?;
            for (staker, cut) in &staker_cuts {
                ledger.transfer(escrow, staker, *cut)?;
            }
            statements.push(RewardStatement {
                epoch,
                node: node_id,
                source: RewardSource::AccessFee,
                gross,
                provider_cut,
                staker_cuts,
            });
        }

        // (3) Bootstrap emission, per region, while epoch < bootstrap_end.
        for economy in self.economies.values() {
            if epoch >= economy.bootstrap_end || economy.bootstrap_emission_per_epoch.is_zero() {
                continue;
            }
            let active: Vec<&crate::registry::ScalerNode> = registry
                .active_nodes()
                .filter(|n| n.region == economy.region)
                .collect();
            if active.is_empty() {
                continue;
            }
            let targeted_types: Vec<_> = economy
                .target_capacity
                .iter()
                .filter(|(_, &target)| target > 0)
                .map(|(t, &target)| (t.clone(), target))
                .collect();
            if targeted_types.is_empty() {
                continue;
            }
            // Emission splits equally across targeted types; each type is
            // settled independently.
            let per_type = TokenAmount(economy.bootstrap_emission_per_epoch.0 / targeted_types.len() as u128);
            let mut node_payout: BTreeMap<NodeId, TokenAmount> = BTreeMap::new();
            for (rtype, target) in &targeted_types {
                let committed: u128 = active.iter().map(|n| n.capacity.get(rtype) as u128).sum();
                if committed == 0 {
                    continue;
                }
                for node in &active {
                    let c = node.capacity.get(rtype) as u128;
                    if c == 0 {
                        continue;
                    }
                    // Credited capacity capped pro-rata at the regional
                    // target, then paid at the per-unit rate E_t / target.
                    let credited =
                        if committed <= *target as u128 { c } else { c * *target as u128 / committed };
                    let payout = credited * per_type.0 / *target as u128;
                    let slot = node_payout.entry(node.id.clone()).or_insert(TokenAmount::ZERO);
                    *slot = slot.checked_add(TokenAmount(payout)).expect("emission overflow");
                }
            }
            for (node_id, gross) in node_payout {
                if gross.is_zero() {
                    continue;
                }
                if failed.contains(&SubjectId::from(&node_id)) {
                    // Failed nodes earn nothing; the emission is simply not
                    // minted.
                    continue;
                }
                let node = registry.node(&node_id).unwrap();
                let weights = ledger.staker_weights(&node_id);
                let (provider_cut, staker_cuts) = split_reward(gross, node.rewards_share, &weights);
                ledger.mint_emission(&node.provider, provider_cut)?;
                for (staker, cut) in &staker_cuts {
                    ledger.mint_emission(staker, *cut)?;
                }
                summary.emission_minted =
                    summary.emission_minted.checked_add(gross).expect("emission overflow");
                statements.push(RewardStatement {
                    epoch,
                    node: node_id,
                    source: RewardSource::Bootstrap,
                    gross,
                    provider_cut,
                    staker_cuts,
                });
            }
        }

        statements.sort_by(|a, b| {
            (&a.node, a.source.as_str()).cmp(&(&b.node, b.source.as_str()))
        });
        debug_assert!(statements.iter().all(|s| s.is_exact()));
        Ok((statements, summary))
    }
}

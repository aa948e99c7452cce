//! The coordination ledger standing in for the blockchain: accounts, token
//! movements, collateral locks, third-party stakes, NFT pass lifecycle,
//! slashing, and the append-only proof-anchor log.
//!
//! The ledger is a pure deterministic state machine. It never consults a
//! clock; the current epoch advances only through [`Ledger::advance_epoch`].
//! Every token is accounted for at all times:
//!
//! ```text
//! balances + locks + stakes + sinks + burned - emitted == genesis supply
//! ```
//!
//! [`Ledger::check_conservation`] asserts that identity exactly, in integer
//! arithmetic, after any operation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AccountId, Epoch, Hash32, NftId, NodeId, Rational, SubjectId, TokenAmount};

/// Id of a ScalerNode or HyperNode that security positions attach to.
pub type TargetId = NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("insufficient balance: account {account} holds {available}, needs {required}")]
    InsufficientBalance { account: AccountId, available: TokenAmount, required: TokenAmount },
    #[error("amount must be positive")]
    InvalidAmount,
    #[error("lock must end after the current epoch")]
    InvalidDuration,
    #[error("unknown collateral lock {0}")]
    UnknownLock(u64),
    #[error("lock {lock} is locked until epoch {until}")]
    StillLocked { lock: u64, until: Epoch },
    #[error("severity must be within [0, 1]")]
    SeverityOutOfRange,
    #[error("no security positions attached to {0}")]
    UnknownNode(TargetId),
    #[error("invalid NFT parameters: {0}")]
    InvalidParameters(String),
    #[error("unknown NFT pass {0}")]
    UnknownPass(NftId),
    #[error("pass {0} is already staked")]
    AlreadyStaked(NftId),
    #[error("target {0} already holds a staked pass")]
    NodeOccupied(TargetId),
    #[error("pass {0} has fully decayed and provides no security")]
    FullyDecayed(NftId),
    #[error("anchor already recorded for this (epoch, subject, submitter)")]
    DuplicateAnchor,
    #[error("account {0} is not a registered proof submitter")]
    UnauthorizedSubmitter(AccountId),
    #[error("token arithmetic overflow")]
    ArithmeticOverflow,
}

type Result<T> = std::result::Result<T, LedgerError>;

/// Tokens locked by a provider against a node for a commitment period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollateralLock {
    pub owner: AccountId,
    pub node: TargetId,
    pub amount: TokenAmount,
    pub locked_until: Epoch,
}

/// Third-party stake backing a node or HyperNode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakePosition {
    pub staker: AccountId,
    pub node: TargetId,
    pub amount: TokenAmount,
}

/// Stakeable pass holding a time-locked value sink that decays into staker
/// rewards while providing slashable security, 1:1 per target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NftPass {
    pub id: NftId,
    pub owner: AccountId,
    pub sink_value: TokenAmount,
    pub initial_sink: TokenAmount,
    pub timelock_epochs: u64,
    pub staked_to: Option<TargetId>,
    pub decay_multiplier: Rational,
}

impl NftPass {
    /// Sink drained per epoch while staked:
    /// `min(sink, floor(multiplier * initial_sink / timelock))`, but at
    /// least one token while the sink is positive so every pass exhausts.
    pub fn decay_step(&self) -> TokenAmount {
        let per_epoch = Rational::new(self.initial_sink.0, self.timelock_epochs as u128);
        let step = self
            .decay_multiplier
            .checked_mul(&per_epoch)
            .and_then(|r| r.mul_floor(1))
            .unwrap_or(self.sink_value.0)
            .max(1);
        TokenAmount(step.min(self.sink_value.0))
    }
}

/// Append-only record binding a Merkle root to (epoch, subject, submitter).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofAnchor {
    pub epoch: Epoch,
    pub subject: SubjectId,
    pub root: Hash32,
    pub submitter: AccountId,
}

/// Per-position burn amounts produced by a slash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlashOutcome {
    pub target: TargetId,
    pub severity: Rational,
    pub burned_from_locks: Vec<(u64, TokenAmount)>,
    pub burned_from_stakes: Vec<(u64, TokenAmount)>,
    /// New decay multiplier if a staked pass was accelerated.
    pub nft_accelerated: Option<(NftId, Rational)>,
    pub total_burned: TokenAmount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecayPayout {
    pub pass: NftId,
    pub owner: AccountId,
    pub amount: TokenAmount,
}

/// What changed when the epoch advanced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// The new current epoch.
    pub epoch: Epoch,
    pub decay_payouts: Vec<DecayPayout>,
    /// Locks whose `locked_until` was reached this epoch (now releasable).
    pub expired_locks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    epoch: Epoch,
    genesis_supply: TokenAmount,
    accounts: BTreeMap<AccountId, TokenAmount>,
    locks: BTreeMap<u64, CollateralLock>,
    next_lock_id: u64,
    stakes: BTreeMap<u64, StakePosition>,
    next_stake_id: u64,
    passes: BTreeMap<NftId, NftPass>,
    staked_pass_by_target: BTreeMap<TargetId, NftId>,
    anchors: Vec<ProofAnchor>,
    anchor_keys: BTreeSet<(Epoch, SubjectId, AccountId)>,
    authorized_submitters: BTreeSet<AccountId>,
    burned_total: TokenAmount,
    emitted_total: TokenAmount,
}

impl Ledger {
    /// Creates the ledger at epoch 0 with the given genesis balances; the
    /// genesis supply is their sum and stays fixed apart from explicit
    /// emission.
    pub fn new(initial_balances: BTreeMap<AccountId, TokenAmount>) -> Ledger {
        let genesis_supply = initial_balances
            .values()
            .fold(TokenAmount::ZERO, |acc, b| acc.checked_add(*b).expect("genesis supply overflow"));
        Ledger {
            epoch: Epoch(0),
            genesis_supply,
            accounts: initial_balances,
            locks: BTreeMap::new(),
            next_lock_id: 0,
            stakes: BTreeMap::new(),
            next_stake_id: 0,
            passes: BTreeMap::new(),
            staked_pass_by_target: BTreeMap::new(),
            anchors: Vec::new(),
            anchor_keys: BTreeSet::new(),
            authorized_submitters: BTreeSet::new(),
            burned_total: TokenAmount::ZERO,
            emitted_total: TokenAmount::ZERO,
        }
    }

    pub fn current_epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn genesis_supply(&self) -> TokenAmount {
        self.genesis_supply
    }

    pub fn burned_total(&self) -> TokenAmount {
        self.burned_total
    }

    pub fn emitted_total(&self) -> TokenAmount {
        self.emitted_total
    }

    pub fn balance(&self, account: &AccountId) -> Result<TokenAmount> {
        self.accounts
            .get(account)
            .copied()
            .ok_or_else(|| LedgerError::UnknownAccount(account.clone()))
    }

    pub fn accounts(&self) -> &BTreeMap<AccountId, TokenAmount> {
        &self.accounts
    }

    /// Creates the account with zero balance if absent.
    pub fn open_account(&mut self, account: AccountId) {
        self.accounts.entry(account).or_insert(TokenAmount::ZERO);
    }

    fn debit(&mut self, account: &AccountId, amount: TokenAmount) -> Result<()> {
        let balance = self.balance(account)?;
        let updated = balance.checked_sub(amount).ok_or(LedgerError::InsufficientBalance {
            account: account.clone(),
            available: balance,
            required: amount,
        })?;
        self.accounts.insert(account.clone(), updated);
        Ok(())
    }

    fn credit(&mut self, account: &AccountId, amount: TokenAmount) -> Result<()> {
        let balance = self.balance(account)?;
        let updated = balance.checked_add(amount).ok_or(LedgerError::ArithmeticOverflow)?;
        self.accounts.insert(account.clone(), updated);
        Ok(())
    }

    pub fn transfer(&mut self, from: &AccountId, to: &AccountId, amount: TokenAmount) -> Result<()> {
        // Validate the receiving side before mutating anything.
        self.balance(to)?;
        self.debit(from, amount)?;
        self.credit(to, amount)
    }

    // ---- collateral ----

    pub fn lock_collateral(
        &mut self,
        owner: &AccountId,
        node: &TargetId,
        amount: TokenAmount,
        until: Epoch,
    ) -> Result<u64> {
        if amount.is_zero() {
            return Err(LedgerError::InvalidAmount);
        }
        if until <= self.epoch {
            return Err(LedgerError::InvalidDuration);
        }
        self.debit(owner, amount)?;
        let id = self.next_lock_id;
        self.next_lock_id += 1;
        self.locks.insert(
            id,
            CollateralLock { owner: owner.clone(), node: node.clone(), amount, locked_until: until },
        );
        Ok(id)
    }

    /// Returns the lock's remaining amount to its owner. Only allowed once
    /// the commitment period has fully elapsed.
    pub fn release_collateral(&mut self, lock_id: u64) -> Result<TokenAmount> {
        let lock = self.locks.get(&lock_id).ok_or(LedgerError::UnknownLock(lock_id))?;
        if self.epoch < lock.locked_until {
            return Err(LedgerError::StillLocked { lock: lock_id, until: lock.locked_until });
        }
        let lock = self.locks.remove(&lock_id).unwrap();
        self.credit(&lock.owner, lock.amount)?;
        Ok(lock.amount)
    }

    pub fn lock(&self, lock_id: u64) -> Option<&CollateralLock> {
        self.locks.get(&lock_id)
    }

    pub fn locks(&self) -> &BTreeMap<u64, CollateralLock> {
        &self.locks
    }

    /// Total collateral currently locked against `node`.
    pub fn collateral_for(&self, node: &TargetId) -> TokenAmount {
        self.locks
            .values()
            .filter(|l| &l.node == node)
            .fold(TokenAmount::ZERO, |acc, l| acc.checked_add(l.amount).expect("collateral overflow"))
    }

    // ---- stakes ----

    pub fn add_stake(
        &mut self,
        staker: &AccountId,
        target: &TargetId,
        amount: TokenAmount,
    ) -> Result<u64> {
        if amount.is_zero() {
            return Err(LedgerError::InvalidAmount);
        }
        self.debit(staker, amount)?;
        let id = self.next_stake_id;
        self.next_stake_id += 1;
        self.stakes
            .insert(id, StakePosition { staker: staker.clone(), node: target.clone(), amount });
        Ok(id)
    }

    pub fn stakes(&self) -> &BTreeMap<u64, StakePosition> {
        &self.stakes
    }

    pub fn stake_total_for(&self, target: &TargetId) -> TokenAmount {
        self.stakes
            .values()
            .filter(|s| &s.node == target)
            .fold(TokenAmount::ZERO, |acc, s| acc.checked_add(s.amount).expect("stake overflow"))
    }

    /// Slashable security attached to `target`: token stakes plus a staked
    /// pass's remaining sink. Collateral locks are tracked separately.
    pub fn security_for(&self, target: &TargetId) -> TokenAmount {
        let stake = self.stake_total_for(target);
        let sink = self
            .staked_pass_by_target
            .get(target)
            .and_then(|id| self.passes.get(id))
            .map(|p| p.sink_value)
            .unwrap_or(TokenAmount::ZERO);
        stake.checked_add(sink).expect("security overflow")
    }

    /// Whether any slashable position (lock, stake, or staked pass) is
    /// attached to `target`.
    pub fn has_security_positions(&self, target: &TargetId) -> bool {
        self.locks.values().any(|l| &l.node == target)
            || self.stakes.values().any(|s| &s.node == target)
            || self.staked_pass_by_target.contains_key(target)
    }

    /// Reward weights for the staker split on `target`: token stakes
    /// aggregated per staker, plus a staked pass's sink at face value
    /// credited to the pass owner.
    pub fn staker_weights(&self, target: &TargetId) -> BTreeMap<AccountId, u128> {
        let mut weights: BTreeMap<AccountId, u128> = BTreeMap::new();
        for stake in self.stakes.values().filter(|s| &s.node == target) {
            *weights.entry(stake.staker.clone()).or_insert(0) += stake.amount.0;
        }
        if let Some(pass) = self.staked_pass_by_target.get(target).and_then(|id| self.passes.get(id))
        {
            if !pass.sink_value.is_zero() {
                *weights.entry(pass.owner.clone()).or_insert(0) += pass.sink_value.0;
            }
        }
        weights
    }

    // ---- slashing ----

    /// Burns `floor(severity * amount)` from every collateral lock and stake
    /// on `target` and accelerates a staked pass's decay by `(1 + severity)`.
    pub fn slash(&mut self, target: &TargetId, severity: Rational) -> Result<SlashOutcome> {
        if !severity.in_unit_interval() {
            return Err(LedgerError::SeverityOutOfRange);
        }
        let lock_ids: Vec<u64> =
            self.locks.iter().filter(|(_, l)| &l.node == target).map(|(id, _)| *id).collect();
        let stake_ids: Vec<u64> =
            self.stakes.iter().filter(|(_, s)| &s.node == target).map(|(id, _)| *id).collect();
        let staked_pass = self.staked_pass_by_target.get(target).cloned();
        if lock_ids.is_empty() && stake_ids.is_empty() && staked_pass.is_none() {
            return Err(LedgerError::UnknownNode(target.clone()));
        }

        let mut outcome = SlashOutcome {
            target: target.clone(),
            severity,
            burned_from_locks: Vec::new(),
            burned_from_stakes: Vec::new(),
            nft_accelerated: None,
            total_burned: TokenAmount::ZERO,
        };

        for id in lock_ids {
            let lock = self.locks.get_mut(&id).unwrap();
            let burn = severity.mul_floor(lock.amount.0).ok_or(LedgerError::ArithmeticOverflow)?;
            lock.amount = TokenAmount(lock.amount.0 - burn);
            if burn > 0 {
                outcome.burned_from_locks.push((id, TokenAmount(burn)));
            }
            outcome.total_burned = TokenAmount(outcome.total_burned.0 + burn);
        }
        for id in stake_ids {
            let stake = self.stakes.get_mut(&id).unwrap();
            let burn = severity.mul_floor(stake.amount.0).ok_or(LedgerError::ArithmeticOverflow)?;
            stake.amount = TokenAmount(stake.amount.0 - burn);
            if burn > 0 {
                outcome.burned_from_stakes.push((id, TokenAmount(burn)));
            }
            outcome.total_burned = TokenAmount(outcome.total_burned.0 + burn);
            // A stake position must hold a positive amount; fully slashed
            // positions are dropped.
            if self.stakes.get(&id).unwrap().amount.is_zero() {
                self.stakes.remove(&id);
            }
        }
        if let Some(pass_id) = staked_pass {
            let pass = self.passes.get_mut(&pass_id).unwrap();
            let factor = Rational::one().checked_add(&severity).ok_or(LedgerError::ArithmeticOverflow)?;
            pass.decay_multiplier = pass
                .decay_multiplier
                .checked_mul(&factor)
                .ok_or(LedgerError::ArithmeticOverflow)?;
            outcome.nft_accelerated = Some((pass_id, pass.decay_multiplier));
        }

        self.burned_total = self
            .burned_total
            .checked_add(outcome.total_burned)
            .ok_or(LedgerError::ArithmeticOverflow)?;
        Ok(outcome)
    }

    // ---- NFT passes ----

    /// Moves `initial_sink` from the owner's balance into a fresh pass's
    /// time-locked sink.
    pub fn mint_nft(
        &mut self,
        id: NftId,
        owner: &AccountId,
        initial_sink: TokenAmount,
        timelock_epochs: u64,
    ) -> Result<()> {
        if initial_sink.is_zero() {
            return Err(LedgerError::InvalidParameters("initial_sink must be positive".into()));
        }
        if timelock_epochs == 0 {
            return Err(LedgerError::InvalidParameters("timelock_epochs must be positive".into()));
        }
        if self.passes.contains_key(&id) {
            return Err(LedgerError::InvalidParameters(format!("pass {id} already exists")));
        }
        self.debit(owner, initial_sink)?;
        self.passes.insert(
            id.clone(),
            NftPass {
                id,
                owner: owner.clone(),
                sink_value: initial_sink,
                initial_sink,
                timelock_epochs,
                staked_to: None,
                decay_multiplier: Rational::one(),
            },
        );
        Ok(())
    }

    pub fn pass(&self, id: &NftId) -> Option<&NftPass> {
        self.passes.get(id)
    }

    pub fn passes(&self) -> &BTreeMap<NftId, NftPass> {
        &self.passes
    }

    pub fn staked_pass_for(&self, target: &TargetId) -> Option<&NftPass> {
        self.staked_pass_by_target.get(target).and_then(|id| self.passes.get(id))
    }

    /// Binds a pass 1:1 to a target; its sink then counts as security and
    /// begins decaying into the owner's balance each epoch.
    pub fn stake_nft(&mut self, pass_id: &NftId, target: &TargetId) -> Result<()> {
        let pass =
            self.passes.get(pass_id).ok_or_else(|| LedgerError::UnknownPass(pass_id.clone()))?;
        if pass.staked_to.is_some() {
            return Err(LedgerError::AlreadyStaked(pass_id.clone()));
        }
        if pass.sink_value.is_zero() {
            return Err(LedgerError::FullyDecayed(pass_id.clone()));
        }
        if self.staked_pass_by_target.contains_key(target) {
            return Err(LedgerError::NodeOccupied(target.clone()));
        }
        self.passes.get_mut(pass_id).unwrap().staked_to = Some(target.clone());
        self.staked_pass_by_target.insert(target.clone(), pass_id.clone());
        Ok(())
    }

    // ---- epoch advancement ----

    /// Increments the epoch, streams decay from every staked pass to its
    /// owner, and reports locks that just became releasable. Unstaked passes
    /// do not decay.
    pub fn advance_epoch(&mut self) -> Result<EpochSummary> {
        self.epoch = self.epoch.next();
        let mut payouts = Vec::new();
        let pass_ids: Vec<NftId> = self.passes.keys().cloned().collect();
        for id in pass_ids {
            let pass = self.passes.get(&id).unwrap();
            if pass.staked_to.is_none() || pass.sink_value.is_zero() {
                continue;
            }
            let step = pass.decay_step();
            if step.is_zero() {
                continue;
            }
            let owner = pass.owner.clone();
            let pass = self.passes.get_mut(&id).unwrap();
            pass.sink_value = TokenAmount(pass.sink_value.0 - step.0);
            self.credit(&owner, step)?;
            payouts.push(DecayPayout { pass: id, owner, amount: step });
        }
        let expired = self
            .locks
            .iter()
            .filter(|(_, l)| l.locked_until == self.epoch)
            .map(|(id, _)| *id)
            .collect();
        Ok(EpochSummary { epoch: self.epoch, decay_payouts: payouts, expired_locks: expired })
    }

    // ---- emission and burning ----

    /// Mints new tokens to `account`, recording them in `emitted_total` so
    /// the conservation identity stays balanced.
    pub fn mint_emission(&mut self, account: &AccountId, amount: TokenAmount) -> Result<()> {
        self.credit(account, amount)?;
        self.emitted_total =
            self.emitted_total.checked_add(amount).ok_or(LedgerError::ArithmeticOverflow)?;
        Ok(())
    }

    /// Removes tokens from `account` out of circulation.
    pub fn burn_from(&mut self, account: &AccountId, amount: TokenAmount) -> Result<()> {
        self.debit(account, amount)?;
        self.burned_total =
            self.burned_total.checked_add(amount).ok_or(LedgerError::ArithmeticOverflow)?;
        Ok(())
    }

    // ---- proof anchors ----

    pub fn register_submitter(&mut self, account: AccountId) {
        self.authorized_submitters.insert(account);
    }

    pub fn is_authorized_submitter(&self, account: &AccountId) -> bool {
        self.authorized_submitters.contains(account)
    }

    /// Appends a proof anchor. Anchors are never mutated or deleted.
    pub fn record_proof_anchor(
        &mut self,
        submitter: &AccountId,
        subject: &SubjectId,
        epoch: Epoch,
        root: Hash32,
    ) -> Result<u64> {
        if !self.authorized_submitters.contains(submitter) {
            return Err(LedgerError::UnauthorizedSubmitter(submitter.clone()));
        }
        let key = (epoch, subject.clone(), submitter.clone());
        if self.anchor_keys.contains(&key) {
            return Err(LedgerError::DuplicateAnchor);
        }
        self.anchor_keys.insert(key);
        let id = self.anchors.len() as u64;
        self.anchors.push(ProofAnchor {
            epoch,
            subject: subject.clone(),
            root,
            submitter: submitter.clone(),
        });
        Ok(id)
    }

    pub fn anchor(&self, id: u64) -> Option<&ProofAnchor> {
        self.anchors.get(id as usize)
    }

    pub fn anchors(&self) -> &[ProofAnchor] {
        &self.anchors
    }

    // ---- conservation ----

    /// Sum of every value bucket, for auditing.
    pub fn conservation_terms(&self) -> ConservationTerms {
        let sum =
            |it: &mut dyn Iterator<Item = u128>| it.fold(0u128, |a, b| a.checked_add(b).unwrap());
        ConservationTerms {
            balances: TokenAmount(sum(&mut self.accounts.values().map(|b| b.0))),
            locks: TokenAmount(sum(&mut self.locks.values().map(|l| l.amount.0))),
            stakes: TokenAmount(sum(&mut self.stakes.values().map(|s| s.amount.0))),
            sinks: TokenAmount(sum(&mut self.passes.values().map(|p| p.sink_value.0))),
            burned: self.burned_total,
            emitted: self.emitted_total,
            genesis: self.genesis_supply,
        }
    }

    /// Verifies `balances + locks + stakes + sinks + burned - emitted ==
    /// genesis supply`, exactly.
    pub fn check_conservation(&self) -> std::result::Result<(), ConservationTerms> {
        let terms = self.conservation_terms();
        if terms.holds() {
            Ok(())
        } else {
            Err(terms)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConservationTerms {
    pub balances: TokenAmount,
    pub locks: TokenAmount,
    pub stakes: TokenAmount,
    pub sinks: TokenAmount,
    pub burned: TokenAmount,
    pub emitted: TokenAmount,
    pub genesis: TokenAmount,
}

impl ConservationTerms {
    pub fn holds(&self) -> bool {
        let held = self
            .balances
            .0
            .checked_add(self.locks.0)
            .and_then(|v| v.checked_add(self.stakes.0))
            .and_then(|v| v.checked_add(self.sinks.0))
            .and_then(|v| v.checked_add(self.burned.0));
        match held {
            Some(total) => {
                // total - emitted == genesis, rearranged to avoid underflow
                total == self.genesis.0.saturating_add(self.emitted.0)
            }
            None => false,
        }
    }
}

impl std::fmt::Display for ConservationTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "balances={} locks={} stakes={} sinks={} burned={} emitted={} genesis={}",
            self.balances, self.locks, self.stakes, self.sinks, self.burned, self.emitted,
            self.genesis
        )
    }
}

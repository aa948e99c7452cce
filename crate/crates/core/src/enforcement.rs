//! Performance enforcement: the HyperNode network. Schedules per-class
//! challenges against ScalerNodes (and service subjects), simulates
//! measurements, aggregates replicated reports by median, keeps reports in
//! a retention-limited satellite store, commits Merkle roots on-ledger, and
//! turns failing aggregates into fault events with proportional severity.
//!
//! Everything is deterministic: assignments and measurement noise come from
//! the seeded hash stream, and report serialization is canonical JSON so
//! hashes are byte-stable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json;
use crate::ledger::{Ledger, LedgerError};
use crate::merkle::{leaf_hash, MerkleProof, MerkleTree};
use crate::rng::DeterministicStream;
use crate::types::{
    AccountId, ChallengeKindId, ClassId, Epoch, Hash32, HyperNodeId, NodeId, Rational, ServiceId,
    SubjectId,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnforcementError {
    #[error("malformed challenge spec: {0}")]
    MalformedSpec(String),
    #[error("challenge kind {0} is already registered")]
    DuplicateSpec(ChallengeKindId),
    #[error("unknown challenge subject {0}")]
    UnknownSubject(String),
    #[error("no eligible hypernodes")]
    NoEligibleHyperNodes,
    #[error("unknown hypernode {0}")]
    UnknownHyperNode(HyperNodeId),
    #[error("hypernode {0} is already registered")]
    DuplicateHyperNode(HyperNodeId),
    #[error("report already stored for this (epoch, subject, challenger)")]
    DuplicateReport,
    #[error("missing reports for {subject} at epoch {epoch}")]
    ReportsMissing { epoch: Epoch, subject: SubjectId },
    #[error("unknown anchor {0}")]
    UnknownAnchor(u64),
    #[error("ledger rejected the anchor: {0}")]
    Ledger(#[from] LedgerError),
}

type Result<T> = std::result::Result<T, EnforcementError>;

/// What a challenge kind applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeSubject {
    Class(ClassId),
    Service(ServiceId),
}

/// A registered challenge kind: which KPIs it measures and the fraction of
/// nominal each must reach to pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeSpec {
    pub kind: ChallengeKindId,
    pub subject: ChallengeSubject,
    pub kpis: Vec<String>,
    /// KPI -> minimum fraction of nominal, each in (0, 1].
    pub pass_thresholds: BTreeMap<String, Rational>,
}

impl ChallengeSpec {
    fn validate(&self) -> Result<()> {
        if self.kpis.is_empty() {
            return Err(EnforcementError::MalformedSpec("kpis must not be empty".into()));
        }
        for kpi in &self.kpis {
            let Some(thr) = self.pass_thresholds.get(kpi) else {
                return Err(EnforcementError::MalformedSpec(format!(
                    "kpi {kpi} has no pass threshold"
                )));
            };
            if thr.is_zero() || !thr.in_unit_interval() {
                return Err(EnforcementError::MalformedSpec(format!(
                    "threshold for {kpi} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperNode {
    pub id: HyperNodeId,
    pub operator: AccountId,
}

/// One scheduled (challenger, subject, kind) triple for an epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeAssignment {
    pub epoch: Epoch,
    pub challenger: HyperNodeId,
    pub subject: SubjectId,
    pub kind: ChallengeKindId,
}

/// One challenger's measurements of one subject in one epoch. Canonical
/// serialization (sorted keys, integer milli-units) is the hashing format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub epoch: Epoch,
    pub subject: SubjectId,
    pub challenger: HyperNodeId,
    /// KPI -> measured value in milli-units.
    pub kpis: BTreeMap<String, u64>,
    /// KPI -> measured >= threshold x nominal.
    pub verdict: BTreeMap<String, bool>,
}

impl PerformanceReport {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_json(self).expect("report serialization cannot fail")
    }
}

/// The per-subject aggregate hashed into the Merkle tree as the final leaf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateLeaf {
    pub epoch: Epoch,
    pub subject: SubjectId,
    pub medians: BTreeMap<String, u64>,
    pub verdict: BTreeMap<String, bool>,
    pub pass: bool,
}

/// Stored aggregation outcome: the leaf plus its on-ledger anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub leaf: AggregateLeaf,
    pub anchor: u64,
    pub root: Hash32,
}

/// A failing aggregate, ready to be slashed with proportional severity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub epoch: Epoch,
    pub subject: SubjectId,
    /// Relative shortfall of the worst failing KPI median, in [0, 1].
    pub severity: Rational,
    pub failed_kpis: Vec<String>,
}

/// A challenger whose report strayed outside the noise envelope around the
/// median.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengerFault {
    pub epoch: Epoch,
    pub subject: SubjectId,
    pub challenger: HyperNodeId,
    pub kpi: String,
    pub measured: u64,
    pub median: u64,
}

/// Retention-limited report store. Entries are immutable while retained and
/// evicted once `current_epoch - report.epoch >= retention_epochs`; their
/// ledger anchors outlive them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatelliteStore {
    retention_epochs: u64,
    entries: BTreeMap<Epoch, BTreeMap<SubjectId, BTreeMap<HyperNodeId, PerformanceReport>>>,
}

impl SatelliteStore {
    pub fn new(retention_epochs: u64) -> SatelliteStore {
        assert!(retention_epochs > 0, "retention must be positive");
        SatelliteStore { retention_epochs, entries: BTreeMap::new() }
    }

    pub fn retention_epochs(&self) -> u64 {
        self.retention_epochs
    }

    pub fn insert(&mut self, report: PerformanceReport) -> Result<()> {
        let per_subject = self
            .entries
            .entry(report.epoch)
            .or_default()
            .entry(report.subject.clone())
            .or_default();
        if per_subject.contains_key(&report.challenger) {
            return Err(EnforcementError::DuplicateReport);
        }
        per_subject.insert(report.challenger.clone(), report);
        Ok(())
    }

    pub fn get(
        &self,
        epoch: Epoch,
        subject: &SubjectId,
        challenger: &HyperNodeId,
    ) -> Option<&PerformanceReport> {
        self.entries.get(&epoch)?.get(subject)?.get(challenger)
    }

    /// All retained reports for (epoch, subject), in challenger order.
    pub fn reports_for(&self, epoch: Epoch, subject: &SubjectId) -> Vec<&PerformanceReport> {
        self.entries
            .get(&epoch)
            .and_then(|m| m.get(subject))
            .map(|m| m.values().collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.values().flat_map(|m| m.values()).map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every entry older than the retention window.
    pub fn evict(&mut self, now: Epoch) {
        let keep_from = now.0.saturating_sub(self.retention_epochs - 1);
        self.entries = self.entries.split_off(&Epoch(keep_from));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enforcement {
    specs: BTreeMap<ChallengeKindId, ChallengeSpec>,
    hypernodes: BTreeMap<HyperNodeId, HyperNode>,
    store: SatelliteStore,
    aggregates: BTreeMap<Epoch, BTreeMap<SubjectId, AggregateRecord>>,
    /// Latest medians per subject, kept beyond retention for allocation
    /// scoring.
    latest_medians: BTreeMap<SubjectId, BTreeMap<String, u64>>,
}

impl Enforcement {
    pub fn new(retention_epochs: u64) -> Enforcement {
        Enforcement {
            specs: BTreeMap::new(),
            hypernodes: BTreeMap::new(),
            store: SatelliteStore::new(retention_epochs),
            aggregates: BTreeMap::new(),
            latest_medians: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &SatelliteStore {
        &self.store
    }

    pub fn specs(&self) -> &BTreeMap<ChallengeKindId, ChallengeSpec> {
        &self.specs
    }

    pub fn hypernodes(&self) -> &BTreeMap<HyperNodeId, HyperNode> {
        &self.hypernodes
    }

    pub fn latest_medians(&self) -> &BTreeMap<SubjectId, BTreeMap<String, u64>> {
        &self.latest_medians
    }

    /// The latest medians re-keyed by node id, for composition scoring.
    /// Service subjects carry over under their shared id space.
    pub fn latest_medians_by_node(&self) -> BTreeMap<NodeId, BTreeMap<String, u64>> {
        self.latest_medians
            .iter()
            .map(|(subject, medians)| (NodeId::from(subject.as_str()), medians.clone()))
            .collect()
    }

    pub fn aggregate(&self, epoch: Epoch, subject: &SubjectId) -> Option<&AggregateRecord> {
        self.aggregates.get(&epoch)?.get(subject)
    }

    pub fn aggregates_for(&self, epoch: Epoch) -> Option<&BTreeMap<SubjectId, AggregateRecord>> {
        self.aggregates.get(&epoch)
    }

    /// Registers a challenge kind. `subject_known` is the caller's check
    /// that the referenced class or service exists.
    pub fn register_spec(&mut self, spec: ChallengeSpec, subject_known: bool) -> Result<()> {
        spec.validate()?;
        if !subject_known {
            let name = match &spec.subject {
                ChallengeSubject::Class(c) => c.to_string(),
                ChallengeSubject::Service(s) => s.to_string(),
            };
            return Err(EnforcementError::UnknownSubject(name));
        }
        if self.specs.contains_key(&spec.kind) {
            return Err(EnforcementError::DuplicateSpec(spec.kind));
        }
        self.specs.insert(spec.kind.clone(), spec);
        Ok(())
    }

    pub fn register_hypernode(&mut self, id: HyperNodeId, operator: AccountId) -> Result<()> {
        if self.hypernodes.contains_key(&id) {
            return Err(EnforcementError::DuplicateHyperNode(id));
        }
        self.hypernodes.insert(id.clone(), HyperNode { id, operator });
        Ok(())
    }

    /// Assigns `k` distinct challengers (clamped to the eligible count) to
    /// every subject, as a pure function of (seed, epoch, subject). Each
    /// assigned challenger covers every challenge kind of the subject.
    pub fn schedule_challenges(
        &self,
        epoch: Epoch,
        seed: u64,
        replication: usize,
        subjects: &[(SubjectId, Vec<ChallengeKindId>)],
        eligible: &[HyperNodeId],
    ) -> Result<Vec<ChallengeAssignment>> {
        if eligible.is_empty() {
            return Err(EnforcementError::NoEligibleHyperNodes);
        }
        let mut eligible: Vec<HyperNodeId> = eligible.to_vec();
        eligible.sort();
        eligible.dedup();
        let k = replication.min(eligible.len());
        let mut assignments = Vec::new();
        for (subject, kinds) in subjects {
            if kinds.is_empty() {
                continue;
            }
            let mut stream =
                DeterministicStream::derive(seed, &format!("challenge-assignment/{subject}"), epoch.0);
            let chosen = stream.sample(&eligible, k);
            for challenger in chosen {
                for kind in kinds {
                    assignments.push(ChallengeAssignment {
                        epoch,
                        challenger: challenger.clone(),
                        subject: subject.clone(),
                        kind: kind.clone(),
                    });
                }
            }
        }
        Ok(assignments)
    }

    /// Simulates one challenger measuring one subject across the given
    /// challenge kinds and produces the merged report. Measured KPI =
    /// floor(nominal x fault_multiplier x (1000 + noise) / 1000) with noise
    /// drawn from the seeded stream in [-noise_amplitude, +noise_amplitude]
    /// (per mille).
    #[allow(clippy::too_many_arguments)]
    pub fn execute_challenge(
        &self,
        epoch: Epoch,
        seed: u64,
        subject: &SubjectId,
        challenger: &HyperNodeId,
        kinds: &[ChallengeKindId],
        nominal_profile: &BTreeMap<String, u64>,
        fault_multiplier: Rational,
        noise_amplitude: u64,
    ) -> Result<PerformanceReport> {
        let thresholds = self.effective_thresholds(kinds);
        let mut stream = DeterministicStream::derive(
            seed,
            &format!("measurement/{subject}/{challenger}"),
            epoch.0,
        );
        let mut kpis = BTreeMap::new();
        let mut verdict = BTreeMap::new();
        for (kpi, threshold) in &thresholds {
            let nominal = nominal_profile.get(kpi).copied().unwrap_or(0);
            let noise = stream.gen_signed(noise_amplitude);
            let jitter = (1000i64 + noise).max(0) as u128;
            let true_value = fault_multiplier.mul_floor(nominal as u128).unwrap_or(0);
            let measured = (true_value.saturating_mul(jitter) / 1000).min(u64::MAX as u128) as u64;
            let pass = threshold.le_scaled(nominal as u128, measured as u128);
            kpis.insert(kpi.clone(), measured);
            verdict.insert(kpi.clone(), pass);
        }
        Ok(PerformanceReport {
            epoch,
            subject: subject.clone(),
            challenger: challenger.clone(),
            kpis,
            verdict,
        })
    }

    pub fn submit_report(&mut self, report: PerformanceReport) -> Result<()> {
        self.store.insert(report)
    }

    /// Strictest threshold per KPI across the given challenge kinds.
    pub fn effective_thresholds(&self, kinds: &[ChallengeKindId]) -> BTreeMap<String, Rational> {
        let mut thresholds: BTreeMap<String, Rational> = BTreeMap::new();
        for kind in kinds {
            let Some(spec) = self.specs.get(kind) else { continue };
            for kpi in &spec.kpis {
                let thr = spec.pass_thresholds[kpi];
                let slot = thresholds.entry(kpi.clone()).or_insert(thr);
                if thr > *slot {
                    *slot = thr;
                }
            }
        }
        thresholds
    }

    /// Aggregates the stored reports for (epoch, subject): per-KPI medians,
    /// verdicts from the medians, a Merkle commitment over the canonical
    /// reports plus the aggregate leaf, and an on-ledger anchor. Returns the
    /// record plus a fault event if the aggregate fails.
    #[allow(clippy::too_many_arguments)]
    pub fn aggregate_and_commit(
        &mut self,
        epoch: Epoch,
        subject: &SubjectId,
        kinds: &[ChallengeKindId],
        nominal_profile: &BTreeMap<String, u64>,
        expected_reports: usize,
        ledger: &mut Ledger,
        submitter: &AccountId,
    ) -> Result<(AggregateRecord, Option<FaultEvent>)> {
        let reports = self.store.reports_for(epoch, subject);
        if reports.is_empty() || reports.len() < expected_reports {
            return Err(EnforcementError::ReportsMissing { epoch, subject: subject.clone() });
        }
        let thresholds = self.effective_thresholds(kinds);

        let mut medians = BTreeMap::new();
        let mut verdict = BTreeMap::new();
        for (kpi, threshold) in &thresholds {
            let mut values: Vec<u64> =
                reports.iter().map(|r| r.kpis.get(kpi).copied().unwrap_or(0)).collect();
            values.sort_unstable();
            let median = median_of_sorted(&values);
            let nominal = nominal_profile.get(kpi).copied().unwrap_or(0);
            let pass = threshold.le_scaled(nominal as u128, median as u128);
            medians.insert(kpi.clone(), median);
            verdict.insert(kpi.clone(), pass);
        }
        let pass = verdict.values().all(|&v| v);
        let leaf = AggregateLeaf {
            epoch,
            subject: subject.clone(),
            medians: medians.clone(),
            verdict: verdict.clone(),
            pass,
        };

        // Commit: leaves are the canonical reports in challenger order,
        // then the aggregate leaf.
        let mut leaves: Vec<Hash32> =
            reports.iter().map(|r| leaf_hash(&r.canonical_bytes())).collect();
        leaves.push(leaf_hash(&to_canonical_json(&leaf).expect("leaf serialization cannot fail")));
        let tree = MerkleTree::from_leaf_hashes(leaves);
        let root = tree.root();
        let anchor = ledger.record_proof_anchor(submitter, subject, epoch, root)?;

        let record = AggregateRecord { leaf, anchor, root };
        self.aggregates.entry(epoch).or_default().insert(subject.clone(), record.clone());
        self.latest_medians.insert(subject.clone(), medians.clone());

        let fault = if pass {
            None
        } else {
            let mut severity = Rational::zero();
            let mut failed = Vec::new();
            for (kpi, ok) in &verdict {
                if *ok {
                    continue;
                }
                failed.push(kpi.clone());
                let threshold = thresholds[kpi];
                let nominal = nominal_profile.get(kpi).copied().unwrap_or(0) as u128;
                let median = medians[kpi] as u128;
                // shortfall = (thr x nominal - median) / (thr x nominal),
                // computed on the common denominator and clamped to [0, 1].
                let bound = threshold.numer().saturating_mul(nominal);
                let held = median.saturating_mul(threshold.denom());
                if bound > 0 && held < bound {
                    let s = Rational::new(bound - held, bound);
                    let s = if s.in_unit_interval() { s } else { Rational::one() };
                    if s > severity {
                        severity = s;
                    }
                }
            }
            Some(FaultEvent { epoch, subject: subject.clone(), severity, failed_kpis: failed })
        };
        Ok((record, fault))
    }

    /// Challengers whose stored report deviates from the aggregate median
    /// by more than the noise envelope (plus one unit of rounding slack) on
    /// any KPI.
    pub fn flag_misbehaving_challengers(
        &self,
        epoch: Epoch,
        subject: &SubjectId,
        noise_amplitude: u64,
    ) -> Vec<ChallengerFault> {
        let Some(record) = self.aggregate(epoch, subject) else { return Vec::new() };
        let mut faults = Vec::new();
        for report in self.store.reports_for(epoch, subject) {
            for (kpi, &median) in &record.leaf.medians {
                let measured = report.kpis.get(kpi).copied().unwrap_or(0);
                let deviation = measured.abs_diff(median) as u128;
                // |measured - median| x 1000 <= median x amplitude + 1000
                let allowed = (median as u128).saturating_mul(noise_amplitude as u128) + 1000;
                if deviation.saturating_mul(1000) > allowed {
                    faults.push(ChallengerFault {
                        epoch,
                        subject: subject.clone(),
                        challenger: report.challenger.clone(),
                        kpi: kpi.clone(),
                        measured,
                        median,
                    });
                }
            }
        }
        faults
    }

    /// Inclusion proof for one stored report against its epoch's committed
    /// tree. Only available while the reports are retained.
    pub fn proof_for_report(
        &self,
        epoch: Epoch,
        subject: &SubjectId,
        challenger: &HyperNodeId,
    ) -> Option<MerkleProof> {
        let reports = self.store.reports_for(epoch, subject);
        let index = reports.iter().position(|r| &r.challenger == challenger)?;
        let record = self.aggregate(epoch, subject)?;
        let mut leaves: Vec<Hash32> =
            reports.iter().map(|r| leaf_hash(&r.canonical_bytes())).collect();
        leaves.push(leaf_hash(
            &to_canonical_json(&record.leaf).expect("leaf serialization cannot fail"),
        ));
        let tree = MerkleTree::from_leaf_hashes(leaves);
        tree.proof(index)
    }

    /// Evicts reports and aggregates that fell out of the retention window.
    pub fn evict(&mut self, now: Epoch) {
        self.store.evict(now);
        let keep_from = now.0.saturating_sub(self.store.retention_epochs() - 1);
        self.aggregates = self.aggregates.split_off(&Epoch(keep_from));
    }
}

/// Median with floor averaging for even counts.
fn median_of_sorted(values: &[u64]) -> u64 {
    let n = values.len();
    assert!(n > 0);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let a = values[n / 2 - 1];
        let b = values[n / 2];
        a / 2 + b / 2 + (a % 2 + b % 2) / 2
    }
}

/// True iff `report_bytes` hashes to the proof's leaf and the proof's path
/// recomputes to the anchored root.
pub fn verify_report_bytes(report_bytes: &[u8], proof: &MerkleProof, anchored_root: Hash32) -> bool {
    leaf_hash(report_bytes) == proof.leaf_hash && proof.verifies_against(&anchored_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TokenAmount;

    fn spec_for(kind: &str, kpi: &str, thr: Rational) -> ChallengeSpec {
        ChallengeSpec {
            kind: ChallengeKindId::from(kind),
            subject: ChallengeSubject::Class(ClassId::from("std")),
            kpis: vec![kpi.to_string()],
            pass_thresholds: [(kpi.to_string(), thr)].into(),
        }
    }

    fn enforcement_with_spec() -> Enforcement {
        let mut e = Enforcement::new(3);
        e.register_spec(spec_for("storage-read", "read_throughput", Rational::new(4, 5)), true)
            .unwrap();
        e
    }

    fn ledger_with_submitter(account: &str) -> Ledger {
        let mut l = Ledger::new([(AccountId::from(account), TokenAmount(0))].into());
        l.register_submitter(AccountId::from(account));
        l
    }

    fn hn(s: &str) -> HyperNodeId {
        HyperNodeId::from(s)
    }

    fn kinds() -> Vec<ChallengeKindId> {
        vec![ChallengeKindId::from("storage-read")]
    }

    fn profile(nominal: u64) -> BTreeMap<String, u64> {
        [("read_throughput".to_string(), nominal)].into()
    }

    fn report_with(e: &Enforcement, epoch: u64, challenger: &str, mult: Rational) -> PerformanceReport {
        e.execute_challenge(
            Epoch(epoch),
            42,
            &SubjectId::from("n1"),
            &hn(challenger),
            &kinds(),
            &profile(200_000),
            mult,
            0,
        )
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        let mut e = Enforcement::new(3);
        let bad = ChallengeSpec {
            kind: ChallengeKindId::from("x"),
            subject: ChallengeSubject::Class(ClassId::from("std")),
            kpis: vec![],
            pass_thresholds: BTreeMap::new(),
        };
        assert!(matches!(
            e.register_spec(bad, true),
            Err(EnforcementError::MalformedSpec(_))
        ));
        let out_of_range = spec_for("y", "k", Rational::new(3, 2));
        assert!(matches!(
            e.register_spec(out_of_range, true),
            Err(EnforcementError::MalformedSpec(_))
        ));
        let unknown = spec_for("z", "k", Rational::new(1, 2));
        assert!(matches!(
            e.register_spec(unknown, false),
            Err(EnforcementError::UnknownSubject(_))
        ));
        e.register_spec(spec_for("ok", "k", Rational::new(1, 2)), true).unwrap();
        assert!(matches!(
            e.register_spec(spec_for("ok", "k", Rational::new(1, 2)), true),
            Err(EnforcementError::DuplicateSpec(_))
        ));
    }

    #[test]
    fn schedule_assigns_k_distinct_challengers() {
        let e = enforcement_with_spec();
        let subjects = vec![(SubjectId::from("n1"), kinds())];
        let eligible = vec![hn("h1"), hn("h2"), hn("h3")];
        let a = e.schedule_challenges(Epoch(1), 42, 3, &subjects, &eligible).unwrap();
        assert_eq!(a.len(), 3);
        let mut who: Vec<&HyperNodeId> = a.iter().map(|x| &x.challenger).collect();
        who.sort();
        who.dedup();
        assert_eq!(who.len(), 3);
    }

    #[test]
    fn schedule_clamps_replication() {
        let e = enforcement_with_spec();
        let subjects = vec![(SubjectId::from("n1"), kinds())];
        let eligible = vec![hn("h1"), hn("h2")];
        let a = e.schedule_challenges(Epoch(1), 42, 5, &subjects, &eligible).unwrap();
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn schedule_is_deterministic_and_epoch_sensitive() {
        let e = enforcement_with_spec();
        let subjects = vec![(SubjectId::from("n1"), kinds()), (SubjectId::from("n2"), kinds())];
        let eligible = vec![hn("h1"), hn("h2"), hn("h3"), hn("h4")];
        let a = e.schedule_challenges(Epoch(7), 42, 2, &subjects, &eligible).unwrap();
        let b = e.schedule_challenges(Epoch(7), 42, 2, &subjects, &eligible).unwrap();
        assert_eq!(a, b);
        let c = e.schedule_challenges(Epoch(8), 42, 2, &subjects, &eligible).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn schedule_without_hypernodes_fails() {
        let e = enforcement_with_spec();
        let subjects = vec![(SubjectId::from("n1"), kinds())];
        assert_eq!(
            e.schedule_challenges(Epoch(1), 42, 3, &subjects, &[]),
            Err(EnforcementError::NoEligibleHyperNodes)
        );
    }

    #[test]
    fn healthy_node_passes_all_kpis() {
        let e = enforcement_with_spec();
        let r = report_with(&e, 1, "h1", Rational::one());
        assert_eq!(r.kpis["read_throughput"], 200_000);
        assert!(r.verdict["read_throughput"]);
    }

    #[test]
    fn degraded_node_fails_threshold() {
        let e = enforcement_with_spec();
        // multiplier 0.5 < threshold 0.8
        let r = report_with(&e, 1, "h1", Rational::new(1, 2));
        assert_eq!(r.kpis["read_throughput"], 100_000);
        assert!(!r.verdict["read_throughput"]);
    }

    #[test]
    fn exactly_at_threshold_passes() {
        let e = enforcement_with_spec();
        // 0.8 x 200_000 = 160_000 measured exactly.
        let r = report_with(&e, 1, "h1", Rational::new(4, 5));
        assert_eq!(r.kpis["read_throughput"], 160_000);
        assert!(r.verdict["read_throughput"]);
    }

    #[test]
    fn noise_stays_within_amplitude() {
        let e = enforcement_with_spec();
        for i in 0..50u64 {
            let r = e
                .execute_challenge(
                    Epoch(i),
                    42,
                    &SubjectId::from("n1"),
                    &hn("h1"),
                    &kinds(),
                    &profile(200_000),
                    Rational::one(),
                    50, // +-5%
                )
                .unwrap();
            let v = r.kpis["read_throughput"];
            assert!((190_000..=210_000).contains(&v), "{v} outside envelope");
        }
    }

    #[test]
    fn canonical_report_bytes_are_frozen() {
        let report = PerformanceReport {
            epoch: Epoch(3),
            subject: SubjectId::from("n1"),
            challenger: hn("h1"),
            kpis: [("read_throughput".to_string(), 150_000u64)].into(),
            verdict: [("read_throughput".to_string(), true)].into(),
        };
        assert_eq!(
            String::from_utf8(report.canonical_bytes()).unwrap(),
            r#"{"challenger":"h1","epoch":3,"kpis":{"read_throughput":150000},"subject":"n1","verdict":{"read_throughput":true}}"#
        );
    }

    #[test]
    fn median_definition() {
        assert_eq!(median_of_sorted(&[90, 100, 110]), 100);
        assert_eq!(median_of_sorted(&[0, 100, 100]), 100);
        assert_eq!(median_of_sorted(&[10]), 10);
        assert_eq!(median_of_sorted(&[10, 11]), 10); // floor averaging
        assert_eq!(median_of_sorted(&[10, 12]), 11);
    }

    fn submit_three(e: &mut Enforcement, mults: [Rational; 3]) {
        for (i, mult) in mults.into_iter().enumerate() {
            let r = report_with(e, 1, &format!("h{}", i + 1), mult);
            e.submit_report(r).unwrap();
        }
    }

    #[test]
    fn aggregate_median_and_anchor() {
        let mut e = enforcement_with_spec();
        let mut ledger = ledger_with_submitter("agg");
        submit_three(
            &mut e,
            [Rational::new(9, 10), Rational::one(), Rational::new(11, 10)],
        );
        let (record, fault) = e
            .aggregate_and_commit(
                Epoch(1),
                &SubjectId::from("n1"),
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap();
        assert_eq!(record.leaf.medians["read_throughput"], 200_000);
        assert!(record.leaf.pass);
        assert!(fault.is_none());
        let anchor = ledger.anchor(record.anchor).unwrap();
        assert_eq!(anchor.root, record.root);
        assert_eq!(anchor.epoch, Epoch(1));
        assert_eq!(e.latest_medians()[&SubjectId::from("n1")]["read_throughput"], 200_000);
    }

    #[test]
    fn aggregate_is_robust_to_one_outlier() {
        let mut e = enforcement_with_spec();
        let mut ledger = ledger_with_submitter("agg");
        submit_three(&mut e, [Rational::zero(), Rational::one(), Rational::one()]);
        let (record, fault) = e
            .aggregate_and_commit(
                Epoch(1),
                &SubjectId::from("n1"),
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap();
        assert_eq!(record.leaf.medians["read_throughput"], 200_000);
        assert!(fault.is_none());
        // The lying challenger is flagged.
        let flagged = e.flag_misbehaving_challengers(Epoch(1), &SubjectId::from("n1"), 0);
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].challenger, hn("h1"));
        assert_eq!(flagged[0].measured, 0);
    }

    // Hand oracle: nominal 200_000, threshold 4/5 -> bound 160_000.
    // Median at multiplier 0.6 = 120_000. severity = 40_000/160_000 = 1/4.
    #[test]
    fn fault_severity_is_relative_shortfall() {
        let mut e = enforcement_with_spec();
        let mut ledger = ledger_with_submitter("agg");
        let m = Rational::new(3, 5);
        submit_three(&mut e, [m, m, m]);
        let (record, fault) = e
            .aggregate_and_commit(
                Epoch(1),
                &SubjectId::from("n1"),
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap();
        assert!(!record.leaf.pass);
        let fault = fault.unwrap();
        assert_eq!(fault.severity, Rational::new(1, 4));
        assert_eq!(fault.failed_kpis, vec!["read_throughput".to_string()]);
    }

    #[test]
    fn aggregate_requires_all_reports() {
        let mut e = enforcement_with_spec();
        let mut ledger = ledger_with_submitter("agg");
        let r = report_with(&e, 1, "h1", Rational::one());
        e.submit_report(r).unwrap();
        let err = e
            .aggregate_and_commit(
                Epoch(1),
                &SubjectId::from("n1"),
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap_err();
        assert!(matches!(err, EnforcementError::ReportsMissing { .. }));
    }

    #[test]
    fn duplicate_report_rejected() {
        let mut e = enforcement_with_spec();
        let r = report_with(&e, 1, "h1", Rational::one());
        e.submit_report(r.clone()).unwrap();
        assert_eq!(e.submit_report(r), Err(EnforcementError::DuplicateReport));
    }

    #[test]
    fn verify_report_round_trip_and_tamper() {
        let mut e = enforcement_with_spec();
        let mut ledger = ledger_with_submitter("agg");
        submit_three(&mut e, [Rational::one(), Rational::one(), Rational::one()]);
        let subject = SubjectId::from("n1");
        let (record, _) = e
            .aggregate_and_commit(
                Epoch(1),
                &subject,
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap();

        let report = e.store().get(Epoch(1), &subject, &hn("h2")).unwrap().clone();
        let proof = e.proof_for_report(Epoch(1), &subject, &hn("h2")).unwrap();
        let root = ledger.anchor(record.anchor).unwrap().root;
        assert!(verify_report_bytes(&report.canonical_bytes(), &proof, root));

        // Any single-byte mutation must fail verification.
        let bytes = report.canonical_bytes();
        let mut tampered = bytes.clone();
        tampered[40] ^= 1;
        assert!(!verify_report_bytes(&tampered, &proof, root));

        // A different epoch's anchor must not verify the same report.
        let r2a = report_with(&e, 2, "h1", Rational::one());
        let r2b = report_with(&e, 2, "h2", Rational::one());
        let r2c = report_with(&e, 2, "h3", Rational::one());
        for r in [r2a, r2b, r2c] {
            e.submit_report(r).unwrap();
        }
        let (record2, _) = e
            .aggregate_and_commit(
                Epoch(2),
                &subject,
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap();
        let other_root = ledger.anchor(record2.anchor).unwrap().root;
        assert!(!verify_report_bytes(&report.canonical_bytes(), &proof, other_root));
    }

    #[test]
    fn retention_evicts_reports_but_anchors_survive() {
        let mut e = enforcement_with_spec(); // retention 3
        let mut ledger = ledger_with_submitter("agg");
        submit_three(&mut e, [Rational::one(), Rational::one(), Rational::one()]);
        let subject = SubjectId::from("n1");
        let (record, _) = e
            .aggregate_and_commit(
                Epoch(1),
                &subject,
                &kinds(),
                &profile(200_000),
                3,
                &mut ledger,
                &AccountId::from("agg"),
            )
            .unwrap();

        // Retrievable while now - 1 < 3, i.e. through epoch 3.
        e.evict(Epoch(3));
        assert_eq!(e.store().reports_for(Epoch(1), &subject).len(), 3);
        assert!(e.aggregate(Epoch(1), &subject).is_some());
        e.evict(Epoch(4));
        assert!(e.store().reports_for(Epoch(1), &subject).is_empty());
        assert!(e.aggregate(Epoch(1), &subject).is_none());
        // The anchor outlives the data, and medians stay queryable.
        assert!(ledger.anchor(record.anchor).is_some());
        assert_eq!(e.latest_medians()[&subject]["read_throughput"], 200_000);
    }
}

//! icn-sim: scenario runner and state inspection CLI.
//!
//! Exit codes: 0 success (or report verified), 1 invariant violation (or
//! report rejected), 2 invalid input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use icn_core::canonical::to_canonical_string;
use icn_core::enforcement::verify_report_bytes;
use icn_core::merkle::MerkleProof;
use icn_core::protocol::Protocol;
use icn_core::types::{
    AccountId, BlueprintId, Epoch, Hash32, InstanceId, NodeId, RegionId, SubjectId,
};
use icn_sim::metrics::render_csv;
use icn_sim::runner::{self, Overrides};
use icn_sim::scenario::Scenario;

#[derive(Parser)]
#[command(name = "icn-sim", version, about = "Deterministic protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, summary.json, final_state.json.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario's epoch count.
        #[arg(long)]
        epochs: Option<u64>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file; prints one diagnostic per line.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Summarize a final_state.json snapshot (or one region / node of it).
    InspectState {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, conflicts_with = "node")]
        region: Option<String>,
        #[arg(long)]
        node: Option<String>,
    },
    /// Verify a canonical report file against an anchored Merkle root.
    VerifyReport {
        /// Canonical JSON report, byte-exact.
        #[arg(long)]
        report: PathBuf,
        /// Inclusion proof as JSON.
        #[arg(long)]
        proof: PathBuf,
        /// Anchored root: 64 hex digits, or `epoch:subject` resolved
        /// against --state.
        #[arg(long)]
        anchor: String,
        /// State snapshot holding the anchor log.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Export one retained report plus its inclusion proof for offline
    /// verification with verify-report.
    ExportReport {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        epoch: u64,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        challenger: String,
        /// Output directory for report.json and proof.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Deploy a blueprint against a loaded state and write the state back.
    Deploy {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        blueprint: String,
        /// Booking duration in epochs.
        #[arg(long)]
        duration: u64,
        /// Paying account; defaults to the first user account.
        #[arg(long)]
        owner: Option<String>,
        /// Instance id; defaults to a fresh cli-<n> id.
        #[arg(long)]
        instance: Option<String>,
        /// Where to write the updated snapshot; defaults to --state.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Simulate { scenario, seed, epochs, out } => simulate(&scenario, seed, epochs, &out),
        Command::Validate { scenario } => validate(&scenario),
        Command::InspectState { state, region, node } => inspect(&state, region, node),
        Command::VerifyReport { report, proof, anchor, state } => {
            verify(&report, &proof, &anchor, state.as_deref())
        }
        Command::ExportReport { state, epoch, subject, challenger, out } => {
            export_report(&state, epoch, &subject, &challenger, &out)
        }
        Command::Deploy { state, blueprint, duration, owner, instance, out } => {
            deploy(&state, &blueprint, duration, owner, instance, out.as_deref())
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, String> {
    Scenario::load(path).map_err(|e| e.to_string())
}

fn load_state(path: &Path) -> Result<Protocol, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Protocol::from_snapshot(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Writes one line to stdout. A closed pipe (e.g. `| head`) is not an
/// error: the line is dropped and file side effects still complete.
fn emit(line: std::fmt::Arguments) -> Result<(), String> {
    use std::io::Write;
    match writeln!(std::io::stdout(), "{line}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(format!("stdout: {e}")),
    }
}

fn simulate(
    scenario_path: &Path,
    seed: Option<u64>,
    epochs: Option<u64>,
    out: &Path,
) -> Result<u8, String> {
    let scenario = load_scenario(scenario_path)?;
    let output = match runner::run(&scenario, Overrides { seed, epochs }) {
        Ok(output) => output,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(e.exit_code());
        }
    };
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    write_file(&out.join("metrics.csv"), &render_csv(&output.frames, &output.rewards))?;
    let summary = to_canonical_string(&output.summary).map_err(|e| e.to_string())?;
    write_file(&out.join("summary.json"), &summary)?;
    write_file(&out.join("final_state.json"), &output.protocol.snapshot())?;
    emit(format_args!(
        "simulated {} epochs (seed {}); wrote {}",
        output.summary.epochs,
        output.summary.seed,
        out.display()
    ))?;
    Ok(0)
}

fn validate(scenario_path: &Path) -> Result<u8, String> {
    let scenario = load_scenario(scenario_path)?;
    let diagnostics = scenario.validate();
    if diagnostics.is_empty() {
        emit(format_args!("scenario ok"))?;
        return Ok(0);
    }
    for d in &diagnostics {
        emit(format_args!("{d}"))?;
    }
    Ok(2)
}

fn inspect(state_path: &Path, region: Option<String>, node: Option<String>) -> Result<u8, String> {
    let protocol = load_state(state_path)?;
    let view = if let Some(region) = region {
        let region = RegionId::from(region.as_str());
        let residual = protocol
            .registry
            .capability_map(&region, protocol.composer.allocated())
            .map_err(|e| e.to_string())?;
        let nodes: Vec<&NodeId> = protocol
            .registry
            .nodes()
            .values()
            .filter(|n| n.region == region)
            .map(|n| &n.id)
            .collect();
        serde_json::json!({
            "region": region,
            "residual_capacity": residual,
            "economy": protocol.economics.economy(&region),
            "nodes": nodes,
        })
    } else if let Some(node) = node {
        let node_id = NodeId::from(node.as_str());
        let record =
            protocol.registry.node(&node_id).ok_or_else(|| format!("unknown node {node}"))?;
        serde_json::json!({
            "node": record,
            "collateral": protocol.ledger.collateral_for(&node_id),
            "stake": protocol.ledger.stake_total_for(&node_id),
            "security": protocol.ledger.security_for(&node_id),
            "allocated": protocol.composer.allocated().get(&node_id),
        })
    } else {
        let active = protocol.registry.active_nodes().count();
        serde_json::json!({
            "epoch": protocol.current_epoch(),
            "accounts": protocol.ledger.accounts().len(),
            "nodes": protocol.registry.nodes().len(),
            "active_nodes": active,
            "instances": protocol.composer.instances().len(),
            "anchors": protocol.ledger.anchors().len(),
            "genesis_supply": protocol.ledger.genesis_supply(),
            "emitted_total": protocol.ledger.emitted_total(),
            "burned_total": protocol.ledger.burned_total(),
        })
    };
    emit(format_args!("{}", serde_json::to_string_pretty(&view).map_err(|e| e.to_string())?))?;
    Ok(0)
}

fn verify(
    report_path: &Path,
    proof_path: &Path,
    anchor: &str,
    state_path: Option<&Path>,
) -> Result<u8, String> {
    let mut report = std::fs::read(report_path)
        .map_err(|e| format!("cannot read {}: {e}", report_path.display()))?;
    // Tolerate a single trailing newline from text editors; canonical JSON
    // itself never ends with one.
    if report.last() == Some(&b'\n') {
        report.pop();
    }
    let proof_text = std::fs::read_to_string(proof_path)
        .map_err(|e| format!("cannot read {}: {e}", proof_path.display()))?;
    let proof: MerkleProof = serde_json::from_str(&proof_text)
        .map_err(|e| format!("cannot parse {}: {e}", proof_path.display()))?;
    let root = resolve_anchor(anchor, state_path)?;
    if verify_report_bytes(&report, &proof, root) {
        emit(format_args!("verified"))?;
        Ok(0)
    } else {
        emit(format_args!("rejected"))?;
        Ok(1)
    }
}

/// An anchor argument is either a bare 64-hex root or `epoch:subject`
/// looked up in the state snapshot's anchor log.
fn resolve_anchor(anchor: &str, state_path: Option<&Path>) -> Result<Hash32, String> {
    if anchor.len() == 64 && anchor.bytes().all(|b| b.is_ascii_hexdigit()) {
        let bytes = hex_decode(anchor)?;
        let mut root = [0u8; 32];
        root.copy_from_slice(&bytes);
        return Ok(Hash32(root));
    }
    let (epoch, subject) = anchor
        .split_once(':')
        .ok_or_else(|| format!("anchor {anchor:?} is neither a hex root nor epoch:subject"))?;
    let epoch: u64 = epoch.parse().map_err(|_| format!("bad epoch in anchor {anchor:?}"))?;
    let state_path =
        state_path.ok_or_else(|| "--state is required to resolve an epoch:subject anchor".to_string())?;
    let protocol = load_state(state_path)?;
    let subject = SubjectId::from(subject);
    protocol
        .ledger
        .anchors()
        .iter()
        .find(|a| a.epoch == Epoch(epoch) && a.subject == subject)
        .map(|a| a.root)
        .ok_or_else(|| format!("no anchor for epoch {epoch} subject {subject}"))
}

fn hex_decode(s: &str) -> Result<Vec<u8>, String> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| e.to_string()))
        .collect()
}

fn export_report(
    state_path: &Path,
    epoch: u64,
    subject: &str,
    challenger: &str,
    out: &Path,
) -> Result<u8, String> {
    let protocol = load_state(state_path)?;
    let epoch = Epoch(epoch);
    let subject = SubjectId::from(subject);
    let challenger = icn_core::types::HyperNodeId::from(challenger);
    let report = protocol
        .enforcement
        .store()
        .reports_for(epoch, &subject)
        .into_iter()
        .find(|r| r.challenger == challenger)
        .ok_or_else(|| {
            format!("no retained report for epoch {} subject {subject} challenger {challenger}", epoch.0)
        })?;
    let bytes = report.canonical_bytes();
    let proof = protocol
        .enforcement
        .proof_for_report(epoch, &subject, &challenger)
        .ok_or("no inclusion proof available (aggregate missing or evicted)")?;
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    std::fs::write(out.join("report.json"), &bytes)
        .map_err(|e| format!("cannot write report.json: {e}"))?;
    write_file(
        &out.join("proof.json"),
        &to_canonical_string(&proof).map_err(|e| e.to_string())?,
    )?;
    emit(format_args!("exported; verify with --anchor {}:{subject}", epoch.0))?;
    Ok(0)
}

fn deploy(
    state_path: &Path,
    blueprint: &str,
    duration: u64,
    owner: Option<String>,
    instance: Option<String>,
    out: Option<&Path>,
) -> Result<u8, String> {
    let mut protocol = load_state(state_path)?;
    let owner = match owner {
        Some(o) => AccountId::from(o.as_str()),
        None => runner::default_owner(&protocol).ok_or("state has no accounts")?,
    };
    let id = match instance {
        Some(i) => InstanceId::from(i.as_str()),
        None => runner::next_cli_instance_id(&protocol),
    };
    let instance = protocol
        .deploy(id, &owner, Some(&BlueprintId::from(blueprint)), Vec::new(), None, duration)
        .map_err(|e| e.to_string())?;
    emit(format_args!("{}", to_canonical_string(&instance).map_err(|e| e.to_string())?))?;
    write_file(out.unwrap_or(state_path), &protocol.snapshot())?;
    Ok(0)
}

//! Metrics output: a single CSV holding one `frame` row per epoch plus one
//! `reward` row per reward statement, and helpers to render both along with
//! the JSON summary. All rows are emitted in deterministic order so
//! identical runs produce byte-identical files.

use icn_core::types::{NodeId, TokenAmount};

/// Per-epoch frame: the protocol's externally visible vitals after the
/// epoch completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsFrame {
    pub epoch: u64,
    /// Free capacity per region, packed as `region:type=units|...`.
    pub residual: String,
    pub live_instances: usize,
    /// Cumulative gross rewards paid from each source so far.
    pub rewards_bootstrap: TokenAmount,
    pub rewards_access_fee: TokenAmount,
    pub burned_total: TokenAmount,
    /// Subject faults detected this epoch.
    pub faults: usize,
    pub conservation: String,
}

/// One reward statement, flattened for the CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardRow {
    pub epoch: u64,
    pub node: NodeId,
    pub source: &'static str,
    pub gross: TokenAmount,
    pub provider_cut: TokenAmount,
    pub staker_total: TokenAmount,
}

pub const CSV_HEADER: &str = "kind,epoch,residual,live_instances,rewards_bootstrap,\
rewards_access_fee,burned_total,faults,conservation,node,source,gross,provider_cut,staker_total";

/// Quotes a CSV field only when it needs quoting.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders the full metrics file: per epoch, the frame row first, then that
/// epoch's reward rows in settlement order.
pub fn render_csv(frames: &[MetricsFrame], rewards: &[RewardRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut reward_iter = rewards.iter().peekable();
    for frame in frames {
        out.push_str(&format!(
            "frame,{},{},{},{},{},{},{},{},,,,,\n",
            frame.epoch,
            csv_field(&frame.residual),
            frame.live_instances,
            frame.rewards_bootstrap,
            frame.rewards_access_fee,
            frame.burned_total,
            frame.faults,
            frame.conservation,
        ));
        while reward_iter.peek().is_some_and(|r| r.epoch == frame.epoch) {
            let r = reward_iter.next().unwrap();
            out.push_str(&format!(
                "reward,{},,,,,,,,{},{},{},{},{}\n",
                r.epoch,
                csv_field(r.node.as_str()),
                r.source,
                r.gross,
                r.provider_cut,
                r.staker_total,
            ));
        }
    }
    out
}

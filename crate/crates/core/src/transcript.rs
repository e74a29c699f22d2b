//! Message transcripts for the simulated protocols.
//!
//! Every message a party sends is logged as one record so the adversary's
//! view can be replayed and communication can be costed. Transcripts
//! serialize to line-delimited JSON, one message per line.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Site(usize),
    Aggregator,
    /// Broadcast to all sites.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    /// Shamir share of a site's masked value.
    Share,
    /// A site's local sum of received shares, sent to the aggregator.
    SummedShare,
    /// Aggregator's broadcast of the reconstructed sum.
    BroadcastSum,
    /// A site's noised release of its local function value.
    Release,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub round: u64,
    pub from: Party,
    pub to: Party,
    pub kind: MessageKind,
    pub payload_digest: String,
    pub scalar_count: usize,
}

pub fn digest_scalars(vals: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in vals {
        h.update(v.to_le_bytes());
    }
    hex_prefix(&h.finalize())
}

pub fn digest_field(vals: &[u64]) -> String {
    let mut h = Sha256::new();
    for v in vals {
        h.update(v.to_le_bytes());
    }
    hex_prefix(&h.finalize())
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Ordered log of every message in a run.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&mut self, msg: Message) {
        self.messages.push(msg);
    }

    /// Scalars sent by one site, across all rounds.
    pub fn scalars_sent_by_site(&self, site: usize) -> usize {
        self.messages
            .iter()
            .filter(|m| m.from == Party::Site(site))
            .map(|m| m.scalar_count)
            .sum()
    }

    /// Scalars received by the aggregator.
    pub fn scalars_to_aggregator(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.to == Party::Aggregator)
            .map(|m| m.scalar_count)
            .sum()
    }

    /// Scalars sent by the aggregator (broadcasts count once per message).
    pub fn scalars_from_aggregator(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.from == Party::Aggregator)
            .map(|m| m.scalar_count)
            .sum()
    }

    pub fn messages_sent_by_site(&self, site: usize) -> usize {
        self.messages.iter().filter(|m| m.from == Party::Site(site)).count()
    }

    /// Line-delimited JSON, one message per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m).expect("serializable message"));
            out.push('\n');
        }
        out
    }
}

/// Totals of the communication a protocol run actually performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_site_messages: usize,
    pub per_site_scalars: usize,
    pub aggregator_scalars: usize,
}

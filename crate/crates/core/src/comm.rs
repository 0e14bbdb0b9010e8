//! Parameter-count accounting for every transmission in a run.
//!
//! Counts are parameters, not bytes. Per participating client and round:
//!
//! | protocol        | upload            | download             |
//! |-----------------|-------------------|----------------------|
//! | full fine-tune  | `m·n`             | `m·n`                |
//! | FedIT           | `r_k(m+n)`        | `r(m+n)`             |
//! | zero-padding    | `r_k(m+n)`        | `max_k r_k · (m+n)`  |
//! | FLoRA           | `r_k(m+n)`        | `Σ_k r_k · (m+n)`    |
//! | local only      | 0                 | 0                    |
//!
//! Round 0 additionally charges the pre-trained model, `m·n`, to every client,
//! under every protocol.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::lora::Dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PayloadKind {
    FullModel,
    Adapter,
    StackedAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    FullFineTuning,
    Fedit,
    ZeroPadding,
    Flora,
    /// Nothing is exchanged after the initial broadcast.
    LocalOnly,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::FullFineTuning => "full_ft",
            Protocol::Fedit => "fedit",
            Protocol::ZeroPadding => "zero_padding",
            Protocol::Flora => "flora",
            Protocol::LocalOnly => "local_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommEvent {
    pub round: usize,
    pub protocol: Protocol,
    pub direction: Direction,
    pub client_id: usize,
    pub param_count: u64,
    pub payload_kind: PayloadKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    events: Vec<CommEvent>,
    // (dim, k_clients) of the first charge; later charges must agree.
    shape: Option<(Dim, usize)>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[CommEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn bind(&mut self, dim: Dim, k_clients: usize) -> Result<()> {
        Dim::new(dim.m, dim.n)?;
        if k_clients == 0 {
            return Err(invalid("k_clients must be at least 1"));
        }
        match self.shape {
            None => self.shape = Some((dim, k_clients)),
            Some(s) if s == (dim, k_clients) => {}
            Some((d, k)) => {
                return Err(invalid(format!(
                    "ledger is for {k} clients at {d:?}, got {k_clients} at {dim:?}"
                )))
            }
        }
        Ok(())
    }

    fn push(&mut self, round: usize, protocol: Protocol, direction: Direction, client_id: usize, param_count: u64, payload_kind: PayloadKind) {
        self.events.push(CommEvent {
            round,
            protocol,
            direction,
            client_id,
            param_count,
            payload_kind,
        });
    }

    /// The one-time download of the pre-trained model to every client.
    pub fn charge_broadcast(&mut self, protocol: Protocol, dim: Dim, k_clients: usize) -> Result<()> {
        self.bind(dim, k_clients)?;
        for k in 0..k_clients {
            self.push(0, protocol, Direction::Down, k, dim.params(), PayloadKind::FullModel);
        }
        Ok(())
    }

    /// Charges one full-participation round. `ranks[k]` is client `k`'s rank.
    pub fn charge_round(&mut self, protocol: Protocol, dim: Dim, ranks: &[usize], k_clients: usize, round: usize) -> Result<()> {
        if ranks.len() != k_clients {
            return Err(invalid(format!("{} ranks for {k_clients} clients", ranks.len())));
        }
        let participants: Vec<(usize, usize)> = ranks.iter().copied().enumerate().collect();
        self.charge_participants(protocol, dim, &participants, k_clients, round)
    }

    /// Charges a round in which only `participants` (`(client_id, rank)`) take part.
    pub fn charge_participants(
        &mut self,
        protocol: Protocol,
        dim: Dim,
        participants: &[(usize, usize)],
        k_clients: usize,
        round: usize,
    ) -> Result<()> {
        self.bind(dim, k_clients)?;
        if participants.iter().any(|&(id, r)| id >= k_clients || r == 0) {
            return Err(invalid("participants need an id below k_clients and a positive rank"));
        }
        if protocol == Protocol::Fedit && participants.windows(2).any(|w| w[0].1 != w[1].1) {
            return Err(crate::error::FloraError::UnsupportedHeterogeneousRanks {
                ranks: participants.iter().map(|p| p.1).collect(),
            });
        }
        if round == 0 {
            self.charge_broadcast(protocol, dim, k_clients)?;
        }
        let total_rank: usize = participants.iter().map(|p| p.1).sum();
        let max_rank = participants.iter().map(|p| p.1).max().unwrap_or(0);
        for &(id, r) in participants {
            let (up, down) = match protocol {
                Protocol::FullFineTuning => (
                    Some((dim.params(), PayloadKind::FullModel)),
                    Some((dim.params(), PayloadKind::FullModel)),
                ),
                Protocol::Fedit => (
                    Some((dim.adapter_params(r), PayloadKind::Adapter)),
                    Some((dim.adapter_params(r), PayloadKind::Adapter)),
                ),
                Protocol::ZeroPadding => (
                    Some((dim.adapter_params(r), PayloadKind::Adapter)),
                    Some((dim.adapter_params(max_rank), PayloadKind::Adapter)),
                ),
                Protocol::Flora => (
                    Some((dim.adapter_params(r), PayloadKind::Adapter)),
                    Some((dim.adapter_params(total_rank), PayloadKind::StackedAdapter)),
                ),
                Protocol::LocalOnly => (None, None),
            };
            if let Some((count, kind)) = up {
                self.push(round, protocol, Direction::Up, id, count, kind);
            }
            if let Some((count, kind)) = down {
                self.push(round, protocol, Direction::Down, id, count, kind);
            }
        }
        Ok(())
    }

    pub fn total(&self, protocol: Protocol) -> u64 {
        self.events
            .iter()
            .filter(|e| e.protocol == protocol)
            .map(|e| e.param_count)
            .sum()
    }

    pub fn total_for_client(&self, protocol: Protocol, client_id: usize) -> u64 {
        self.events
            .iter()
            .filter(|e| e.protocol == protocol && e.client_id == client_id)
            .map(|e| e.param_count)
            .sum()
    }

    /// `(up, down)` totals across clients for one round.
    pub fn round_traffic(&self, protocol: Protocol, round: usize) -> RoundTraffic {
        let mut t = RoundTraffic::default();
        for e in self.events.iter().filter(|e| e.protocol == protocol && e.round == round) {
            match e.direction {
                Direction::Up => t.up += e.param_count,
                Direction::Down => t.down += e.param_count,
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundTraffic {
    pub up: u64,
    pub down: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommSummary {
    pub rounds: usize,
    pub total_params_per_strategy: BTreeMap<Protocol, u64>,
    pub per_round_breakdown: BTreeMap<Protocol, Vec<RoundTraffic>>,
    /// Strategy total over full fine-tuning's total for the same clients and rounds.
    pub ratio_to_full_ft: BTreeMap<Protocol, f64>,
    /// `K·m·n·(1 + 2T)`: broadcast plus a dense upload and download per round.
    pub full_ft_reference: u64,
}

impl CommSummary {
    pub fn ratio(&self, protocol: Protocol) -> Option<f64> {
        self.ratio_to_full_ft.get(&protocol).copied()
    }
}

/// Totals and ratios for a ledger covering rounds `0..rounds`.
///
/// With `rounds = 0` only the initial broadcast is expected and the full
/// fine-tuning reference is the broadcast itself.
pub fn summarize(ledger: &CommLedger, rounds: usize) -> Result<CommSummary> {
    let (dim, k) = ledger
        .shape
        .filter(|_| !ledger.is_empty())
        .ok_or_else(|| invalid("empty ledger"))?;
    if let Some(late) = ledger.events.iter().find(|e| e.round >= rounds.max(1)) {
        return Err(invalid(format!(
            "ledger has traffic in round {} beyond the {rounds} summarized",
            late.round
        )));
    }
    let full_ft_reference = k as u64 * dim.params() * (1 + 2 * rounds as u64);
    let mut totals = BTreeMap::new();
    let mut per_round = BTreeMap::new();
    let mut ratios = BTreeMap::new();
    let protocols: std::collections::BTreeSet<Protocol> = ledger.events.iter().map(|e| e.protocol).collect();
    for p in protocols {
        let total = ledger.total(p);
        totals.insert(p, total);
        per_round.insert(p, (0..rounds.max(1)).map(|r| ledger.round_traffic(p, r)).collect());
        ratios.insert(p, total as f64 / full_ft_reference as f64);
    }
    Ok(CommSummary {
        rounds,
        total_params_per_strategy: totals,
        per_round_breakdown: per_round,
        ratio_to_full_ft: ratios,
        full_ft_reference,
    })
}

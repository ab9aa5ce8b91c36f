//! Byte accounting for simulated collectives.
//!
//! Every exchange is charged per worker in both directions, so the ledger
//! always satisfies `sum(bytes_sent) == sum(bytes_received)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed framing charged per sparse update on the wire.
pub const GTC_MESSAGE_HEADER_BYTES: u64 = 16;
pub const BYTES_PER_WORD: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncKind {
    /// Dense gradient all-reduce (ring).
    Dense,
    /// Sparse all-to-all broadcast of threshold-compressed updates.
    Gtc,
    /// Gather of worker models at rank 0 and broadcast of the global model.
    Bmuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub kind: SyncKind,
    /// Packed words (GTC) or parameters (dense, BMUF) contributed by all workers.
    pub words: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    workers: usize,
    bytes_sent: Vec<u64>,
    bytes_received: Vec<u64>,
    syncs: Vec<SyncRecord>,
}

impl CommLedger {
    pub fn new(workers: usize) -> Self {
        Self {
            workers,
            bytes_sent: vec![0; workers],
            bytes_received: vec![0; workers],
            syncs: Vec::new(),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn record(&mut self, kind: SyncKind, words: u64, exchange: &Exchange) -> Result<()> {
        if exchange.sent.len() != self.workers || exchange.received.len() != self.workers {
            return Err(Error::Protocol(format!(
                "exchange covers {} workers, ledger has {}",
                exchange.sent.len(),
                self.workers
            )));
        }
        for (acc, b) in self.bytes_sent.iter_mut().zip(&exchange.sent) {
            *acc += b;
        }
        for (acc, b) in self.bytes_received.iter_mut().zip(&exchange.received) {
            *acc += b;
        }
        self.syncs.push(SyncRecord {
            kind,
            words,
            bytes: exchange.sent.iter().sum(),
        });
        Ok(())
    }

    pub fn sync_count(&self) -> u64 {
        self.syncs.len() as u64
    }

    pub fn syncs(&self) -> &[SyncRecord] {
        &self.syncs
    }

    pub fn bytes_sent(&self) -> &[u64] {
        &self.bytes_sent
    }

    pub fn bytes_received(&self) -> &[u64] {
        &self.bytes_received
    }

    /// Total bytes put on the wire by all workers.
    pub fn bytes_total(&self) -> u64 {
        self.bytes_sent.iter().sum()
    }

    pub fn is_balanced(&self) -> bool {
        self.bytes_sent.iter().sum::<u64>() == self.bytes_received.iter().sum::<u64>()
    }

    /// Mean bytes sent by one worker in one sync.
    pub fn mean_bytes_per_worker_per_sync(&self) -> f64 {
        if self.syncs.is_empty() || self.workers == 0 {
            return 0.0;
        }
        self.bytes_total() as f64 / (self.workers as f64 * self.syncs.len() as f64)
    }
}

/// Per-worker bytes of one collective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub sent: Vec<u64>,
    pub received: Vec<u64>,
}

pub fn gtc_message_bytes(words: u64) -> u64 {
    BYTES_PER_WORD * words + GTC_MESSAGE_HEADER_BYTES
}

/// Every worker sends its update to each of the other `N - 1` workers.
pub fn gtc_exchange(words_per_worker: &[u64]) -> Exchange {
    let n = words_per_worker.len() as u64;
    let messages: Vec<u64> = words_per_worker.iter().map(|&w| gtc_message_bytes(w)).collect();
    let all: u64 = messages.iter().sum();
    Exchange {
        sent: messages.iter().map(|m| m * n.saturating_sub(1)).collect(),
        received: messages.iter().map(|m| all - m).collect(),
    }
}

/// Ring all-reduce: reduce-scatter plus all-gather, `2 (N - 1)` chunks of
/// `ceil(P / N)` parameters each way per worker.
pub fn dense_allreduce_exchange(params: u64, workers: usize) -> Exchange {
    let n = workers as u64;
    let per_worker = if n <= 1 {
        0
    } else {
        2 * (n - 1) * params.div_ceil(n) * BYTES_PER_WORD
    };
    Exchange {
        sent: vec![per_worker; workers],
        received: vec![per_worker; workers],
    }
}

/// Rank 0 gathers `N - 1` dense models and broadcasts the global model back.
pub fn bmuf_exchange(params: u64, workers: usize) -> Exchange {
    let model = params * BYTES_PER_WORD;
    let n = workers as u64;
    let mut sent = vec![model; workers];
    let mut received = vec![model; workers];
    if workers > 0 {
        sent[0] = model * n.saturating_sub(1);
        received[0] = model * n.saturating_sub(1);
    }
    if workers <= 1 {
        sent.iter_mut().for_each(|b| *b = 0);
        received.iter_mut().for_each(|b| *b = 0);
    }
    Exchange { sent, received }
}

/// Total bytes of one GTC sync in which every coordinate is sent.
pub fn dense_gtc_equivalent_bytes(params: u64, workers: usize) -> u64 {
    let n = workers as u64;
    n * n.saturating_sub(1) * gtc_message_bytes(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gtc_exchange_is_balanced() {
        let ex = gtc_exchange(&[3, 0, 7]);
        assert_eq!(ex.sent, vec![2 * 28, 2 * 16, 2 * 44]);
        assert_eq!(ex.received, vec![16 + 44, 28 + 44, 28 + 16]);
        assert_eq!(ex.sent.iter().sum::<u64>(), ex.received.iter().sum::<u64>());
    }

    #[test]
    fn single_worker_moves_nothing() {
        assert_eq!(gtc_exchange(&[5]).sent, vec![0]);
        assert_eq!(bmuf_exchange(100, 1).sent, vec![0]);
        assert_eq!(dense_allreduce_exchange(100, 1).sent, vec![0]);
    }

    #[test]
    fn bmuf_exchange_gathers_and_broadcasts() {
        let ex = bmuf_exchange(10, 4);
        assert_eq!(ex.sent, vec![120, 40, 40, 40]);
        assert_eq!(ex.received, vec![120, 40, 40, 40]);
    }

    #[test]
    fn ledger_totals() {
        let mut ledger = CommLedger::new(2);
        ledger.record(SyncKind::Gtc, 3, &gtc_exchange(&[1, 2])).unwrap();
        assert_eq!(ledger.sync_count(), 1);
        assert_eq!(ledger.bytes_total(), 20 + 24);
        assert!(ledger.is_balanced());
        assert!(ledger.record(SyncKind::Gtc, 0, &gtc_exchange(&[1])).is_err());
    }
}

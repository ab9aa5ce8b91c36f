//! Bandwidth/latency model that turns a [`CommLedger`] into predicted
//! wall-clock time and speedup over a single worker.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ledger::{bmuf_exchange, dense_allreduce_exchange, gtc_exchange, CommLedger, SyncKind};
use crate::error::{Error, Result};
use crate::model::{MiniBatch, ReferenceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Bits per second between hosts.
    #[serde(default = "defaults::inter_host_bandwidth")]
    pub inter_host_bandwidth: f64,
    /// Bits per second between workers on one host; `None` makes it free.
    pub intra_host_bandwidth: Option<f64>,
    /// Seconds of fixed overhead per sync.
    #[serde(default = "defaults::latency")]
    pub latency: f64,
    /// Seconds of compute per mini-batch on one worker.
    #[serde(default = "defaults::compute_per_minibatch")]
    pub compute_per_minibatch: f64,
    #[serde(default = "defaults::workers_per_host")]
    pub workers_per_host: usize,
    /// Effective inter-host bandwidth is divided by `hosts^contention_exponent`.
    /// Zero disables contention.
    #[serde(default)]
    pub contention_exponent: f64,
}

mod defaults {
    pub fn inter_host_bandwidth() -> f64 {
        25e9
    }
    pub fn latency() -> f64 {
        1e-3
    }
    pub fn compute_per_minibatch() -> f64 {
        0.05
    }
    pub fn workers_per_host() -> usize {
        8
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            inter_host_bandwidth: defaults::inter_host_bandwidth(),
            intra_host_bandwidth: Some(300e9),
            latency: defaults::latency(),
            compute_per_minibatch: defaults::compute_per_minibatch(),
            workers_per_host: defaults::workers_per_host(),
            contention_exponent: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let intra_ok = self.intra_host_bandwidth.is_none_or(|b| b > 0.0);
        if !(self.inter_host_bandwidth > 0.0
            && intra_ok
            && self.latency > 0.0
            && self.compute_per_minibatch > 0.0
            && self.workers_per_host > 0
            && self.contention_exponent >= 0.0)
        {
            return Err(Error::InvalidConfig(format!("cost model constants must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Mean wall time of one forward/backward over `batch`, timed over 10 runs.
    pub fn measure_compute(model: &ReferenceModel, batch: &MiniBatch) -> Result<f64> {
        model.loss_and_gradient(batch)?;
        let start = Instant::now();
        for _ in 0..10 {
            model.loss_and_gradient(batch)?;
        }
        Ok((start.elapsed().as_secs_f64() / 10.0).max(1e-9))
    }

    fn hosts(&self, workers: usize) -> usize {
        workers.div_ceil(self.workers_per_host).max(1)
    }

    /// Seconds one sync costs a worker that moves `bytes`.
    pub fn sync_seconds(&self, bytes: f64, workers: usize) -> f64 {
        if workers <= 1 {
            return 0.0;
        }
        let local = self.workers_per_host.min(workers);
        let cross_fraction = (workers - local) as f64 / (workers - 1) as f64;
        let inter = self.inter_host_bandwidth / (self.hosts(workers) as f64).powf(self.contention_exponent);
        let cross = bytes * cross_fraction * 8.0 / inter;
        let intra = self
            .intra_host_bandwidth
            .map_or(0.0, |bw| bytes * (1.0 - cross_fraction) * 8.0 / bw);
        self.latency + cross + intra
    }
}

/// Predicted `(T_1, T_N)` in seconds for `minibatch_count` mini-batches
/// summed over all workers.
pub fn modeled_times(ledger: &CommLedger, cost: &CostModel, workers: usize, minibatch_count: u64) -> (f64, f64) {
    let n = workers.max(1) as f64;
    let t1 = minibatch_count as f64 * cost.compute_per_minibatch;
    let comm = ledger.sync_count() as f64 * cost.sync_seconds(ledger.mean_bytes_per_worker_per_sync(), workers);
    (t1, t1 / n + comm)
}

/// `T_1 / T_N`; exactly `N` when nothing was synchronized.
pub fn estimate_speedup(ledger: &CommLedger, cost: &CostModel, workers: usize, minibatch_count: u64) -> f64 {
    let (t1, tn) = modeled_times(ledger, cost, workers, minibatch_count);
    if ledger.sync_count() == 0 || workers <= 1 {
        return workers.max(1) as f64;
    }
    if tn <= 0.0 {
        return 0.0;
    }
    t1 / tn
}

/// Ledger of `steps` synchronous dense all-reduce steps.
pub fn project_dense(params: u64, workers: usize, steps: u64) -> CommLedger {
    let mut ledger = CommLedger::new(workers);
    let ex = dense_allreduce_exchange(params, workers);
    for _ in 0..steps {
        ledger
            .record(SyncKind::Dense, params * workers as u64, &ex)
            .expect("exchange sized for ledger");
    }
    ledger
}

/// Ledger of `steps` GTC syncs where each worker sends `density * params` words.
pub fn project_gtc(params: u64, density: f64, workers: usize, steps: u64) -> CommLedger {
    let words = (params as f64 * density).round() as u64;
    let mut ledger = CommLedger::new(workers);
    let ex = gtc_exchange(&vec![words; workers]);
    for _ in 0..steps {
        ledger
            .record(SyncKind::Gtc, words * workers as u64, &ex)
            .expect("exchange sized for ledger");
    }
    ledger
}

/// Ledger of BMUF over `steps` local mini-batches per worker.
pub fn project_bmuf(params: u64, workers: usize, block_size: u64, steps: u64) -> CommLedger {
    let mut ledger = CommLedger::new(workers);
    let ex = bmuf_exchange(params, workers);
    for _ in 0..steps.div_ceil(block_size.max(1)) {
        ledger
            .record(SyncKind::Bmuf, params * workers as u64, &ex)
            .expect("exchange sized for ledger");
    }
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_sync_gives_linear_speedup() {
        let cost = CostModel::default();
        let ledger = CommLedger::new(16);
        assert_eq!(estimate_speedup(&ledger, &cost, 16, 1000), 16.0);
    }

    #[test]
    fn vanishing_compute_drives_speedup_to_zero() {
        let mut cost = CostModel::default();
        let ledger = project_dense(1_000_000, 16, 100);
        let mut last = f64::INFINITY;
        for c in [1e-1, 1e-3, 1e-5, 1e-9] {
            cost.compute_per_minibatch = c;
            let s = estimate_speedup(&ledger, &cost, 16, 1600);
            assert!(s < last);
            last = s;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn speedup_monotone_in_bytes_latency_bandwidth() {
        let cost = CostModel::default();
        let small = project_gtc(1_000_000, 0.001, 32, 100);
        let large = project_gtc(1_000_000, 0.01, 32, 100);
        assert!(estimate_speedup(&small, &cost, 32, 3200) >= estimate_speedup(&large, &cost, 32, 3200));

        let slow = CostModel { latency: 1e-2, ..cost.clone() };
        assert!(estimate_speedup(&small, &cost, 32, 3200) >= estimate_speedup(&small, &slow, 32, 3200));

        let fast = CostModel { inter_host_bandwidth: 100e9, ..cost.clone() };
        assert!(estimate_speedup(&small, &fast, 32, 3200) >= estimate_speedup(&small, &cost, 32, 3200));
    }

    #[test]
    fn intra_host_only_traffic_skips_inter_bandwidth() {
        let cost = CostModel { intra_host_bandwidth: None, ..CostModel::default() };
        assert_eq!(cost.sync_seconds(1e9, 8), cost.latency);
    }
}

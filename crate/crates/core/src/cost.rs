//! Latency and bandwidth parameters that turn protocol events into virtual
//! time. Every field can be overridden from a config file (`cost.<field>`).

use crate::error::SimError;

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// GPU-side cost of launching one kernel.
    pub kernel_launch: u64,
    /// Host cost of enqueueing one task on a GPU stream.
    pub host_enqueue: u64,
    /// Fixed host cost of a stream synchronize.
    pub host_sync: u64,
    pub mmio: u64,
    /// Host cost of writing one NIC command descriptor.
    pub nic_enqueue: u64,
    /// Counter-reaches-threshold to descriptor-starts-executing delay.
    pub trigger_fire: u64,
    pub inter_latency: u64,
    /// Inter-node bandwidth in bytes per nanosecond.
    pub inter_bw: f64,
    /// Intra-node (GPU IPC) bandwidth in bytes per nanosecond.
    pub intra_bw: f64,
    /// Cost of one signal store or signal put body.
    pub signal: u64,
    /// Host cost of one NIC counter read.
    pub host_poll: u64,
    /// Extra latency of an intra-node GPU-to-GPU copy.
    pub xgmi_latency: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            kernel_launch: 5_000,
            host_enqueue: 300,
            host_sync: 10_000,
            mmio: 100,
            nic_enqueue: 500,
            trigger_fire: 200,
            inter_latency: 2_000,
            inter_bw: 25.0,
            intra_bw: 50.0,
            signal: 500,
            host_poll: 200,
            xgmi_latency: 0,
        }
    }
}

pub const COST_KEYS: &[&str] = &[
    "kernel_launch",
    "host_enqueue",
    "host_sync",
    "mmio",
    "nic_enqueue",
    "trigger_fire",
    "inter_latency",
    "inter_bw",
    "intra_bw",
    "signal",
    "host_poll",
    "xgmi_latency",
];

fn ceil_div(bytes: usize, bw: f64) -> u64 {
    (bytes as f64 / bw).ceil() as u64
}

impl CostModel {
    /// Wire time of an inter-node transfer, excluding the trigger delay.
    pub fn inter_transfer(&self, bytes: usize) -> u64 {
        self.inter_latency + ceil_div(bytes, self.inter_bw)
    }

    /// Body of an intra-node copy phase (no launch cost).
    pub fn intra_copy(&self, bytes: usize) -> u64 {
        self.xgmi_latency + ceil_div(bytes, self.intra_bw)
    }

    /// A runtime-issued IPC copy outside the application stream.
    pub fn ipc_copy(&self, bytes: usize) -> u64 {
        self.kernel_launch + self.intra_copy(bytes)
    }

    pub fn inter_signal(&self) -> u64 {
        self.inter_latency + self.signal
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, bw) in [("inter_bw", self.inter_bw), ("intra_bw", self.intra_bw)] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(SimError::Config(format!("{name} must be positive, got {bw}")));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SimError> {
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| SimError::Config(format!("cost.{key}: expected integer ns, got `{v}`")))
        };
        let float = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| SimError::Config(format!("cost.{key}: expected number, got `{v}`")))
        };
        match key {
            "kernel_launch" => self.kernel_launch = int(value)?,
            "host_enqueue" => self.host_enqueue = int(value)?,
            "host_sync" => self.host_sync = int(value)?,
            "mmio" => self.mmio = int(value)?,
            "nic_enqueue" => self.nic_enqueue = int(value)?,
            "trigger_fire" => self.trigger_fire = int(value)?,
            "inter_latency" => self.inter_latency = int(value)?,
            "inter_bw" => self.inter_bw = float(value)?,
            "intra_bw" => self.intra_bw = float(value)?,
            "signal" => self.signal = int(value)?,
            "host_poll" => self.host_poll = int(value)?,
            "xgmi_latency" => self.xgmi_latency = int(value)?,
            _ => return Err(SimError::Config(format!("unknown cost key `{key}`"))),
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_mib_inter_node_put() {
        let c = CostModel::default();
        // 1 MiB / 25 B/ns = 41943.04 ns, rounded up.
        assert_eq!(c.inter_transfer(1 << 20), 2_000 + 41_944);
    }

    #[test]
    fn intra_copy_rounds_up() {
        let c = CostModel::default();
        assert_eq!(c.intra_copy(128), 3);
        assert_eq!(c.intra_copy(1), 1);
        assert_eq!(c.ipc_copy(100), 5_002);
    }

    #[test]
    fn set_rejects_unknown_and_bad_values() {
        let mut c = CostModel::default();
        c.set("host_sync", "20000").unwrap();
        assert_eq!(c.host_sync, 20_000);
        assert!(c.set("warp_size", "64").is_err());
        assert!(c.set("inter_bw", "0").is_err());
        assert!(c.set("mmio", "fast").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = CostModel::default();
        for k in COST_KEYS {
            c.set(k, "7").unwrap();
        }
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HardwareError;

/// Latency and bandwidth of one interconnect class.
///
/// `gbps` is in gigabytes (10^9 bytes) per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub latency_ns: u64,
    pub gbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandConfig {
    pub devices_per_host: u32,
    pub hosts: u32,
    /// Mesh extents; empty means a 1-D mesh over all devices.
    #[serde(default)]
    pub mesh: Vec<u32>,
    pub ici: LinkConfig,
}

impl IslandConfig {
    pub fn device_count(&self) -> u32 {
        self.devices_per_host * self.hosts
    }
}

/// Cluster topology document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub islands: Vec<IslandConfig>,
    pub dcn: LinkConfig,
    pub pcie: LinkConfig,
    pub hbm_bytes: u64,
}

pub const DEFAULT_PCIE: LinkConfig = LinkConfig {
    latency_ns: 5_000,
    gbps: 16.0,
};
pub const DEFAULT_ICI: LinkConfig = LinkConfig {
    latency_ns: 1_000,
    gbps: 100.0,
};
pub const DEFAULT_DCN: LinkConfig = LinkConfig {
    latency_ns: 50_000,
    gbps: 10.0,
};
pub const DEFAULT_HBM_BYTES: u64 = 16 * 1_000_000_000;

impl ClusterConfig {
    /// `islands` identical islands of `hosts` x `devices_per_host` with the
    /// default calibration constants.
    pub fn uniform(islands: u32, hosts: u32, devices_per_host: u32) -> Self {
        ClusterConfig {
            islands: (0..islands)
                .map(|_| IslandConfig {
                    devices_per_host,
                    hosts,
                    mesh: vec![hosts * devices_per_host],
                    ici: DEFAULT_ICI,
                })
                .collect(),
            dcn: DEFAULT_DCN,
            pcie: DEFAULT_PCIE,
            hbm_bytes: DEFAULT_HBM_BYTES,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, HardwareError> {
        let cfg: ClusterConfig = serde_json::from_str(s).map_err(|e| HardwareError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HardwareError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| HardwareError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("cluster config serializes")
    }

    pub fn validate(&self) -> Result<(), HardwareError> {
        if self.islands.is_empty() {
            return Err(HardwareError::Config("cluster has no islands".into()));
        }
        for (i, island) in self.islands.iter().enumerate() {
            if island.hosts == 0 || island.devices_per_host == 0 {
                return Err(HardwareError::Config(format!(
                    "island {i}: hosts and devices_per_host must be positive"
                )));
            }
            if !island.mesh.is_empty() {
                let product: u64 = island.mesh.iter().map(|&d| d as u64).product();
                if product != island.device_count() as u64 {
                    return Err(HardwareError::Config(format!(
                        "island {i}: mesh {:?} covers {product} devices, island has {}",
                        island.mesh,
                        island.device_count()
                    )));
                }
            }
            check_link(&format!("island {i} ici"), &island.ici)?;
        }
        check_link("dcn", &self.dcn)?;
        check_link("pcie", &self.pcie)?;
        Ok(())
    }

    pub fn device_count(&self) -> u32 {
        self.islands.iter().map(IslandConfig::device_count).sum()
    }

    pub fn host_count(&self) -> u32 {
        self.islands.iter().map(|i| i.hosts).sum()
    }
}

fn check_link(name: &str, link: &LinkConfig) -> Result<(), HardwareError> {
    if !(link.gbps.is_finite() && link.gbps > 0.0) {
        return Err(HardwareError::Config(format!(
            "{name}: bandwidth must be positive, got {}",
            link.gbps
        )));
    }
    Ok(())
}

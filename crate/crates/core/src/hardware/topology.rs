use serde::{Deserialize, Serialize};

use super::config::{ClusterConfig, IslandConfig, LinkConfig};
use super::HardwareError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IslandId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Pcie,
    Ici,
    Dcn,
}

/// A priced interconnect: moving `b` bytes costs `latency + b / bandwidth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkClass {
    pub kind: LinkKind,
    pub latency_ns: u64,
    pub bytes_per_sec: f64,
}

impl LinkClass {
    pub fn new(kind: LinkKind, cfg: &LinkConfig) -> Self {
        LinkClass {
            kind,
            latency_ns: cfg.latency_ns,
            bytes_per_sec: cfg.gbps * 1e9,
        }
    }

    pub fn transfer_ns(&self, bytes: u64) -> u64 {
        self.latency_ns + self.wire_ns(bytes)
    }

    /// Serialization time alone, without the latency term.
    pub fn wire_ns(&self, bytes: u64) -> u64 {
        (bytes as f64 * 1e9 / self.bytes_per_sec).round() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceInfo {
    pub id: DeviceId,
    pub island: IslandId,
    pub host: HostId,
    pub hbm_capacity: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostInfo {
    pub id: HostId,
    pub island: IslandId,
    pub devices: Vec<DeviceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Island {
    pub id: IslandId,
    pub devices: Vec<DeviceId>,
    pub hosts: Vec<HostId>,
    pub mesh: Vec<u32>,
    pub ici: LinkClass,
}

/// Static shape of the simulated fabric: islands, hosts, devices, links.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub devices: Vec<DeviceInfo>,
    pub hosts: Vec<HostInfo>,
    pub islands: Vec<Island>,
    pub dcn: LinkClass,
    pub pcie: LinkClass,
    pub hbm_bytes: u64,
}

impl Topology {
    pub fn new(cfg: &ClusterConfig) -> Result<Self, HardwareError> {
        cfg.validate()?;
        let mut topo = Topology {
            devices: Vec::new(),
            hosts: Vec::new(),
            islands: Vec::new(),
            dcn: LinkClass::new(LinkKind::Dcn, &cfg.dcn),
            pcie: LinkClass::new(LinkKind::Pcie, &cfg.pcie),
            hbm_bytes: cfg.hbm_bytes,
        };
        for island in &cfg.islands {
            topo.add_island(island);
        }
        Ok(topo)
    }

    /// Append an island; device and host ids continue after the existing ones.
    pub fn add_island(&mut self, cfg: &IslandConfig) -> IslandId {
        let island_id = IslandId(self.islands.len() as u32);
        let mut island = Island {
            id: island_id,
            devices: Vec::new(),
            hosts: Vec::new(),
            mesh: if cfg.mesh.is_empty() {
                vec![cfg.device_count()]
            } else {
                cfg.mesh.clone()
            },
            ici: LinkClass::new(LinkKind::Ici, &cfg.ici),
        };
        for _ in 0..cfg.hosts {
            let host_id = HostId(self.hosts.len() as u32);
            let mut host = HostInfo {
                id: host_id,
                island: island_id,
                devices: Vec::new(),
            };
            for _ in 0..cfg.devices_per_host {
                let dev = DeviceId(self.devices.len() as u32);
                self.devices.push(DeviceInfo {
                    id: dev,
                    island: island_id,
                    host: host_id,
                    hbm_capacity: self.hbm_bytes,
                });
                host.devices.push(dev);
                island.devices.push(dev);
            }
            island.hosts.push(host_id);
            self.hosts.push(host);
        }
        self.islands.push(island);
        island_id
    }

    pub fn device(&self, id: DeviceId) -> Result<&DeviceInfo, HardwareError> {
        self.devices.get(id.0 as usize).ok_or(HardwareError::UnknownDevice(id))
    }

    pub fn host_of(&self, id: DeviceId) -> HostId {
        self.devices[id.0 as usize].host
    }

    pub fn island_of(&self, id: DeviceId) -> IslandId {
        self.devices[id.0 as usize].island
    }

    pub fn host_island(&self, host: HostId) -> IslandId {
        self.hosts[host.0 as usize].island
    }

    /// Link used for a device-to-device transfer; `None` for a local copy.
    pub fn link_between(&self, src: DeviceId, dst: DeviceId) -> Option<LinkClass> {
        if src == dst {
            return None;
        }
        let (a, b) = (self.island_of(src), self.island_of(dst));
        if a == b {
            Some(self.islands[a.0 as usize].ici)
        } else {
            Some(self.dcn)
        }
    }

    /// Time to move `bytes` from `src` to `dst`.
    pub fn transfer_ns(&self, src: DeviceId, dst: DeviceId, bytes: u64) -> u64 {
        self.link_between(src, dst).map(|l| l.transfer_ns(bytes)).unwrap_or(0)
    }

    /// One-way latency of a control message between two hosts (DCN unless local).
    pub fn control_latency_ns(&self, a: HostId, b: HostId) -> u64 {
        if a == b {
            0
        } else {
            self.dcn.latency_ns
        }
    }
}

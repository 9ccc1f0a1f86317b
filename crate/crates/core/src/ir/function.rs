use serde::{Deserialize, Serialize};

use super::IrError;

pub const DEFAULT_LAYOUT: &str = "block";

/// Per-shard tensor: size and layout tag.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub bytes: u64,
    pub layout: String,
}

impl TensorSpec {
    pub fn new(bytes: u64) -> Self {
        TensorSpec {
            bytes,
            layout: DEFAULT_LAYOUT.to_string(),
        }
    }

    pub fn with_layout(bytes: u64, layout: &str) -> Self {
        TensorSpec {
            bytes,
            layout: layout.to_string(),
        }
    }
}

/// A sharded computation whose shapes and cost are known up front when
/// `regular` is set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CompiledFunction {
    pub name: String,
    pub shards: u32,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<TensorSpec>,
    pub duration_ns: u64,
    pub regular: bool,
    pub collective: bool,
    /// Names of the functions folded into this one by fusion, in order.
    pub parts: Vec<String>,
}

impl CompiledFunction {
    pub fn new(name: &str, shards: u32, duration_ns: u64) -> Self {
        CompiledFunction {
            name: name.to_string(),
            shards,
            inputs: vec![TensorSpec::new(0)],
            outputs: vec![TensorSpec::new(0)],
            duration_ns,
            regular: true,
            collective: false,
            parts: Vec::new(),
        }
    }

    pub fn with_io(mut self, in_bytes: &[u64], out_bytes: &[u64]) -> Self {
        self.inputs = in_bytes.iter().map(|&b| TensorSpec::new(b)).collect();
        self.outputs = out_bytes.iter().map(|&b| TensorSpec::new(b)).collect();
        self
    }

    pub fn collective(mut self, yes: bool) -> Self {
        self.collective = yes;
        self
    }

    pub fn regular(mut self, yes: bool) -> Self {
        self.regular = yes;
        self
    }

    pub fn validate(&self) -> Result<(), IrError> {
        if self.shards == 0 {
            return Err(IrError::InvalidFunction {
                name: self.name.clone(),
                reason: "shard count must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Logical size of output `index` across all shards.
    pub fn logical_output_bytes(&self, index: usize) -> Option<u64> {
        self.outputs.get(index).map(|t| t.bytes * self.shards as u64)
    }

    pub fn logical_input_bytes(&self, index: usize) -> Option<u64> {
        self.inputs.get(index).map(|t| t.bytes * self.shards as u64)
    }

    /// Device bytes one shard holds while it runs: inputs plus outputs.
    pub fn shard_footprint(&self) -> u64 {
        self.inputs.iter().chain(&self.outputs).map(|t| t.bytes).sum()
    }

    /// Names applied to the data, in order. A fused function replays its parts.
    pub fn applied_names(&self) -> Vec<&str> {
        if self.parts.is_empty() {
            vec![self.name.as_str()]
        } else {
            self.parts.iter().map(String::as_str).collect()
        }
    }
}

/// Wire form used inside program JSON documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FunctionJson {
    pub name: String,
    pub shards: u32,
    pub in_bytes: Vec<u64>,
    pub out_bytes: Vec<u64>,
    pub us_per_shard: f64,
    pub regular: bool,
    pub collective: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_layouts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_layouts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<String>,
}

impl From<&CompiledFunction> for FunctionJson {
    fn from(f: &CompiledFunction) -> Self {
        let layouts = |specs: &[TensorSpec]| {
            if specs.iter().all(|t| t.layout == DEFAULT_LAYOUT) {
                None
            } else {
                Some(specs.iter().map(|t| t.layout.clone()).collect())
            }
        };
        FunctionJson {
            name: f.name.clone(),
            shards: f.shards,
            in_bytes: f.inputs.iter().map(|t| t.bytes).collect(),
            out_bytes: f.outputs.iter().map(|t| t.bytes).collect(),
            us_per_shard: f.duration_ns as f64 / 1_000.0,
            regular: f.regular,
            collective: f.collective,
            in_layouts: layouts(&f.inputs),
            out_layouts: layouts(&f.outputs),
            parts: f.parts.clone(),
        }
    }
}

impl TryFrom<FunctionJson> for CompiledFunction {
    type Error = String;

    fn try_from(j: FunctionJson) -> Result<Self, String> {
        if !(j.us_per_shard.is_finite() && j.us_per_shard >= 0.0) {
            return Err(format!("us_per_shard must be non-negative, got {}", j.us_per_shard));
        }
        let specs = |bytes: Vec<u64>, layouts: Option<Vec<String>>, what: &str| match layouts {
            None => Ok(bytes.into_iter().map(TensorSpec::new).collect::<Vec<_>>()),
            Some(l) if l.len() == bytes.len() => Ok(bytes
                .into_iter()
                .zip(l)
                .map(|(bytes, layout)| TensorSpec { bytes, layout })
                .collect()),
            Some(l) => Err(format!("{what}: {} layouts for {} tensors", l.len(), bytes.len())),
        };
        let f = CompiledFunction {
            inputs: specs(j.in_bytes, j.in_layouts, "in_layouts")?,
            outputs: specs(j.out_bytes, j.out_layouts, "out_layouts")?,
            name: j.name,
            shards: j.shards,
            duration_ns: (j.us_per_shard * 1_000.0).round() as u64,
            regular: j.regular,
            collective: j.collective,
            parts: j.parts,
        };
        f.validate().map_err(|e| e.to_string())?;
        Ok(f)
    }
}

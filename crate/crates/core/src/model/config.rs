use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Shape of the routed network: `specific_blocks` leading blocks are
/// duplicated per branch, the remaining blocks are shared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub kernel: usize,
    pub blocks: Vec<BlockSpec>,
    /// Number of condition-specific blocks.
    #[serde(rename = "N_S")]
    pub specific_blocks: usize,
    /// Number of condition branches.
    #[serde(rename = "N_c")]
    pub num_branches: usize,
    /// Condition name → branch index.
    pub branch_map: BTreeMap<String, usize>,
    /// GeM exponent.
    #[serde(rename = "p")]
    pub gem_p: f64,
}

pub fn default_branch_map() -> BTreeMap<String, usize> {
    [
        ("reference-day", 0),
        ("dawn", 1),
        ("dusk", 2),
        ("snow", 3),
        ("night", 4),
        ("night-rain", 4),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let block = |channels, stride| BlockSpec { channels, stride };
        Self {
            in_channels: 3,
            kernel: 3,
            blocks: vec![block(8, 1), block(16, 2), block(16, 2), block(32, 2)],
            specific_blocks: 4,
            num_branches: 5,
            branch_map: default_branch_map(),
            gem_p: 3.0,
        }
    }
}

impl NetworkConfig {
    /// Total block count (`B`).
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Shared block count (`N_A = B − N_S`).
    pub fn agnostic_blocks(&self) -> usize {
        self.blocks.len().saturating_sub(self.specific_blocks)
    }

    /// Descriptor dimension (`K`), the width of the last block.
    pub fn descriptor_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    /// Input channels of block `i`.
    pub fn block_input_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.blocks[i - 1].channels
        }
    }

    /// Smallest input side that survives every stride-2 block with at
    /// least one pixel left at each.
    pub fn min_input_size(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product::<usize>().max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, msg: String| Err(ModelError::InvalidConfig {
            field: field.to_string(),
            message: msg,
        });
        if self.blocks.is_empty() {
            return bad("blocks", "at least one block is required".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad("kernel", format!("must be odd, got {}", self.kernel));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || !(b.stride == 1 || b.stride == 2) {
                return bad("blocks", format!("block {i} needs channels > 0 and stride 1 or 2"));
            }
        }
        if self.specific_blocks > self.blocks.len() {
            return bad(
                "N_S",
                format!(
                    "specific_blocks = {} exceeds the block count B = {}",
                    self.specific_blocks,
                    self.blocks.len()
                ),
            );
        }
        if self.num_branches == 0 {
            return bad("N_c", "num_branches must be at least 1".into());
        }
        if let Some((name, b)) = self.branch_map.iter().find(|(_, b)| **b >= self.num_branches) {
            return bad(
                "branch_map",
                format!("condition `{name}` maps to branch {b} but N_c = {}", self.num_branches),
            );
        }
        if !(self.gem_p >= 1.0 && self.gem_p.is_finite()) {
            return bad("p", format!("GeM exponent must be >= 1, got {}", self.gem_p));
        }
        Ok(())
    }

    /// Checks that every declared condition has a branch.
    pub fn check_covers(&self, conditions: &[String]) -> Result<(), ModelError> {
        match conditions.iter().find(|c| !self.branch_map.contains_key(*c)) {
            Some(c) => Err(ModelError::UnmappedCondition(c.clone())),
            None => Ok(()),
        }
    }
}

/// Parameter tally for a network configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub agnostic: usize,
    pub per_branch_specific: usize,
    pub total: usize,
}

/// Weight and bias counts, split into shared and per-branch parts.
pub fn count_parameters(config: &NetworkConfig) -> ParamCount {
    let block_params = |i: usize| {
        let out = config.blocks[i].channels;
        out * config.block_input_channels(i) * config.kernel * config.kernel + out
    };
    let ns = config.specific_blocks.min(config.blocks.len());
    let per_branch_specific: usize = (0..ns).map(block_params).sum();
    let agnostic: usize = (ns..config.blocks.len()).map(block_params).sum();
    ParamCount {
        agnostic,
        per_branch_specific,
        total: agnostic + config.num_branches * per_branch_specific,
    }
}

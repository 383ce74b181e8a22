use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetworkConfig;
use super::ModelError;
use crate::numerics::{NamedParam, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `Cout×Cin×k×k`.
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

/// Per-branch parameter sets for the specific blocks plus the shared
/// parameters of the remaining blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `theta[branch][block]`, blocks `0..N_S`.
    pub theta: Vec<Vec<BlockParams>>,
    /// Blocks `N_S..B`.
    pub phi: Vec<BlockParams>,
}

const BIAS_INIT: f64 = 0.01;

impl ModelParams {
    /// He-normal weights, small positive biases. Every branch is a clone
    /// of one initialization.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.num_blocks());
        for (i, b) in config.blocks.iter().enumerate() {
            let cin = config.block_input_channels(i);
            let fan_in = cin * config.kernel * config.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..b.channels * fan_in).map(|_| normal.sample(&mut rng)).collect();
            blocks.push(BlockParams {
                weight: Arc::new(
                    Tensor::new(vec![b.channels, cin, config.kernel, config.kernel], w)
                        .expect("weight length matches shape"),
                ),
                bias: Arc::new(Tensor::full(&[b.channels], BIAS_INIT)),
            });
        }
        let phi = blocks.split_off(config.specific_blocks);
        // Deep copies: branches must not share storage.
        let theta = (0..config.num_branches)
            .map(|_| {
                blocks
                    .iter()
                    .map(|p| BlockParams {
                        weight: Arc::new((*p.weight).clone()),
                        bias: Arc::new((*p.bias).clone()),
                    })
                    .collect()
            })
            .collect();
        Ok(Self { theta, phi })
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |p: &BlockParams| BlockParams {
            weight: Arc::new(Tensor::zeros(p.weight.shape())),
            bias: Arc::new(Tensor::zeros(p.bias.shape())),
        };
        Self {
            theta: self.theta.iter().map(|b| b.iter().map(z).collect()).collect(),
            phi: self.phi.iter().map(z).collect(),
        }
    }

    /// Blocks used by `branch`, in network order.
    pub fn route(&self, branch: usize) -> impl Iterator<Item = &BlockParams> {
        self.theta[branch].iter().chain(self.phi.iter())
    }

    /// All tensors with their names, in the fixed declaration order:
    /// every branch's blocks, then the shared blocks; weight before bias.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (b, blocks) in self.theta.iter().enumerate() {
            for (i, p) in blocks.iter().enumerate() {
                out.push((format!("theta{b}.block{i}.weight"), &*p.weight));
                out.push((format!("theta{b}.block{i}.bias"), &*p.bias));
            }
        }
        let offset = self.theta.first().map_or(0, Vec::len);
        for (i, p) in self.phi.iter().enumerate() {
            out.push((format!("phi.block{}.weight", i + offset), &*p.weight));
            out.push((format!("phi.block{}.bias", i + offset), &*p.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<NamedParam<'_>> {
        let offset = self.theta.first().map_or(0, Vec::len);
        let mut out = Vec::new();
        for (b, blocks) in self.theta.iter_mut().enumerate() {
            for (i, p) in blocks.iter_mut().enumerate() {
                out.push(NamedParam {
                    name: format!("theta{b}.block{i}.weight"),
                    value: Arc::make_mut(&mut p.weight),
                });
                out.push(NamedParam {
                    name: format!("theta{b}.block{i}.bias"),
                    value: Arc::make_mut(&mut p.bias),
                });
            }
        }
        for (i, p) in self.phi.iter_mut().enumerate() {
            out.push(NamedParam {
                name: format!("phi.block{}.weight", i + offset),
                value: Arc::make_mut(&mut p.weight),
            });
            out.push(NamedParam {
                name: format!("phi.block{}.bias", i + offset),
                value: Arc::make_mut(&mut p.bias),
            });
        }
        out
    }

    /// Element-wise sum with a structurally identical parameter set.
    pub fn add_assign(&mut self, other: &ModelParams) -> Result<(), ModelError> {
        let mut mine = self.named_params_mut();
        let theirs = other.named_tensors();
        if mine.len() != theirs.len() {
            return Err(ModelError::ParamStructure("parameter sets differ in length".into()));
        }
        for (m, (_, t)) in mine.iter_mut().zip(theirs) {
            m.value.add_assign(t)?;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks the parameter shapes against `config`.
    pub fn check_against(&self, config: &NetworkConfig) -> Result<(), ModelError> {
        let expected = ModelParams::init_shapes(config);
        let got: Vec<Vec<usize>> = self.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        if expected != got {
            return Err(ModelError::ParamStructure(
                "parameter shapes do not match the network configuration".into(),
            ));
        }
        Ok(())
    }

    fn init_shapes(config: &NetworkConfig) -> Vec<Vec<usize>> {
        let block = |i: usize| {
            let c = config.blocks[i].channels;
            vec![
                vec![c, config.block_input_channels(i), config.kernel, config.kernel],
                vec![c],
            ]
        };
        let mut out = Vec::new();
        for _ in 0..config.num_branches {
            for i in 0..config.specific_blocks {
                out.extend(block(i));
            }
        }
        for i in config.specific_blocks..config.num_blocks() {
            out.extend(block(i));
        }
        out
    }

    /// Rebuilds a parameter set from tensors in declaration order.
    pub fn from_tensors(config: &NetworkConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let shapes = Self::init_shapes(config);
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s != t.shape()) {
            return Err(ModelError::ParamStructure(
                "tensor list does not match the network configuration".into(),
            ));
        }
        let mut it = tensors.into_iter().map(Arc::new);
        let mut next_block = || BlockParams {
            weight: it.next().expect("length checked"),
            bias: it.next().expect("length checked"),
        };
        let theta = (0..config.num_branches)
            .map(|_| (0..config.specific_blocks).map(|_| next_block()).collect())
            .collect();
        let phi = (config.specific_blocks..config.num_blocks()).map(|_| next_block()).collect();
        Ok(Self { theta, phi })
    }
}

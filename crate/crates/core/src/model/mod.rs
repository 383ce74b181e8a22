//! The condition-routed descriptor network: the branch selected by the
//! input's condition runs the first `N_S` blocks, the shared blocks run
//! the rest, then GeM pooling and L2 normalization.

mod config;
mod params;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{count_parameters, default_branch_map, BlockSpec, NetworkConfig, ParamCount};
pub use params::{BlockParams, ModelParams};

use crate::numerics::{ops, conv_block_forward, Gradients, Graph, NodeId, NumericsError, Tensor};
use crate::synthworld::ConditionId;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid network config `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("condition `{0}` has no branch in branch_map")]
    UnmappedCondition(String),
    #[error("input {height}×{width}×{channels} does not fit the network: {reason}")]
    BadInput {
        height: usize,
        width: usize,
        channels: usize,
        reason: String,
    },
    #[error("parameter structure: {0}")]
    ParamStructure(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Unit-norm global image descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// Wraps a vector that is already unit-norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self, ModelError> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 || values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numerics(NumericsError::InvalidArgument(format!(
                "descriptor norm {n} is not 1"
            ))));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// Generalized-mean pooling of an `N×M×K` map into a `K`-vector.
pub fn gem_pool(x: &Tensor, p: f64) -> Result<Vec<f64>, ModelError> {
    Ok(ops::gem_forward(x, p)?.into_data())
}

/// Scales `d` to unit L2 norm.
pub fn l2_normalize(d: &[f64]) -> Result<Descriptor, ModelError> {
    Ok(Descriptor(ops::l2_normalize(&Tensor::vector(d.to_vec()))?.into_data()))
}

/// A network configuration, its parameters, and the condition → branch
/// routing table resolved against a list of declared conditions.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ModelParams,
    routes: Vec<Option<usize>>,
    condition_names: Vec<String>,
}

/// Graph leaves holding every parameter tensor of a [`Model`].
#[derive(Clone, Debug)]
pub struct ParamLeaves {
    theta: Vec<Vec<(NodeId, NodeId)>>,
    phi: Vec<(NodeId, NodeId)>,
}

impl Model {
    pub fn new(config: NetworkConfig, params: ModelParams, condition_names: &[String]) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_against(&config)?;
        let routes = condition_names
            .iter()
            .map(|n| config.branch_map.get(n).copied())
            .collect();
        Ok(Self {
            config,
            params,
            routes,
            condition_names: condition_names.to_vec(),
        })
    }

    /// Fresh model with cloned branch initializations.
    pub fn init(config: NetworkConfig, condition_names: &[String], seed: u64) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, params, condition_names)
    }

    pub fn condition_names(&self) -> &[String] {
        &self.condition_names
    }

    /// Branch that processes images captured under `condition`.
    pub fn branch_of(&self, condition: ConditionId) -> Result<usize, ModelError> {
        match self.routes.get(condition.0) {
            Some(Some(b)) => Ok(*b),
            Some(None) => Err(ModelError::UnmappedCondition(self.condition_names[condition.0].clone())),
            None => Err(ModelError::UnmappedCondition(format!("#{}", condition.0))),
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<(), ModelError> {
        let &[h, w, c] = image.shape() else {
            return Err(ModelError::BadInput {
                height: 0,
                width: 0,
                channels: 0,
                reason: format!("expected H×W×C, got {:?}", image.shape()),
            });
        };
        let min = self.config.min_input_size();
        let reason = if c != self.config.in_channels {
            format!("expected {} channels", self.config.in_channels)
        } else if h < min || w < min {
            format!("smaller than the {min}×{min} minimum")
        } else {
            return Ok(());
        };
        Err(ModelError::BadInput {
            height: h,
            width: w,
            channels: c,
            reason,
        })
    }

    /// Pre-pooling feature map of `image` through `branch`.
    pub fn feature_map(&self, image: &Tensor, branch: usize) -> Result<Tensor, ModelError> {
        self.check_input(image)?;
        let mut x: Option<Tensor> = None;
        for (spec, p) in self.config.blocks.iter().zip(self.params.route(branch)) {
            let input = x.as_ref().unwrap_or(image);
            x = Some(conv_block_forward(input, &p.weight, &p.bias, spec.stride)?);
        }
        Ok(x.expect("config has at least one block"))
    }

    /// Descriptor of `image` captured under `condition`. Only the routed
    /// branch's parameters are read.
    pub fn forward_descriptor(&self, image: &Tensor, condition: ConditionId) -> Result<Descriptor, ModelError> {
        let branch = self.branch_of(condition)?;
        self.forward_branch(image, branch)
    }

    pub fn forward_branch(&self, image: &Tensor, branch: usize) -> Result<Descriptor, ModelError> {
        let features = self.feature_map(image, branch)?;
        l2_normalize(&gem_pool(&features, self.config.gem_p)?)
    }

    /// Registers every parameter tensor (all branches) as a trainable leaf.
    pub fn register_params(&self, g: &mut Graph) -> ParamLeaves {
        let mut leaf = |p: &BlockParams| {
            (
                g.shared_leaf(Arc::clone(&p.weight), true),
                g.shared_leaf(Arc::clone(&p.bias), true),
            )
        };
        let theta = self
            .params
            .theta
            .iter()
            .map(|blocks| blocks.iter().map(&mut leaf).collect())
            .collect();
        let phi = self.params.phi.iter().map(&mut leaf).collect();
        ParamLeaves { theta, phi }
    }

    /// Appends the descriptor computation for `image` to `g`.
    pub fn descriptor_node(
        &self,
        g: &mut Graph,
        leaves: &ParamLeaves,
        image: NodeId,
        condition: ConditionId,
    ) -> Result<NodeId, ModelError> {
        let branch = self.branch_of(condition)?;
        let mut x = image;
        let route = leaves.theta[branch].iter().chain(leaves.phi.iter());
        for (spec, &(w, b)) in self.config.blocks.iter().zip(route) {
            x = g.conv_block(x, w, b, spec.stride)?;
        }
        let pooled = g.gem(x, self.config.gem_p)?;
        Ok(g.l2_normalize(pooled)?)
    }

    /// Gathers parameter gradients into a [`ModelParams`]-shaped set;
    /// parameters the loss does not reach get exact zeros.
    pub fn collect_grads(&self, leaves: &ParamLeaves, grads: &mut Gradients) -> ModelParams {
        let mut take = |(w, b): &(NodeId, NodeId)| BlockParams {
            weight: Arc::new(grads.take(*w)),
            bias: Arc::new(grads.take(*b)),
        };
        ModelParams {
            theta: leaves
                .theta
                .iter()
                .map(|blocks| blocks.iter().map(&mut take).collect())
                .collect(),
            phi: leaves.phi.iter().map(&mut take).collect(),
        }
    }

    /// Multiply-adds of one forward pass on an `h×w` input, measured by
    /// running the graph.
    pub fn forward_macs(&self, image: &Tensor, condition: ConditionId) -> Result<u64, ModelError> {
        let mut g = Graph::new();
        let leaves = self.register_params(&mut g);
        let x = g.leaf(image.clone(), false);
        self.descriptor_node(&mut g, &leaves, x, condition)?;
        g.forward()?;
        Ok(g.mac_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        crate::synthworld::ConditionTable::default()
            .names()
            .map(str::to_string)
            .collect()
    }

    fn image(seed: u64, side: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![side, side, 3],
            (0..side * side * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gem_examples() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((gem_pool(&x, 1.0).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((gem_pool(&x, 3.0).unwrap()[0] - 11f64.cbrt()).abs() < 1e-9);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap().as_slice(), &[0.0, 1.0]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn identical_branches_give_condition_independent_descriptors() {
        let model = Model::init(NetworkConfig::default(), &names(), 1).unwrap();
        let img = image(2, 24);
        let d0 = model.forward_descriptor(&img, ConditionId(0)).unwrap();
        for c in 1..6 {
            assert_eq!(d0, model.forward_descriptor(&img, ConditionId(c)).unwrap());
        }
    }

    #[test]
    fn unmapped_condition_is_an_error() {
        let mut cfg = NetworkConfig::default();
        cfg.branch_map.remove("snow");
        let model = Model::init(cfg, &names(), 1).unwrap();
        assert!(matches!(
            model.forward_descriptor(&image(0, 16), ConditionId(3)),
            Err(ModelError::UnmappedCondition(n)) if n == "snow"
        ));
    }

    #[test]
    fn too_small_input_rejected() {
        let model = Model::init(NetworkConfig::default(), &names(), 1).unwrap();
        assert!(matches!(
            model.forward_descriptor(&image(0, 4), ConditionId(0)),
            Err(ModelError::BadInput { .. })
        ));
    }

    #[test]
    fn graph_and_direct_forward_agree() {
        let model = Model::init(
            NetworkConfig {
                specific_blocks: 2,
                ..NetworkConfig::default()
            },
            &names(),
            4,
        )
        .unwrap();
        let img = image(5, 20);
        let direct = model.forward_descriptor(&img, ConditionId(4)).unwrap();
        let mut g = Graph::new();
        let leaves = model.register_params(&mut g);
        let x = g.leaf(img, false);
        let d = model.descriptor_node(&mut g, &leaves, x, ConditionId(4)).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(d).unwrap().data(), direct.as_slice());
    }

    #[test]
    fn n_s_bounds_validated() {
        let cfg = NetworkConfig {
            specific_blocks: 5,
            ..NetworkConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("N_S"));
    }
}

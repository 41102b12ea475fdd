//! Parameter layout, naming and deterministic initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy)]
pub struct EwrIds {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy)]
pub struct HeadProjIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone)]
pub struct LayerIds {
    pub heads: Vec<HeadProjIds>,
    pub w_o: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Clone, Copy)]
pub struct EdgeMlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy)]
pub struct RegHeadIds {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Typed handles into the parameter store; which groups exist follows the
/// config's active components.
#[derive(Clone)]
pub struct ParamIds {
    pub encoder_w: ParamId,
    pub encoder_b: ParamId,
    pub ewr: Vec<EwrIds>,
    pub bank: Option<ParamId>,
    pub layers: Vec<LayerIds>,
    pub edge_mlp: Option<EdgeMlpIds>,
    pub reg_head: RegHeadIds,
}

/// Every tensor draws from its own stream derived from (seed, name), so
/// shared tensors initialize identically across variants that differ only
/// in which extra parameter groups they carry.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    crate::seeding::stream(seed, name)
}

fn xavier(store: &mut ParamStore, seed: u64, name: &str, dims: Vec<usize>, fan_in: usize, fan_out: usize) -> ParamId {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = tensor_rng(seed, name);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    store.insert(name, Tensor::new(dims, data).expect("init shape"))
}

fn zeros(store: &mut ParamStore, name: &str, dims: Vec<usize>) -> ParamId {
    store.insert(name, Tensor::zeros(dims))
}

/// Pre-ReLU biases start slightly positive so units whose input is all
/// zero (blank image regions) begin active instead of pinned on the ReLU
/// kink, where the subgradient is zero and training (and gradient
/// checking) could never move them.
const RELU_BIAS_INIT: f64 = 0.01;

fn relu_bias(store: &mut ParamStore, name: &str, dims: Vec<usize>) -> ParamId {
    let n: usize = dims.iter().product();
    store.insert(name, Tensor::new(dims, vec![RELU_BIAS_INIT; n]).expect("init shape"))
}

fn ones(store: &mut ParamStore, name: &str, dims: Vec<usize>) -> ParamId {
    let n: usize = dims.iter().product();
    store.insert(name, Tensor::new(dims, vec![1.0; n]).expect("init shape"))
}

/// Builds the full parameter store for a config. Insertion order is the
/// canonical checkpoint order.
pub fn build_params(config: &ModelConfig, seed: u64) -> Result<(ParamStore, ParamIds)> {
    config.validate()?;
    let c = config.channels;
    let s = config.heads;
    let hd = config.head_dim();
    let p2 = config.patch * config.patch;
    let mut store = ParamStore::new();

    let encoder_w = xavier(&mut store, seed, "encoder.w", vec![p2, c], p2, c);
    let encoder_b = relu_bias(&mut store, "encoder.b", vec![c]);

    let mut ewr = Vec::new();
    if config.has_ewr() {
        for h in 0..s {
            let k1 = xavier(&mut store, seed, &format!("ewr.h{h}.k1"), vec![c / 2, c, 3, 3], c * 9, (c / 2) * 9);
            let b1 = relu_bias(&mut store, &format!("ewr.h{h}.b1"), vec![c / 2]);
            let k2 = xavier(&mut store, seed, &format!("ewr.h{h}.k2"), vec![1, c / 2, 3, 3], (c / 2) * 9, 9);
            let b2 = zeros(&mut store, &format!("ewr.h{h}.b2"), vec![1]);
            ewr.push(EwrIds { k1, b1, k2, b2 });
        }
    }

    let bank = if config.has_centrality() {
        // zero-initialized: centrality starts as a no-op and is learned
        Some(zeros(&mut store, "bank", vec![config.m + 1, c]))
    } else {
        None
    };

    let mut layers = Vec::new();
    for l in 0..config.layers {
        let mut heads = Vec::new();
        for h in 0..s {
            let w_q = xavier(&mut store, seed, &format!("layers.{l}.h{h}.w_q"), vec![c, hd], c, hd);
            let w_k = xavier(&mut store, seed, &format!("layers.{l}.h{h}.w_k"), vec![c, hd], c, hd);
            let w_v = xavier(&mut store, seed, &format!("layers.{l}.h{h}.w_v"), vec![c, hd], c, hd);
            heads.push(HeadProjIds { w_q, w_k, w_v });
        }
        let w_o = xavier(&mut store, seed, &format!("layers.{l}.w_o"), vec![c, c], c, c);
        let ln1_g = ones(&mut store, &format!("layers.{l}.ln1.g"), vec![c]);
        let ln1_b = zeros(&mut store, &format!("layers.{l}.ln1.b"), vec![c]);
        let ffn_w1 = xavier(&mut store, seed, &format!("layers.{l}.ffn.w1"), vec![c, 2 * c], c, 2 * c);
        let ffn_b1 = relu_bias(&mut store, &format!("layers.{l}.ffn.b1"), vec![2 * c]);
        let ffn_w2 = xavier(&mut store, seed, &format!("layers.{l}.ffn.w2"), vec![2 * c, c], 2 * c, c);
        let ffn_b2 = zeros(&mut store, &format!("layers.{l}.ffn.b2"), vec![c]);
        let ln2_g = ones(&mut store, &format!("layers.{l}.ln2.g"), vec![c]);
        let ln2_b = zeros(&mut store, &format!("layers.{l}.ln2.b"), vec![c]);
        layers.push(LayerIds { heads, w_o, ln1_g, ln1_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_g, ln2_b });
    }

    let edge_mlp = if config.has_edge_bias() {
        let w1 = xavier(&mut store, seed, "edge.w1", vec![2 * c, c], 2 * c, c);
        let b1 = relu_bias(&mut store, "edge.b1", vec![c]);
        let w2 = xavier(&mut store, seed, "edge.w2", vec![c, 1], c, 1);
        let b2 = zeros(&mut store, "edge.b2", vec![1]);
        Some(EdgeMlpIds { w1, b1, w2, b2 })
    } else {
        None
    };

    let rh_k1 = xavier(&mut store, seed, "head.k1", vec![c / 2, c, 3, 3], c * 9, (c / 2) * 9);
    let rh_b1 = relu_bias(&mut store, "head.b1", vec![c / 2]);
    let rh_k2 = xavier(&mut store, seed, "head.k2", vec![c / 4, c / 2, 3, 3], (c / 2) * 9, (c / 4) * 9);
    let rh_b2 = relu_bias(&mut store, "head.b2", vec![c / 4]);
    let rh_w3 = xavier(&mut store, seed, "head.w3", vec![c / 4, 1], c / 4, 1);
    let rh_b3 = relu_bias(&mut store, "head.b3", vec![1]);

    let ids = ParamIds {
        encoder_w,
        encoder_b,
        ewr,
        bank,
        layers,
        edge_mlp,
        reg_head: RegHeadIds { k1: rh_k1, b1: rh_b1, k2: rh_k2, b2: rh_b2, w3: rh_w3, b3: rh_b3 },
    };
    Ok((store, ids))
}

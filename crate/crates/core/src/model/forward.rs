//! The Gramformer forward pass and its two comparison baselines.
//!
//! The attention graph is built once from the initial node features and
//! reused by every layer; the q-NN neighboring graph (and with it the
//! centrality indices) is rebuilt from the features entering each layer.

use crate::error::{Error, Result};
use crate::graphs::{
    build_attention_graph, centrality_embed, centrality_indices, edge_regularization, ewr_forward,
    knn_neighbors, CentralityState, EwrHeadWeights,
};
use crate::model::config::ModelConfig;
use crate::model::params::{build_params, LayerIds, ParamIds};
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Everything recorded during one forward pass, for diagnostics.
pub struct ForwardTrace {
    /// Attention maps ℛ per layer and head, N×N each.
    pub attention: Vec<Vec<Tensor>>,
    /// The per-head modulation matrices E, when the EWR path is active.
    pub attention_graph: Option<Vec<Tensor>>,
    /// Centrality index per node, per layer (empty when unused).
    pub centrality_idx: Vec<Vec<usize>>,
    /// q-NN neighbor sets per layer (empty when unused).
    pub neighbor_sets: Vec<Vec<Vec<usize>>>,
    /// The features each layer's neighboring graph was computed from.
    pub layer_features: Vec<Tensor>,
    /// Predicted density map, 2H×2W over the patch grid.
    pub density: Tensor,
    /// Patch grid (width, height); N = width·height.
    pub grid: (usize, usize),
}

impl ForwardTrace {
    pub fn nodes(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn predicted_count(&self) -> f64 {
        self.density.data().iter().sum()
    }
}

/// Discrete selections pinned from a previous forward pass so that finite
/// differences see a smooth function.
pub struct FrozenSelections {
    /// Per layer: (neighbor sets, centrality indices).
    pub layers: Vec<(Vec<Vec<usize>>, Vec<usize>)>,
}

impl FrozenSelections {
    pub fn from_trace(trace: &ForwardTrace) -> Self {
        FrozenSelections {
            layers: trace
                .neighbor_sets
                .iter()
                .zip(&trace.centrality_idx)
                .map(|(n, i)| (n.clone(), i.clone()))
                .collect(),
        }
    }
}

/// Tape-level outputs of one forward pass.
pub struct ForwardOutput {
    /// Predicted density on the tape, flattened to (2H·2W)×1.
    pub density: Var,
    /// Edge regularization penalty 𝒬 (present iff the EWR path is active).
    pub q_penalty: Option<Var>,
    pub trace: ForwardTrace,
}

/// Parameter store plus architecture; the unit everything else drives.
pub struct GramformerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) ids: ParamIds,
}

/// Flattens non-overlapping patches and maps them through an affine layer
/// with ReLU. Returns the node features and the patch grid.
pub fn patch_encode(
    tape: &mut Tape,
    image: &Tensor,
    patch: usize,
    w: Var,
    b: Var,
) -> Result<(Var, (usize, usize))> {
    let dims = image.dims();
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "patch_encode",
            lhs: dims.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (h_img, w_img) = (dims[0], dims[1]);
    let img = tape.input(image);
    let patches = tape.patch_extract(img, h_img, w_img, patch)?;
    let lin = tape.matmul(patches, w)?;
    let biased = tape.bias_add_rows(lin, b)?;
    let nodes = tape.relu(biased);
    Ok((nodes, (w_img / patch, h_img / patch)))
}

impl GramformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (params, ids) = build_params(&config, seed)?;
        Ok(GramformerModel { config, params, ids })
    }

    /// Multi-head attention with residual and layer norm (the Ṽ step).
    /// Queries and keys come from `v_hat`; the value projection and the
    /// residual use the unmodulated `v`. When `e_heads` is present the
    /// softmax attention is multiplied by it elementwise, with no
    /// renormalization, so row sums land in [0,1].
    fn attention_block(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        layer: &LayerIds,
        v: Var,
        v_hat: Var,
        e_heads: Option<&[Var]>,
        edge_bias: Option<Var>,
        n: usize,
    ) -> Result<(Var, Vec<Tensor>)> {
        let c = self.config.channels;
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();
        let hd = self.config.head_dim();
        let mut head_outs = Vec::with_capacity(layer.heads.len());
        let mut attn_maps = Vec::with_capacity(layer.heads.len());
        for (s, proj) in layer.heads.iter().enumerate() {
            let q = tape.matmul(v_hat, bound.var(proj.w_q))?;
            let k = tape.matmul(v_hat, bound.var(proj.w_k))?;
            let kt = tape.transpose(k, n, hd);
            let logits = tape.matmul(q, kt)?;
            let mut logits = tape.scale(logits, inv_sqrt_c);
            if let Some(bias) = edge_bias {
                logits = tape.add(logits, bias)?;
            }
            let a = tape.softmax_rows(logits);
            let r = match e_heads {
                Some(e) => tape.mul(e[s], a)?,
                None => a,
            };
            attn_maps.push(tape.to_tensor(r));
            let values = tape.matmul(v, bound.var(proj.w_v))?;
            head_outs.push(tape.matmul(r, values)?);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let proj = tape.matmul(concat, bound.var(layer.w_o))?;
        let resid = tape.add(v, proj)?;
        let tilde = tape.layer_norm(resid, bound.var(layer.ln1_g), bound.var(layer.ln1_b), 1e-5)?;
        Ok((tilde, attn_maps))
    }

    /// V^{l+1} = LN(Ṽ + 𝒦(Ṽ)) with a two-layer ReLU FFN (hidden width 2C).
    fn ffn_block(&self, tape: &mut Tape, bound: &BoundParams, layer: &LayerIds, tilde: Var) -> Result<Var> {
        let f1 = tape.matmul(tilde, bound.var(layer.ffn_w1))?;
        let f1 = tape.bias_add_rows(f1, bound.var(layer.ffn_b1))?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, bound.var(layer.ffn_w2))?;
        let f2 = tape.bias_add_rows(f2, bound.var(layer.ffn_b2))?;
        let resid2 = tape.add(tilde, f2)?;
        tape.layer_norm(resid2, bound.var(layer.ln2_g), bound.var(layer.ln2_b), 1e-5)
    }

    /// Pre-softmax bias matrix of the graph-transformer baseline: an MLP
    /// over concatenated endpoint features of every q-NN edge, scattered
    /// into N×N (zeros elsewhere), shared by all heads.
    fn edge_bias_matrix(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        v_hat: Var,
        neighbors: &[Vec<usize>],
        n: usize,
    ) -> Result<Var> {
        let mlp = self.ids.edge_mlp.as_ref().expect("edge bias requires the edge MLP");
        let mut pairs = Vec::new();
        for (i, set) in neighbors.iter().enumerate() {
            for &j in set {
                pairs.push((i, j));
            }
        }
        let feats = tape.gather_pairs_concat(v_hat, &pairs);
        let h1 = tape.matmul(feats, bound.var(mlp.w1))?;
        let h1 = tape.bias_add_rows(h1, bound.var(mlp.b1))?;
        let h1 = tape.relu(h1);
        let vals = tape.matmul(h1, bound.var(mlp.w2))?;
        let vals = tape.bias_add_rows(vals, bound.var(mlp.b2))?;
        Ok(tape.scatter_edge_bias(vals, &pairs, n))
    }

    /// Runs the L-layer stack over node features `v0` laid out on `grid`.
    pub fn transformer_stack(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        v0: Var,
        grid: (usize, usize),
        frozen: Option<&FrozenSelections>,
    ) -> Result<(Var, StackTrace)> {
        let n = grid.0 * grid.1;
        let c = self.config.channels;

        // the attention graph is set from the initial features and kept
        // constant through all layers
        let (e_heads, q_penalty, attention_graph) = if self.config.has_ewr() {
            let ewr_weights: Vec<EwrHeadWeights> = self
                .ids
                .ewr
                .iter()
                .map(|ids| EwrHeadWeights {
                    k1: bound.var(ids.k1),
                    b1: bound.var(ids.b1),
                    k2: bound.var(ids.k2),
                    b2: bound.var(ids.b2),
                })
                .collect();
            let field = ewr_forward(tape, v0, grid, &ewr_weights)?;
            let q = edge_regularization(tape, &field);
            let graph = build_attention_graph(tape, &field);
            let snapshots = graph.heads.iter().map(|&e| tape.to_tensor(e)).collect();
            (Some(graph.heads), Some(q), Some(snapshots))
        } else {
            (None, None, None)
        };

        let mut v = v0;
        let mut attention = Vec::with_capacity(self.config.layers);
        let mut centrality_idx = Vec::with_capacity(self.config.layers);
        let mut neighbor_sets = Vec::with_capacity(self.config.layers);
        let mut layer_features = Vec::with_capacity(self.config.layers);
        for (l, layer) in self.ids.layers.iter().enumerate() {
            layer_features.push(tape.to_tensor(v));
            let state: Option<CentralityState> = if self.config.needs_knn() {
                match frozen {
                    Some(f) => {
                        let (neigh, idx) = &f.layers[l];
                        Some(CentralityState {
                            neighbors: neigh.clone(),
                            occ: Vec::new(),
                            idx: idx.clone(),
                            k: neigh.first().map(|s| s.len()).unwrap_or(0),
                        })
                    }
                    None => {
                        let feats = tape.value(v).to_vec();
                        let neigh = knn_neighbors(&feats, n, c, self.config.q)?;
                        Some(centrality_indices(&neigh, self.config.m)?)
                    }
                }
            } else {
                None
            };

            let v_hat = match (&state, self.config.has_centrality(), self.ids.bank) {
                (Some(st), true, Some(bank)) => centrality_embed(tape, v, bound.var(bank), &st.idx)?,
                _ => v,
            };
            let edge_bias = match (&state, self.config.has_edge_bias()) {
                (Some(st), true) => Some(self.edge_bias_matrix(tape, bound, v_hat, &st.neighbors, n)?),
                _ => None,
            };

            let (tilde, attn) = self.attention_block(tape, bound, layer, v, v_hat, e_heads.as_deref(), edge_bias, n)?;
            let out = self.ffn_block(tape, bound, layer, tilde)?;
            attention.push(attn);
            match state {
                Some(st) => {
                    centrality_idx.push(st.idx);
                    neighbor_sets.push(st.neighbors);
                }
                None => {
                    centrality_idx.push(Vec::new());
                    neighbor_sets.push(Vec::new());
                }
            }
            v = out;
        }

        Ok((
            v,
            StackTrace {
                attention,
                attention_graph,
                centrality_idx,
                neighbor_sets,
                layer_features,
                q_penalty,
            },
        ))
    }

    /// Density head: reshape to the grid, upsample 2×, two 3×3 convs with
    /// ReLUs, a 1×1 conv (as a matmul over positions) and a final ReLU.
    pub fn regression_head(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        v: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let (w, h) = grid;
        let n = w * h;
        let c = self.config.channels;
        let rh = &self.ids.reg_head;
        let grid_feat = tape.transpose(v, n, c);
        let up = tape.upsample2x(grid_feat, c, h, w);
        let (h2, w2) = (2 * h, 2 * w);
        let x = tape.conv2d_3x3(up, bound.var(rh.k1), bound.var(rh.b1), h2, w2)?;
        let x = tape.relu(x);
        let x = tape.conv2d_3x3(x, bound.var(rh.k2), bound.var(rh.b2), h2, w2)?;
        let x = tape.relu(x);
        let flat = tape.transpose(x, c / 4, h2 * w2);
        let dens = tape.matmul(flat, bound.var(rh.w3))?;
        let dens = tape.bias_add_rows(dens, bound.var(rh.b3))?;
        Ok(tape.relu(dens))
    }

    /// Full pass: image → patch encoder → transformer stack → density.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &Tensor,
        frozen: Option<&FrozenSelections>,
    ) -> Result<ForwardOutput> {
        let (v0, grid) = patch_encode(
            tape,
            image,
            self.config.patch,
            bound.var(self.ids.encoder_w),
            bound.var(self.ids.encoder_b),
        )?;
        let (v_final, stack) = self.transformer_stack(tape, bound, v0, grid, frozen)?;
        let density = self.regression_head(tape, bound, v_final, grid)?;
        let (w, h) = grid;
        let density_tensor = Tensor::new(vec![2 * h, 2 * w], tape.value(density).to_vec())
            .expect("density buffer");
        Ok(ForwardOutput {
            density,
            q_penalty: stack.q_penalty,
            trace: ForwardTrace {
                attention: stack.attention,
                attention_graph: stack.attention_graph,
                centrality_idx: stack.centrality_idx,
                neighbor_sets: stack.neighbor_sets,
                layer_features: stack.layer_features,
                density: density_tensor,
                grid,
            },
        })
    }

    /// Inference without gradient bookkeeping consumers: runs a private
    /// tape and returns the trace.
    pub fn predict(&self, image: &Tensor) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        Ok(self.forward_on_tape(&mut tape, &bound, image, None)?.trace)
    }

    /// Runs `f` with the parameter store temporarily moved out, so callers
    /// that need `&mut ParamStore` (perturbation, gradient checking) can
    /// still drive the forward pass through `&self`.
    pub fn with_params_detached<T>(&mut self, f: impl FnOnce(&Self, &mut ParamStore) -> T) -> T {
        let mut params = std::mem::take(&mut self.params);
        let out = f(self, &mut params);
        self.params = params;
        out
    }
}

/// Intermediate trace of the transformer stack (before the density head).
pub struct StackTrace {
    pub attention: Vec<Vec<Tensor>>,
    pub attention_graph: Option<Vec<Tensor>>,
    pub centrality_idx: Vec<Vec<usize>>,
    pub neighbor_sets: Vec<Vec<Vec<usize>>>,
    pub layer_features: Vec<Tensor>,
    pub q_penalty: Option<Var>,
}

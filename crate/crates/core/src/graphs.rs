//! The two graphs that modulate the transformer.
//!
//! An attention graph is built once from the initial node features: each
//! head's edge-weight regression (EWR) maps the feature grid to a scalar
//! semantic value per node, and edge weights are the absolute pairwise
//! differences of those values. A separate q-NN neighboring graph is
//! rebuilt from the features at every layer; node in-degrees become
//! centrality indices into a learnable embedding bank.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Per-head scalar semantic values over the node grid, in (0,1).
pub struct SemanticField {
    /// One tape value of length N per head.
    pub heads: Vec<Var>,
    pub w: usize,
    pub h: usize,
}

impl SemanticField {
    pub fn nodes(&self) -> usize {
        self.w * self.h
    }
}

/// Per-head N×N symmetric, zero-diagonal modulation matrices with entries
/// in [0,1].
pub struct AttentionGraph {
    pub heads: Vec<Var>,
    pub n: usize,
}

/// Neighbor sets, in-degrees and capped centrality indices of the q-NN
/// graph over one layer's features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CentralityState {
    /// For each node, its k nearest neighbors by ascending (distance, id).
    pub neighbors: Vec<Vec<usize>>,
    /// In-degree: how many neighbor sets each node appears in.
    pub occ: Vec<usize>,
    /// Bank index per node, in [0, m].
    pub idx: Vec<usize>,
    pub k: usize,
}

/// Tape weights of one head's EWR: two 3×3 convolutions (C→C/2→1) with a
/// ReLU between them and a sigmoid at the end.
#[derive(Clone, Copy)]
pub struct EwrHeadWeights {
    pub k1: Var,
    pub b1: Var,
    pub k2: Var,
    pub b2: Var,
}

/// Runs every head's EWR over the node features laid out as a C×H×W grid
/// (node i sits at grid row i / W). Outputs are strictly inside (0,1).
pub fn ewr_forward(
    tape: &mut Tape,
    nodes: Var,
    grid: (usize, usize),
    heads: &[EwrHeadWeights],
) -> Result<SemanticField> {
    let (w, h) = grid;
    let shape = tape.shape(nodes).to_vec();
    if shape.len() != 2 || shape[0] != w * h {
        return Err(Error::ShapeMismatch {
            op: "ewr_forward",
            lhs: shape,
            rhs: vec![w * h, 0],
        });
    }
    let n = w * h;
    let c = shape[1];
    let grid_feat = tape.transpose(nodes, n, c); // C×N, read as C×H×W
    let mut out = Vec::with_capacity(heads.len());
    for hw in heads {
        let mid = tape.conv2d_3x3(grid_feat, hw.k1, hw.b1, h, w)?;
        let mid = tape.relu(mid);
        let top = tape.conv2d_3x3(mid, hw.k2, hw.b2, h, w)?;
        out.push(tape.sigmoid(top));
    }
    Ok(SemanticField { heads: out, w, h })
}

/// E^s_ij = |f^s_i − f^s_j|: symmetric, zero diagonal, entries in [0,1)
/// because the fields are sigmoid outputs.
pub fn build_attention_graph(tape: &mut Tape, field: &SemanticField) -> AttentionGraph {
    let n = field.nodes();
    let heads = field
        .heads
        .iter()
        .map(|&f| tape.pairwise_abs_diff(f))
        .collect();
    AttentionGraph { heads, n }
}

/// Mean over heads of the per-node squared deviation from the node's
/// grid-row mean semantic value. Zero exactly when every head's field is
/// constant along every horizontal row.
pub fn edge_regularization(tape: &mut Tape, field: &SemanticField) -> Var {
    let mut total: Option<Var> = None;
    for &f in &field.heads {
        let q = tape.row_variance_mean(f, field.w, field.h);
        total = Some(match total {
            Some(t) => tape.add(t, q).expect("scalar add"),
            None => q,
        });
    }
    let t = total.expect("at least one head");
    tape.scale(t, 1.0 / field.heads.len() as f64)
}

/// Effective neighbor count for `n` nodes at fraction `q`: at least one,
/// at most everyone else.
pub fn knn_k(n: usize, q: f64) -> usize {
    ((q * n as f64).round() as usize).clamp(1, n - 1)
}

/// Exact k-nearest-neighbor sets under Euclidean distance, self excluded,
/// ties broken by ascending node index. No gradient flows through the
/// selection.
pub fn knn_neighbors(features: &[f64], n: usize, c: usize, q: f64) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::contract(format!("knn_neighbors: need at least 2 nodes, got {n}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("knn_neighbors: q must be in (0,1], got {q}")));
    }
    debug_assert_eq!(features.len(), n * c);
    let k = knn_k(n, q);
    let mut sets = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let fi = &features[i * c..(i + 1) * c];
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &features[j * c..(j + 1) * c];
            let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d2, j));
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        sets.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(sets)
}

/// In-degrees and capped centrality indices. When the largest in-degree
/// fits under `m` the occurrences are used directly; otherwise they are
/// floor-scaled so the maximum lands exactly on `m`.
pub fn centrality_indices(neighbors: &[Vec<usize>], m: usize) -> Result<CentralityState> {
    if m < 1 {
        return Err(Error::contract("centrality_indices: m must be >= 1".to_string()));
    }
    let n = neighbors.len();
    let mut occ = vec![0usize; n];
    for set in neighbors {
        for &j in set {
            occ[j] += 1;
        }
    }
    let max_occ = occ.iter().copied().max().unwrap_or(0);
    let idx: Vec<usize> = if max_occ <= m {
        occ.clone()
    } else {
        occ.iter().map(|&o| o * m / max_occ).collect()
    };
    let k = neighbors.first().map(|s| s.len()).unwrap_or(0);
    Ok(CentralityState { neighbors: neighbors.to_vec(), occ, idx, k })
}

/// nodes[i] + bank[idx[i]]; the discrete index selection carries no
/// gradient, the embedding add does.
pub fn centrality_embed(tape: &mut Tape, nodes: Var, bank: Var, idx: &[usize]) -> Result<Var> {
    tape.embed_add(nodes, bank, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_from(tape: &mut Tape, values: &[Vec<f64>], w: usize, h: usize) -> SemanticField {
        let heads = values
            .iter()
            .map(|v| tape.input_slice(v, vec![v.len()]))
            .collect();
        SemanticField { heads, w, h }
    }

    // ── ewr_forward ──────────────────────────────────────────────────

    struct EwrFixture {
        c: usize,
        k1: Tensor,
        b1: Tensor,
        k2: Tensor,
        b2: Tensor,
    }

    impl EwrFixture {
        fn zeros(c: usize) -> Self {
            EwrFixture {
                c,
                k1: Tensor::zeros(vec![c / 2, c, 3, 3]),
                b1: Tensor::zeros(vec![c / 2]),
                k2: Tensor::zeros(vec![1, c / 2, 3, 3]),
                b2: Tensor::zeros(vec![1]),
            }
        }

        fn run(&self, nodes: &Tensor, w: usize, h: usize) -> Vec<f64> {
            let mut tape = Tape::new();
            let vn = tape.input(nodes);
            let hw = EwrHeadWeights {
                k1: tape.input(&self.k1),
                b1: tape.input(&self.b1),
                k2: tape.input(&self.k2),
                b2: tape.input(&self.b2),
            };
            let field = ewr_forward(&mut tape, vn, (w, h), &[hw]).unwrap();
            assert_eq!(field.heads.len(), 1);
            let _ = self.c;
            tape.value(field.heads[0]).to_vec()
        }
    }

    #[test]
    fn ewr_zero_weights_yield_half() {
        let fx = EwrFixture::zeros(4);
        let nodes = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        for v in fx.run(&nodes, 2, 2) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn ewr_output_stays_inside_unit_interval() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut fx = EwrFixture::zeros(4);
        for t in [&mut fx.k1, &mut fx.b1, &mut fx.k2, &mut fx.b2] {
            for v in t.data_mut() {
                *v = r.gen_range(-2.0..2.0);
            }
        }
        let nodes = Tensor::new(vec![9, 4], (0..36).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = fx.run(&nodes, 3, 3);
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ewr_center_tap_kernels_match_manual_evaluation() {
        // center-only kernels reduce each conv to a per-node linear map
        let c = 2;
        let mut fx = EwrFixture::zeros(c);
        let w1 = [0.8, -0.4]; // conv1: 2 channels → 1
        for (ch, &wv) in w1.iter().enumerate() {
            fx.k1.data_mut()[ch * 9 + 4] = wv;
        }
        fx.b1.data_mut()[0] = 0.1;
        fx.k2.data_mut()[4] = 1.5;
        fx.b2.data_mut()[0] = -0.2;
        let nodes = Tensor::new(vec![4, 2], vec![0.3, 0.9, -0.5, 0.2, 0.0, -1.0, 0.7, 0.4]).unwrap();
        let got = fx.run(&nodes, 2, 2);
        for i in 0..4 {
            let lin = w1[0] * nodes.at2(i, 0) + w1[1] * nodes.at2(i, 1) + 0.1;
            let manual = 1.0 / (1.0 + (-(1.5 * lin.max(0.0) - 0.2)).exp());
            assert!((got[i] - manual).abs() < 1e-12, "node {i}: {} vs {manual}", got[i]);
        }
    }

    // ── attention graph ──────────────────────────────────────────────

    #[test]
    fn attention_graph_from_two_node_field() {
        let mut tape = Tape::new();
        let field = field_from(&mut tape, &[vec![0.2, 0.7]], 2, 1);
        let g = build_attention_graph(&mut tape, &field);
        let e = tape.value(g.heads[0]);
        let want = [0.0, 0.5, 0.5, 0.0];
        assert!(e.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15), "{e:?}");
    }

    #[test]
    fn constant_field_suppresses_every_edge() {
        let mut tape = Tape::new();
        let field = field_from(&mut tape, &[vec![0.4; 6]], 3, 2);
        let g = build_attention_graph(&mut tape, &field);
        assert!(tape.value(g.heads[0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_graph_matches_pairwise_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let field = field_from(&mut tape, &[vals.clone()], 5, 1);
        let g = build_attention_graph(&mut tape, &field);
        let e = tape.value(g.heads[0]);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(e[i * 5 + j], (vals[i] - vals[j]).abs());
            }
        }
    }

    #[test]
    fn attention_graph_structural_invariants() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = r.gen_range(2..10usize);
            let vals: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            let mut tape = Tape::new();
            let field = field_from(&mut tape, &[vals], n, 1);
            let g = build_attention_graph(&mut tape, &field);
            let e = tape.value(g.heads[0]);
            for i in 0..n {
                assert_eq!(e[i * n + i], 0.0);
                for j in 0..n {
                    assert!(e[i * n + j] >= 0.0 && e[i * n + j] < 1.0);
                    assert_eq!(e[i * n + j], e[j * n + i]);
                }
            }
        }
    }

    // ── edge regularization ──────────────────────────────────────────

    #[test]
    fn row_constant_field_has_zero_penalty() {
        let mut tape = Tape::new();
        // 3 columns × 2 rows; each grid row constant
        let field = field_from(&mut tape, &[vec![0.3, 0.3, 0.3, 0.8, 0.8, 0.8]], 3, 2);
        let q = edge_regularization(&mut tape, &field);
        assert_eq!(tape.value(q)[0], 0.0);
    }

    #[test]
    fn single_row_penalty_matches_hand_arithmetic() {
        let mut tape = Tape::new();
        let field = field_from(&mut tape, &[vec![0.0, 1.0]], 2, 1);
        let q = edge_regularization(&mut tape, &field);
        // mean 0.5, deviations ±0.5 squared = 0.25 each, averaged over N=2
        assert!((tape.value(q)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn penalty_invariant_under_within_row_permutation() {
        let mut tape = Tape::new();
        let a = field_from(&mut tape, &[vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.6]], 3, 2);
        let qa = edge_regularization(&mut tape, &a);
        let b = field_from(&mut tape, &[vec![0.9, 0.1, 0.5, 0.6, 0.2, 0.4]], 3, 2);
        let qb = edge_regularization(&mut tape, &b);
        assert!((tape.value(qa)[0] - tape.value(qb)[0]).abs() < 1e-15);
    }

    #[test]
    fn penalty_positive_iff_some_row_varies() {
        let mut r = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let (w, h) = (r.gen_range(2..5usize), r.gen_range(1..4usize));
            let constant_rows = r.gen_bool(0.5);
            let mut vals = Vec::with_capacity(w * h);
            let mut varies = false;
            for _ in 0..h {
                if constant_rows {
                    let v = r.gen_range(0.0..1.0);
                    vals.extend(std::iter::repeat(v).take(w));
                } else {
                    let row: Vec<f64> = (0..w).map(|_| r.gen_range(0.0..1.0)).collect();
                    varies |= row.iter().any(|&v| v != row[0]);
                    vals.extend(row);
                }
            }
            let mut tape = Tape::new();
            let field = field_from(&mut tape, &[vals], w, h);
            let qv = edge_regularization(&mut tape, &field);
            let q = tape.value(qv)[0];
            if varies {
                assert!(q > 0.0);
            } else {
                assert_eq!(q, 0.0);
            }
        }
    }

    // ── knn ──────────────────────────────────────────────────────────

    #[test]
    fn knn_collinear_features() {
        let feats = [0.0, 1.0, 10.0];
        let sets = knn_neighbors(&feats, 3, 1, 1.0 / 3.0).unwrap();
        assert_eq!(sets, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_duplicate_features_tie_break_by_index() {
        let feats = [2.0, 2.0, 2.0, 2.0];
        let sets = knn_neighbors(&feats, 4, 1, 0.25).unwrap();
        assert_eq!(sets, vec![vec![1], vec![0], vec![0], vec![0]]);
    }

    #[test]
    fn knn_matches_exhaustive_sort_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(41);
        let (n, c, q) = (20usize, 4usize, 0.3);
        let feats: Vec<f64> = (0..n * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let sets = knn_neighbors(&feats, n, c, q).unwrap();
        let k = knn_k(n, q);
        assert_eq!(k, 6);
        for i in 0..n {
            // oracle: full sort of all candidates
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = (0..c)
                        .map(|t| (feats[i * c + t] - feats[j * c + t]).powi(2))
                        .sum();
                    (d2, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all[..k].iter().map(|&(_, j)| j).collect();
            assert_eq!(sets[i], expect, "node {i}");
        }
    }

    #[test]
    fn knn_rejects_degenerate_inputs() {
        assert!(knn_neighbors(&[0.0], 1, 1, 0.5).is_err());
        assert!(knn_neighbors(&[0.0, 1.0], 2, 1, 0.0).is_err());
    }

    // ── centrality ───────────────────────────────────────────────────

    #[test]
    fn star_graph_occurrences() {
        // every node's set contains node 0 (node 0 points at node 1)
        let neigh = vec![vec![1], vec![0], vec![0], vec![0], vec![0]];
        let st = centrality_indices(&neigh, 18).unwrap();
        assert_eq!(st.occ, vec![4, 1, 0, 0, 0]);
        assert_eq!(st.occ.iter().sum::<usize>(), 5); // N·k with k=1
    }

    #[test]
    fn occurrence_scaling_arithmetic() {
        // 36 sets contain node 0, 18 of them also contain node 1:
        // max(occ)=36, m=18 → node 0 gets idx 18, node 1 (occ 18) gets 9
        let mut sets = Vec::new();
        for t in 0..36 {
            if t < 18 {
                sets.push(vec![0, 1]);
            } else {
                sets.push(vec![0]);
            }
        }
        let st = centrality_indices(&sets, 18).unwrap();
        assert_eq!(st.occ[0], 36);
        assert_eq!(st.occ[1], 18);
        assert_eq!(st.idx[0], 18);
        assert_eq!(st.idx[1], 9);
    }

    #[test]
    fn no_scaling_branch_keeps_occurrences() {
        let neigh = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let st = centrality_indices(&neigh, 18).unwrap();
        assert_eq!(st.idx, st.occ);
        assert_eq!(st.occ, vec![2, 2, 2]);
    }

    #[test]
    fn occurrence_sum_and_monotonicity() {
        let mut r = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..20 {
            let n = r.gen_range(4..30usize);
            let c = 3;
            let q = r.gen_range(0.05..1.0);
            let feats: Vec<f64> = (0..n * c).map(|_| r.gen_range(-1.0..1.0)).collect();
            let sets = knn_neighbors(&feats, n, c, q).unwrap();
            let k = knn_k(n, q);
            let m = r.gen_range(1..20usize);
            let st = centrality_indices(&sets, m).unwrap();
            assert_eq!(st.occ.iter().sum::<usize>(), n * k);
            assert!(st.idx.iter().all(|&i| i <= m));
            for a in 0..n {
                for b in 0..n {
                    if st.occ[a] <= st.occ[b] {
                        assert!(st.idx[a] <= st.idx[b]);
                    }
                }
            }
            // self never appears in its own set
            for (i, set) in st.neighbors.iter().enumerate() {
                assert!(!set.contains(&i));
            }
        }
    }
}

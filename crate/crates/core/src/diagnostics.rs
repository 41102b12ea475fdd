//! Attention-homogenization and counting-error diagnostics.
//!
//! ANVar (average normalized variance of attention rows) quantifies how
//! far attention maps are from all looking alike: each row is normalized
//! to mean 1 (making the score invariant under positive row scaling, so
//! sub-unit gramformer row sums compare against softmax rows), its
//! population variance is taken, and scores are averaged over rows, heads
//! and layers. Uniform rows score 0; a one-hot row scores N−1.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::synthdata::write_pgm16;

#[derive(Debug, Clone)]
pub struct AnvarReport {
    /// Mean row score per layer and head; `None` when every row of that
    /// head was zero.
    pub per_layer_head: Vec<Vec<Option<f64>>>,
    /// Mean over all non-skipped rows of all heads and layers; `None`
    /// flags a fully degenerate trace.
    pub overall: Option<f64>,
    pub nodes: usize,
    pub skipped_rows: usize,
    pub total_rows: usize,
}

impl AnvarReport {
    pub fn degenerate(&self) -> bool {
        self.overall.is_none()
    }
}

/// Variance of the mean-1 normalized row, computed around the first entry
/// so that exactly-uniform rows score exactly zero. Returns `None` for
/// all-zero rows (their normalization is undefined).
fn row_score(row: &[f64]) -> Option<f64> {
    let n = row.len() as f64;
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    let scale = n / sum;
    let first = row[0] * scale;
    let mean_c = row.iter().map(|&a| a * scale - first).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&a| {
            let d = (a * scale - first) - mean_c;
            d * d
        })
        .sum::<f64>()
        / n;
    Some(var)
}

pub fn anvar(trace: &ForwardTrace) -> AnvarReport {
    let n = trace.nodes();
    let mut per_layer_head = Vec::with_capacity(trace.attention.len());
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    let mut total_rows = 0usize;
    for layer in &trace.attention {
        let mut heads = Vec::with_capacity(layer.len());
        for head in layer {
            let mut head_sum = 0.0;
            let mut head_count = 0usize;
            for i in 0..n {
                total_rows += 1;
                match row_score(&head.data()[i * n..(i + 1) * n]) {
                    Some(s) => {
                        head_sum += s;
                        head_count += 1;
                        total += s;
                        counted += 1;
                    }
                    None => skipped += 1,
                }
            }
            heads.push(if head_count > 0 { Some(head_sum / head_count as f64) } else { None });
        }
        per_layer_head.push(heads);
    }
    AnvarReport {
        per_layer_head,
        overall: if counted > 0 { Some(total / counted as f64) } else { None },
        nodes: n,
        skipped_rows: skipped,
        total_rows,
    }
}

/// Counting errors over a test set, in the crowd-counting convention
/// (MSE is the root of the mean squared count error).
#[derive(Debug, Clone, Copy)]
pub struct ErrorReport {
    pub mae: f64,
    pub mse: f64,
    pub nae: f64,
    pub samples: usize,
    /// Samples with zero ground-truth count, excluded from NAE.
    pub nae_excluded: usize,
}

pub fn error_metrics(pred_counts: &[f64], gt_counts: &[f64]) -> Result<ErrorReport> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(Error::contract(format!(
            "error_metrics: need equal non-empty lists, got {} and {}",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    let n = pred_counts.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut nae_sum = 0.0;
    let mut nae_n = 0usize;
    for (&p, &g) in pred_counts.iter().zip(gt_counts) {
        let d = p - g;
        abs_sum += d.abs();
        sq_sum += d * d;
        if g > 0.0 {
            nae_sum += d.abs() / g;
            nae_n += 1;
        }
    }
    Ok(ErrorReport {
        mae: abs_sum / n,
        mse: (sq_sum / n).sqrt(),
        nae: if nae_n > 0 { nae_sum / nae_n as f64 } else { 0.0 },
        samples: pred_counts.len(),
        nae_excluded: pred_counts.len() - nae_n,
    })
}

/// Writes one min-max-scaled 16-bit PGM per (layer, head) containing the
/// given node's attention row reshaped onto the patch grid. Returns the
/// written paths.
pub fn export_attention(trace: &ForwardTrace, node: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let n = trace.nodes();
    if node >= n {
        return Err(Error::contract(format!("export_attention: node {node} out of range ({n} nodes)")));
    }
    let (w, h) = trace.grid;
    let mut paths = Vec::new();
    for (l, layer) in trace.attention.iter().enumerate() {
        for (s, head) in layer.iter().enumerate() {
            let row = &head.data()[node * n..(node + 1) * n];
            let (lo, hi) = row
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let scaled: Vec<f64> = if hi > lo {
                row.iter().map(|&v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; n]
            };
            let path = dir.join(format!("attn_l{l}_h{s}_n{node}.pgm"));
            write_pgm16(&path, &scaled, w, h, 1.0)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// CSV of the node's q-NN neighbors per layer:
/// `layer,rank,neighbor_id,grid_x,grid_y`.
pub fn export_neighbors(trace: &ForwardTrace, node: usize, path: &Path) -> Result<()> {
    let n = trace.nodes();
    if node >= n {
        return Err(Error::contract(format!("export_neighbors: node {node} out of range ({n} nodes)")));
    }
    let w = trace.grid.0;
    let mut body = String::from("layer,rank,neighbor_id,grid_x,grid_y\n");
    for (l, sets) in trace.neighbor_sets.iter().enumerate() {
        if sets.is_empty() {
            continue;
        }
        for (rank, &j) in sets[node].iter().enumerate() {
            body.push_str(&format!("{l},{rank},{j},{},{}\n", j % w, j / w));
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::synthdata::read_pgm16;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_from_rows(attention: Vec<Vec<Vec<f64>>>, w: usize, h: usize) -> ForwardTrace {
        let n = w * h;
        ForwardTrace {
            attention: attention
                .into_iter()
                .map(|layer| {
                    layer
                        .into_iter()
                        .map(|m| Tensor::new(vec![n, n], m).unwrap())
                        .collect()
                })
                .collect(),
            attention_graph: None,
            centrality_idx: vec![],
            neighbor_sets: vec![],
            layer_features: vec![],
            density: Tensor::zeros(vec![2 * h, 2 * w]),
            grid: (w, h),
        }
    }

    #[test]
    fn uniform_attention_scores_exactly_zero() {
        let n = 16;
        let rows = vec![1.0 / n as f64; n * n];
        let trace = trace_from_rows(vec![vec![rows]], 4, 4);
        let rep = anvar(&trace);
        assert_eq!(rep.overall, Some(0.0));
    }

    #[test]
    fn one_hot_rows_score_n_minus_one() {
        let n = 64;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + (i * 7) % n] = 1.0;
        }
        let trace = trace_from_rows(vec![vec![m]], 8, 8);
        let rep = anvar(&trace);
        let got = rep.overall.unwrap();
        assert!((got - 63.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn anvar_matches_direct_variance_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(71);
        let n = 12;
        let rows: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.01..1.0)).collect();
        let trace = trace_from_rows(vec![vec![rows.clone()]], 4, 3);
        let rep = anvar(&trace);
        // independent oracle: direct two-pass variance of N·a/Σa
        let mut expect = 0.0;
        for i in 0..n {
            let row = &rows[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            let norm: Vec<f64> = row.iter().map(|&v| n as f64 * v / sum).collect();
            let mean: f64 = norm.iter().sum::<f64>() / n as f64;
            expect += norm.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        }
        expect /= n as f64;
        assert!((rep.overall.unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn all_zero_trace_is_degenerate() {
        let n = 9;
        let trace = trace_from_rows(vec![vec![vec![0.0; n * n]]], 3, 3);
        let rep = anvar(&trace);
        assert!(rep.degenerate());
        assert_eq!(rep.skipped_rows, 9);
        assert_eq!(rep.total_rows, 9);
    }

    #[test]
    fn positive_row_scaling_leaves_scores_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(73);
        let n = 9;
        let rows: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.01..1.0)).collect();
        let scaled: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (0.1 + (i / n) as f64))
            .collect();
        let a = anvar(&trace_from_rows(vec![vec![rows]], 3, 3)).overall.unwrap();
        let b = anvar(&trace_from_rows(vec![vec![scaled]], 3, 3)).overall.unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn error_metrics_zero_for_perfect_predictions() {
        let rep = error_metrics(&[3.0, 7.0], &[3.0, 7.0]).unwrap();
        assert_eq!((rep.mae, rep.mse, rep.nae), (0.0, 0.0, 0.0));
    }

    #[test]
    fn error_metrics_hand_arithmetic() {
        let rep = error_metrics(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert!((rep.mae - 3.0).abs() < 1e-12);
        assert!((rep.mse - 10.0f64.sqrt()).abs() < 1e-12);
        assert!((rep.nae - (2.0 / 12.0 + 4.0 / 16.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn error_metrics_match_direct_recomputation() {
        let mut r = ChaCha8Rng::seed_from_u64(79);
        let pred: Vec<f64> = (0..100).map(|_| r.gen_range(0.0..50.0)).collect();
        let gt: Vec<f64> = (0..100).map(|_| r.gen_range(1.0..50.0)).collect();
        let rep = error_metrics(&pred, &gt).unwrap();
        let mae: f64 = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / 100.0;
        let mse: f64 = (pred.iter().zip(&gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / 100.0).sqrt();
        let nae: f64 = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / 100.0;
        assert!((rep.mae - mae).abs() < 1e-12);
        assert!((rep.mse - mse).abs() < 1e-12);
        assert!((rep.nae - nae).abs() < 1e-12);
        assert!(rep.mae <= rep.mse);
    }

    #[test]
    fn zero_count_samples_are_excluded_from_nae() {
        let rep = error_metrics(&[1.0, 5.0], &[0.0, 4.0]).unwrap();
        assert_eq!(rep.nae_excluded, 1);
        assert!((rep.nae - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_lists_are_rejected() {
        assert!(error_metrics(&[], &[]).is_err());
        assert!(error_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_never_exceeds_mse() {
        let mut r = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..50 {
            let n = r.gen_range(1..30usize);
            let pred: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..100.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| r.gen_range(1.0..100.0)).collect();
            let rep = error_metrics(&pred, &gt).unwrap();
            assert!(rep.mae <= rep.mse + 1e-12);
        }
    }

    #[test]
    fn exported_attention_preserves_argmax() {
        let tmp = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(89);
        let n = 16;
        let rows: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.0..1.0)).collect();
        let trace = trace_from_rows(vec![vec![rows.clone()]], 4, 4);
        let paths = export_attention(&trace, 5, tmp.path()).unwrap();
        assert_eq!(paths.len(), 1);
        let (data, w, h) = read_pgm16(&paths[0]).unwrap();
        assert_eq!((w, h), (4, 4));
        let raw = &rows[5 * n..6 * n];
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&data), argmax(raw));
    }

    #[test]
    fn uniform_attention_exports_constant_image() {
        let n = 9;
        let trace = trace_from_rows(vec![vec![vec![1.0 / n as f64; n * n]]], 3, 3);
        let tmp = tempfile::tempdir().unwrap();
        let paths = export_attention(&trace, 0, tmp.path()).unwrap();
        let (data, _, _) = read_pgm16(&paths[0]).unwrap();
        assert!(data.iter().all(|&v| v == data[0]));
    }

    #[test]
    fn one_hot_attention_exports_single_bright_pixel() {
        let n = 9;
        let mut m = vec![0.0; n * n];
        m[2 * n + 7] = 1.0; // node 2 attends to node 7 → grid (1,2) on a 3-wide grid
        let trace = trace_from_rows(vec![vec![m]], 3, 3);
        let tmp = tempfile::tempdir().unwrap();
        let paths = export_attention(&trace, 2, tmp.path()).unwrap();
        let (data, w, _) = read_pgm16(&paths[0]).unwrap();
        for (i, &v) in data.iter().enumerate() {
            if i == 2 * w + 1 {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn neighbor_export_rows_and_oracle() {
        use crate::graphs::knn_neighbors;
        use crate::model::{GramformerModel, ModelConfig, Variant};
        let cfg = ModelConfig {
            channels: 8,
            heads: 2,
            layers: 2,
            patch: 4,
            m: 6,
            variant: Variant::Gramformer,
            ..ModelConfig::default()
        };
        let model = GramformerModel::new(cfg.clone(), 91).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(93);
        let img = Tensor::new(vec![16, 16], (0..256).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let trace = model.predict(&img).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("neighbors.csv");
        export_neighbors(&trace, 3, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().skip(1).collect();
        let k = trace.neighbor_sets[0][3].len();
        assert_eq!(lines.len(), cfg.layers * k);
        // neighbor ids match a recomputed knn on the traced features
        for l in 0..cfg.layers {
            let feats = trace.layer_features[l].data();
            let recomputed = knn_neighbors(feats, trace.nodes(), cfg.channels, cfg.q).unwrap();
            assert_eq!(trace.neighbor_sets[l][3], recomputed[3], "layer {l}");
        }
    }
}

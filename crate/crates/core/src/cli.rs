//! Command implementations behind the `gramformer` binary: dataset
//! generation, training, evaluation, variant comparison and gradient
//! checking. Every command is deterministic under its seed; no output
//! file contains a timestamp.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::diagnostics::{anvar, error_metrics, ErrorReport};
use crate::error::{Error, Result};
use crate::model::{
    loss_by_name, prepare_sample, scale_augment, scene_loss, scene_loss_with_grads, train_step,
    FrozenSelections, GramformerModel, ModelConfig, Variant,
};
use crate::numerics::{grad_check, AdamConfig, AdamState, GradCheckReport};
use crate::seeding;
use crate::synthdata::{generate_scene, load_dataset, save_scene, write_manifest, SceneSample, SceneSpec};

// ── gen ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct GenSummary {
    pub scenes: usize,
    pub total_count: usize,
    pub mean_count: f64,
}

/// Writes `n` scenes plus a manifest into `out`. Scene i draws from a
/// sub-seed of (seed, i), so generation is order-independent.
pub fn cmd_gen(spec: &SceneSpec, out: &Path, n: usize, seed: u64) -> Result<GenSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::with_capacity(n);
    let mut total = 0usize;
    for i in 0..n {
        let scene = generate_scene(spec, seeding::derive(seed, "scene", i as u64))?;
        let name = format!("scene_{i:05}");
        save_scene(out, &name, &scene)?;
        total += scene.count();
        names.push(name);
    }
    write_manifest(out, &names)?;
    Ok(GenSummary {
        scenes: n,
        total_count: total,
        mean_count: if n > 0 { total as f64 / n as f64 } else { 0.0 },
    })
}

// ── shared evaluation ────────────────────────────────────────────────

/// Full-test-set evaluation: counting errors plus the mean per-scene
/// ANVar (`None` if every trace was degenerate).
pub fn evaluate_model(model: &GramformerModel, scenes: &[SceneSample]) -> Result<(ErrorReport, Option<f64>)> {
    let mut pred = Vec::with_capacity(scenes.len());
    let mut gt = Vec::with_capacity(scenes.len());
    let mut anvar_sum = 0.0;
    let mut anvar_n = 0usize;
    for scene in scenes {
        let trace = model.predict(&scene.image)?;
        pred.push(trace.predicted_count());
        gt.push(scene.count() as f64);
        if let Some(a) = anvar(&trace).overall {
            anvar_sum += a;
            anvar_n += 1;
        }
    }
    let report = error_metrics(&pred, &gt)?;
    let mean_anvar = if anvar_n > 0 { Some(anvar_sum / anvar_n as f64) } else { None };
    Ok((report, mean_anvar))
}

// ── train ────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub model: GramformerModel,
    /// `iter,loss,q,mae` rows at every eval point.
    pub metrics_csv: String,
    pub best_mae: Option<f64>,
    pub final_loss: Option<f64>,
    /// Serialized checkpoint of the best-MAE parameters.
    pub best_checkpoint: Vec<u8>,
}

fn checkpoint_bytes(store: &crate::numerics::ParamStore) -> Result<Vec<u8>> {
    // round-trip through a temp file keeps one serializer
    let tmp = std::env::temp_dir().join(format!("grmf-{}.ckpt", std::process::id()));
    save_checkpoint(&tmp, store)?;
    let bytes = std::fs::read(&tmp)?;
    let _ = std::fs::remove_file(&tmp);
    Ok(bytes)
}

/// The training loop: seeded sample order, optional flip/scale
/// augmentation, one scene per step, periodic evaluation.
pub fn train_model(
    cfg: &RunConfig,
    train_scenes: &[SceneSample],
    eval_scenes: &[SceneSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.iters > 0 && train_scenes.is_empty() {
        return Err(Error::config("training requires a non-empty dataset".to_string()));
    }
    let mut model = GramformerModel::new(cfg.model_config(), cfg.seed)?;
    let loss_fn = loss_by_name(&cfg.loss)?;
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    // data order and augmentation draws depend only on the seed, so two
    // variants trained with the same seed see the same stream
    let mut order_rng = seeding::stream(cfg.seed, "order");
    let mut aug_rng = seeding::stream(cfg.seed, "aug");

    let mut csv = String::from("iter,loss,q,mae\n");
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut final_loss = None;
    for t in 1..=cfg.iters {
        let idx = order_rng.gen_range(0..train_scenes.len());
        let flip = cfg.flip && aug_rng.gen_bool(0.5);
        let scene = &train_scenes[idx];
        let scaled;
        let scene_ref = if cfg.scale_aug {
            let factor = aug_rng.gen_range(cfg.scale_min..=cfg.scale_max);
            scaled = scale_augment(scene, factor, cfg.sigma)?;
            &scaled
        } else {
            scene
        };
        let sample = prepare_sample(scene_ref, cfg.patch, flip)?;
        let stats = train_step(&mut model, &[sample], loss_fn.as_ref(), &mut adam, &adam_cfg)?;
        final_loss = Some(stats.loss);
        if t % cfg.eval_interval == 0 || t == cfg.iters {
            let (report, _) = evaluate_model(&model, eval_scenes)?;
            csv.push_str(&format!("{t},{:?},{:?},{:?}\n", stats.loss, stats.q_penalty, report.mae));
            if best.as_ref().map_or(true, |(b, _)| report.mae < *b) {
                best = Some((report.mae, checkpoint_bytes(&model.params)?));
            }
        }
    }
    let (best_mae, best_checkpoint) = match best {
        Some((mae, bytes)) => (Some(mae), bytes),
        None => (None, checkpoint_bytes(&model.params)?),
    };
    Ok(TrainOutcome {
        model,
        metrics_csv: csv,
        best_mae,
        final_loss,
        best_checkpoint,
    })
}

/// Train from dataset directories and write `final.ckpt`, `best.ckpt`,
/// `metrics.csv` and the effective `config.txt` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, eval_data: Option<&Path>, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_scenes = load_dataset(data)?;
    let eval_scenes = match eval_data {
        Some(p) => load_dataset(p)?,
        None => train_scenes.clone(),
    };
    std::fs::create_dir_all(out)?;
    let outcome = train_model(cfg, &train_scenes, &eval_scenes)?;
    save_checkpoint(&out.join("final.ckpt"), &outcome.model.params)?;
    std::fs::write(out.join("best.ckpt"), &outcome.best_checkpoint)?;
    std::fs::write(out.join("metrics.csv"), &outcome.metrics_csv)?;
    std::fs::write(out.join("config.txt"), cfg.print())?;
    Ok(outcome)
}

// ── eval ─────────────────────────────────────────────────────────────

/// The JSON document written by `eval`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub anvar: Option<f64>,
    pub mae: f64,
    pub mse: f64,
    pub nae: f64,
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let anvar = match self.anvar {
            Some(a) => format!("{a:.4}"),
            None => "degenerate".to_string(),
        };
        format!(
            "mae   {:>12.4}\nmse   {:>12.4}\nnae   {:>12.4}\nanvar {:>12}\n",
            self.mae, self.mse, self.nae, anvar
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval report serializes")
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let mut model = GramformerModel::new(cfg.model_config(), cfg.seed)?;
    load_checkpoint(checkpoint, &mut model.params)?;
    let scenes = load_dataset(data)?;
    let (report, mean_anvar) = evaluate_model(&model, &scenes)?;
    Ok(EvalReport {
        anvar: mean_anvar,
        mae: report.mae,
        mse: report.mse,
        nae: report.nae,
    })
}

// ── compare ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub anvar: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub label: String,
    pub per_seed: Vec<SeedMetrics>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CompareRow {
    pub fn mae_values(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.mae).collect()
    }

    pub fn mae_mean_std(&self) -> (f64, f64) {
        mean_std(&self.mae_values())
    }

    pub fn mse_mean_std(&self) -> (f64, f64) {
        mean_std(&self.per_seed.iter().map(|s| s.mse).collect::<Vec<_>>())
    }

    pub fn anvar_mean_std(&self) -> (f64, f64) {
        mean_std(&self.per_seed.iter().filter_map(|s| s.anvar).collect::<Vec<_>>())
    }
}

/// Trains each variant once per seed with identical data order and
/// evaluates on the held-out set.
pub fn cmd_compare(
    base: &RunConfig,
    data: &Path,
    eval_data: &Path,
    variants: &[Variant],
    seeds: usize,
) -> Result<Vec<CompareRow>> {
    if seeds == 0 {
        return Err(Error::config("seeds must be >= 1".to_string()));
    }
    base.validate()?;
    let train_scenes = load_dataset(data)?;
    let eval_scenes = load_dataset(eval_data)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut per_seed = Vec::with_capacity(seeds);
        for k in 0..seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = base.seed + k as u64;
            cfg.eval_interval = cfg.iters.max(1); // single evaluation at the end
            let outcome = train_model(&cfg, &train_scenes, &eval_scenes)?;
            let (report, mean_anvar) = evaluate_model(&outcome.model, &eval_scenes)?;
            per_seed.push(SeedMetrics {
                seed: cfg.seed,
                mae: report.mae,
                mse: report.mse,
                anvar: mean_anvar,
            });
        }
        rows.push(CompareRow { label: variant.name().to_string(), per_seed });
    }
    Ok(rows)
}

pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>18} {:>18} {:>22}\n",
        "variant", "mae (mean±std)", "mse (mean±std)", "anvar (mean±std)"
    ));
    for row in rows {
        let (mae_m, mae_s) = row.mae_mean_std();
        let (mse_m, mse_s) = row.mse_mean_std();
        let (an_m, an_s) = row.anvar_mean_std();
        out.push_str(&format!(
            "{:<12} {:>10.3}±{:<7.3} {:>10.3}±{:<7.3} {:>14.3}±{:<7.3}\n",
            row.label, mae_m, mae_s, mse_m, mse_s, an_m, an_s
        ));
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("variant,seed,mae,mse,anvar\n");
    for row in rows {
        for s in &row.per_seed {
            let anvar = s.anvar.map(|a| format!("{a:?}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:?},{:?},{anvar}\n", row.label, s.seed, s.mae, s.mse));
        }
    }
    out
}

// ── gradcheck ────────────────────────────────────────────────────────

/// Builds a 16-node model (32×32 image, patch 8, C=8, S=2, L=2), runs the
/// full loss through the finite-difference checker with the discrete
/// selections pinned, and reports per-parameter relative errors.
/// `corrupt` doubles one analytic gradient to prove the checker notices.
pub fn cmd_gradcheck(base: &RunConfig, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mcfg = ModelConfig {
        channels: 8,
        heads: 2,
        layers: 2,
        patch: 8,
        q: base.q,
        m: base.m,
        lambda: base.lambda,
        sigma: 1.5,
        variant: base.variant,
        use_ewr: base.use_ewr,
        use_centrality: base.use_centrality,
    };
    let spec = SceneSpec {
        width: 32,
        height: 32,
        band_expect: vec![2.0, 2.0],
        r0: 1.0,
        radius_gain: 0.05,
        clutter_expect: 1.0,
        sigma: 1.5,
        seed,
    };
    let scene = generate_scene(&spec, seeding::derive(seed, "gradcheck-scene", 0))?;
    let sample = prepare_sample(&scene, mcfg.patch, false)?;
    let mut model = GramformerModel::new(mcfg, seed)?;
    let loss_fn = loss_by_name(&base.loss)?;

    // pin neighbor sets and centrality indices at the unperturbed point so
    // finite differences probe a smooth function
    let trace = model.predict(&scene.image)?;
    let frozen = FrozenSelections::from_trace(&trace);

    model.with_params_detached(|m, params| {
        params.zero_grads();
        scene_loss_with_grads(m, params, &sample, loss_fn.as_ref(), Some(&frozen))?;
        if corrupt {
            let first = params.iter().next().map(|(id, _, _)| id).expect("non-empty store");
            let doubled: Vec<f64> = params.get(first).grad().unwrap_or(&[]).to_vec();
            params.get_mut(first).accumulate_grad(&doubled);
        }
        grad_check(
            params,
            |store| scene_loss(m, store, &sample, loss_fn.as_ref(), Some(&frozen)),
            1e-5,
            1e-4,
        )
    })
}

// ── CLI plumbing shared with the binary ──────────────────────────────

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(|s| Variant::parse(s.trim()))
        .collect()
}

pub fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn load_scene_spec(path: Option<&PathBuf>) -> Result<SceneSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            SceneSpec::parse(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
        None => Ok(SceneSpec::desk_default()),
    }
}

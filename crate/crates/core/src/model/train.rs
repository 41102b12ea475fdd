//! Single-model training: sample preparation (augmentation, density
//! downsampling) and the optimizer step.

use crate::error::Result;
use crate::model::forward::GramformerModel;
use crate::model::loss::{total_loss, DensityLoss};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::synthdata::{downsample_density, rasterize_density, SceneSample};

/// A scene ready for the model: augmented image plus ground-truth density
/// at the model's output resolution.
#[derive(Clone)]
pub struct PreparedSample {
    pub image: Tensor,
    /// Density at 2H×2W over the patch grid (image resolution divided by
    /// patch/2), mass preserved.
    pub gt_density: Tensor,
}

fn flip_horizontal(t: &Tensor) -> Tensor {
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let src = t.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = src[y * w + (w - 1 - x)];
        }
    }
    Tensor::new(vec![h, w], out).expect("flip shape")
}

/// Downsamples the ground truth to the model's output grid and optionally
/// mirrors the pair horizontally.
pub fn prepare_sample(sample: &SceneSample, patch: usize, flip: bool) -> Result<PreparedSample> {
    let (image, density) = if flip {
        (flip_horizontal(&sample.image), flip_horizontal(&sample.density))
    } else {
        (sample.image.clone(), sample.density.clone())
    };
    let gt_density = downsample_density(&density, patch / 2)?;
    Ok(PreparedSample { image, gt_density })
}

/// Random rescaling about the image center: the image is resampled
/// bilinearly, points are transformed (dropping any that leave the frame)
/// and the density is re-rasterized.
pub fn scale_augment(sample: &SceneSample, factor: f64, sigma: f64) -> Result<SceneSample> {
    let (h, w) = (sample.image.dims()[0], sample.image.dims()[1]);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let src = sample.image.data();
    let sample_at = |x: f64, y: f64| -> f64 {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let a = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
        let b = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
        a * (1.0 - fy) + b * fy
    };
    let mut img = vec![0.0; h * w];
    for py in 0..h {
        for px in 0..w {
            let sx = cx + (px as f64 + 0.5 - cx) / factor - 0.5;
            let sy = cy + (py as f64 + 0.5 - cy) / factor - 0.5;
            img[py * w + px] = sample_at(sx, sy);
        }
    }
    let points: Vec<(f64, f64)> = sample
        .points
        .iter()
        .map(|&(x, y)| (cx + (x - cx) * factor, cy + (y - cy) * factor))
        .filter(|&(x, y)| x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64)
        .collect();
    let density = rasterize_density(&points, (h, w), sigma)?;
    Ok(SceneSample {
        image: Tensor::new(vec![h, w], img).expect("image shape"),
        points,
        density,
    })
}

/// Total loss of one sample evaluated from an explicit parameter store
/// (which may be the model's own, temporarily detached). With `frozen`
/// selections the function is smooth in the parameters.
pub fn scene_loss(
    model: &GramformerModel,
    store: &crate::numerics::ParamStore,
    sample: &PreparedSample,
    loss_fn: &dyn DensityLoss,
    frozen: Option<&crate::model::FrozenSelections>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = model.forward_on_tape(&mut tape, &bound, &sample.image, frozen)?;
    let sub = loss_fn.build(&mut tape, out.density, &sample.gt_density)?;
    let total = total_loss(&mut tape, sub, out.q_penalty, model.config.lambda);
    Ok(tape.value(total)[0])
}

/// Like [`scene_loss`] but also backpropagates into the store's gradient
/// accumulators. Returns the loss value.
pub fn scene_loss_with_grads(
    model: &GramformerModel,
    store: &mut crate::numerics::ParamStore,
    sample: &PreparedSample,
    loss_fn: &dyn DensityLoss,
    frozen: Option<&crate::model::FrozenSelections>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = model.forward_on_tape(&mut tape, &bound, &sample.image, frozen)?;
    let sub = loss_fn.build(&mut tape, out.density, &sample.gt_density)?;
    let total = total_loss(&mut tape, sub, out.q_penalty, model.config.lambda);
    let value = tape.value(total)[0];
    let grads = tape.backward(total)?;
    bound.accumulate(&grads, store)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStepStats {
    /// Mean total loss over the batch (including λ·𝒬).
    pub loss: f64,
    /// Mean edge regularization penalty (0 when the EWR path is off).
    pub q_penalty: f64,
}

/// Forward + backward over a batch, then one Adam update. Gradients are
/// averaged over the batch. Deterministic given the model state and batch.
pub fn train_step(
    model: &mut GramformerModel,
    batch: &[PreparedSample],
    loss_fn: &dyn DensityLoss,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
) -> Result<TrainStepStats> {
    assert!(!batch.is_empty(), "train_step: empty batch");
    model.params.zero_grads();
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut q_sum = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward_on_tape(&mut tape, &bound, &sample.image, None)?;
        let sub = loss_fn.build(&mut tape, out.density, &sample.gt_density)?;
        let total = total_loss(&mut tape, sub, out.q_penalty, model.config.lambda);
        loss_sum += tape.value(total)[0];
        if let Some(q) = out.q_penalty {
            q_sum += tape.value(q)[0];
        }
        let scaled = tape.scale(total, inv_b);
        let grads = tape.backward(scaled)?;
        bound.accumulate(&grads, &mut model.params)?;
    }
    adam_step(&mut model.params, adam, adam_cfg);
    Ok(TrainStepStats {
        loss: loss_sum * inv_b,
        q_penalty: q_sum * inv_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, Variant};
    use crate::model::loss::MseCountLoss;
    use crate::synthdata::{generate_scene, SceneSpec};

    fn tiny_config(lambda: f64) -> ModelConfig {
        ModelConfig {
            channels: 8,
            heads: 2,
            layers: 2,
            q: 0.3,
            m: 6,
            lambda,
            patch: 4,
            sigma: 1.5,
            variant: Variant::Gramformer,
            use_ewr: true,
            use_centrality: true,
        }
    }

    fn tiny_scene(seed: u64) -> SceneSample {
        let spec = SceneSpec {
            width: 16,
            height: 16,
            band_expect: vec![2.0, 2.0],
            r0: 1.0,
            radius_gain: 0.05,
            clutter_expect: 1.0,
            sigma: 1.5,
            seed: 0,
        };
        generate_scene(&spec, seed).unwrap()
    }

    fn run_losses(seed: u64, lambda: f64, steps: usize) -> (GramformerModel, Vec<f64>) {
        let mut model = GramformerModel::new(tiny_config(lambda), seed).unwrap();
        let sample = prepare_sample(&tiny_scene(9), 4, false).unwrap();
        let mut adam = AdamState::new(&model.params);
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        let mut losses = Vec::new();
        for _ in 0..steps {
            let stats = train_step(&mut model, &[sample.clone()], &MseCountLoss, &mut adam, &cfg).unwrap();
            losses.push(stats.loss);
        }
        (model, losses)
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let (_, a) = run_losses(3, 0.1, 5);
        let (_, b) = run_losses(3, 0.1, 5);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fifty_steps_reduce_the_loss_on_one_sample() {
        let (_, losses) = run_losses(5, 0.1, 50);
        assert!(
            losses[losses.len() - 1] < losses[0],
            "first {} last {}",
            losses[0],
            losses[losses.len() - 1]
        );
    }

    #[test]
    fn lambda_changes_training_but_not_initialization() {
        let m0 = GramformerModel::new(tiny_config(0.0), 7).unwrap();
        let m1 = GramformerModel::new(tiny_config(0.1), 7).unwrap();
        for (_, name, t) in m0.params.iter() {
            assert_eq!(t.data(), m1.params.get(m1.params.id_of(name).unwrap()).data());
        }
        let (t0, _) = run_losses(7, 0.0, 10);
        let (t1, _) = run_losses(7, 0.1, 10);
        let k1 = t0.ids.ewr[0].k1;
        let a = t0.params.get(k1).data();
        let b = t1.params.get(t1.ids.ewr[0].k1).data();
        assert_ne!(a, b, "EWR parameters should diverge under different λ");
    }

    #[test]
    fn flip_preserves_density_mass() {
        let scene = tiny_scene(11);
        let plain = prepare_sample(&scene, 4, false).unwrap();
        let flipped = prepare_sample(&scene, 4, true).unwrap();
        let m0: f64 = plain.gt_density.data().iter().sum();
        let m1: f64 = flipped.gt_density.data().iter().sum();
        assert!((m0 - m1).abs() < 1e-12);
        assert_eq!(plain.gt_density.dims(), &[8, 8]);
        assert_ne!(plain.image.data(), flipped.image.data());
    }

    #[test]
    fn scale_augment_is_shape_preserving_and_deterministic() {
        let scene = tiny_scene(13);
        let a = scale_augment(&scene, 1.2, 1.5).unwrap();
        let b = scale_augment(&scene, 1.2, 1.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.dims(), scene.image.dims());
        assert!(a.points.iter().all(|&(x, y)| x >= 0.0 && x < 16.0 && y >= 0.0 && y < 16.0));
    }
}

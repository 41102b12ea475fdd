//! Synthetic crowd scenes with perspective-consistent head scale.
//!
//! Head radius grows linearly with the vertical coordinate and is constant
//! along any horizontal line, so semantic content (local scale) is
//! stationary within image rows — the geometry the edge regularization
//! exploits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Geometry and intensity recipe for one family of scenes.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Expected head count per horizontal depth band; bands split the
    /// image height evenly, top to bottom.
    pub band_expect: Vec<f64>,
    /// Head radius at y = 0, in pixels.
    pub r0: f64,
    /// Linear radius gain per pixel of depth: r(y) = r0 + gain·y.
    pub radius_gain: f64,
    /// Expected number of background clutter discs.
    pub clutter_expect: f64,
    /// Gaussian width of the ground-truth density kernel, in pixels.
    pub sigma: f64,
    /// Base seed recorded with the spec; dataset generation derives
    /// per-scene seeds from it.
    pub seed: u64,
}

impl SceneSpec {
    /// 64×64 desk-scale default: ~25 heads spread over four depth bands,
    /// slightly denser where heads are small.
    pub fn desk_default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            band_expect: vec![8.0, 7.0, 6.0, 4.0],
            r0: 1.2,
            radius_gain: 0.035,
            clutter_expect: 6.0,
            sigma: 2.0,
            seed: 0,
        }
    }

    pub fn radius_at(&self, y: f64) -> f64 {
        self.r0 + self.radius_gain * y
    }

    /// Parses `key = value` lines over the desk defaults. Keys: width,
    /// height, bands (comma-separated expected counts), r0, radius_gain,
    /// clutter, sigma, seed.
    pub fn parse(text: &str) -> Result<SceneSpec> {
        let mut spec = SceneSpec::desk_default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::contract(format!("scene spec line {}: expected key = value", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::contract(format!("scene spec line {}: bad {key} value {value:?}", i + 1));
            match key {
                "width" => spec.width = value.parse().map_err(|_| bad())?,
                "height" => spec.height = value.parse().map_err(|_| bad())?,
                "bands" => {
                    spec.band_expect = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<Vec<f64>>>()?;
                }
                "r0" => spec.r0 = value.parse().map_err(|_| bad())?,
                "radius_gain" => spec.radius_gain = value.parse().map_err(|_| bad())?,
                "clutter" => spec.clutter_expect = value.parse().map_err(|_| bad())?,
                "sigma" => spec.sigma = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::contract(format!(
                        "scene spec line {}: unknown key {other:?}",
                        i + 1
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("scene spec: empty image".to_string()));
        }
        if self.band_expect.is_empty() {
            return Err(Error::contract("scene spec: no depth bands".to_string()));
        }
        if self.band_expect.iter().any(|&e| e < 0.0) {
            return Err(Error::contract("scene spec: negative expected count".to_string()));
        }
        if self.r0 <= 0.0 || self.radius_gain < 0.0 {
            return Err(Error::contract("scene spec: radius law must be positive and non-decreasing".to_string()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::contract("scene spec: sigma must be positive".to_string()));
        }
        Ok(())
    }
}

/// One rendered scene with its annotation and ground-truth density map.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Grayscale image in [0,1], height×width.
    pub image: Tensor,
    /// Head centers (x, y) in pixel coordinates.
    pub points: Vec<(f64, f64)>,
    /// Density map whose mass approximates the head count.
    pub density: Tensor,
}

impl SceneSample {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// |Σ density − count|; small by construction (Gaussian truncation and
    /// border losses only).
    pub fn mass_error(&self) -> f64 {
        let mass: f64 = self.density.data().iter().sum();
        (mass - self.count() as f64).abs()
    }
}

/// Knuth's product-of-uniforms Poisson sampler; exact and fully
/// deterministic for the desk-scale rates used here.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// Draws an anti-aliased filled disc, max-blended over the canvas.
fn draw_disc(img: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, r: f64, intensity: f64) {
    let x0 = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let y0 = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w.saturating_sub(1));
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h.saturating_sub(1));
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let coverage = (r - d + 0.5).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let v = intensity * coverage;
                let cell = &mut img[py * w + px];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}

/// Renders one scene: per-band Poisson head counts placed uniformly inside
/// their band, plus optional background clutter. Byte-identical per seed.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // head centers stay a density-kernel width away from the borders so
    // the rasterized mass stays close to the count
    let margin = spec.sigma.min(w as f64 / 4.0).min(h as f64 / 4.0);
    let band_h = h as f64 / spec.band_expect.len() as f64;
    let mut heads: Vec<(f64, f64, f64)> = Vec::new();
    for (bi, &expect) in spec.band_expect.iter().enumerate() {
        let count = poisson(&mut rng, expect);
        let y_lo = (bi as f64 * band_h).max(margin);
        let y_hi = ((bi + 1) as f64 * band_h).min(h as f64 - margin);
        for _ in 0..count {
            let x = rng.gen_range(margin..w as f64 - margin);
            let y = if y_hi > y_lo { rng.gen_range(y_lo..y_hi) } else { y_lo };
            let intensity = rng.gen_range(0.55..0.95);
            heads.push((x, y, intensity));
        }
    }
    let clutter_count = poisson(&mut rng, spec.clutter_expect);
    let mut clutter: Vec<(f64, f64, f64, f64)> = Vec::new();
    for _ in 0..clutter_count {
        let x = rng.gen_range(0.0..w as f64);
        let y = rng.gen_range(0.0..h as f64);
        let r = rng.gen_range(0.8..1.8);
        let intensity = rng.gen_range(0.12..0.35);
        clutter.push((x, y, r, intensity));
    }

    let mut img = vec![0.0; w * h];
    for &(x, y, r, v) in &clutter {
        draw_disc(&mut img, w, h, x, y, r, v);
    }
    for &(x, y, v) in &heads {
        draw_disc(&mut img, w, h, x, y, spec.radius_at(y), v);
    }

    let points: Vec<(f64, f64)> = heads.iter().map(|&(x, y, _)| (x, y)).collect();
    let density = rasterize_density(&points, (h, w), spec.sigma)?;
    Ok(SceneSample {
        image: Tensor::new(vec![h, w], img).expect("image buffer"),
        points,
        density,
    })
}

/// Sum of isotropic Gaussians (unit mass each before truncation) sampled
/// at pixel centers, truncated at 4σ.
pub fn rasterize_density(points: &[(f64, f64)], shape: (usize, usize), sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::contract(format!("rasterize_density: sigma must be positive, got {sigma}")));
    }
    let (h, w) = shape;
    let mut den = vec![0.0; h * w];
    let cutoff = 4.0 * sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for &(x, y) in points {
        let x0 = ((x - cutoff).floor().max(0.0)) as usize;
        let y0 = ((y - cutoff).floor().max(0.0)) as usize;
        let x1 = ((x + cutoff).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y1 = ((y + cutoff).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 + 0.5 - x;
                let dy = py as f64 + 0.5 - y;
                let d2 = dx * dx + dy * dy;
                if d2 <= cutoff * cutoff {
                    den[py * w + px] += norm * (-d2 * inv2s2).exp();
                }
            }
        }
    }
    Ok(Tensor::new(vec![h, w], den).expect("density buffer"))
}

/// Mass-preserving block-sum downsampling of a density map by an integer
/// factor (used to match the model's output resolution).
pub fn downsample_density(density: &Tensor, factor: usize) -> Result<Tensor> {
    let dims = density.dims();
    let (h, w) = (dims[0], dims[1]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "downsample_density: {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    let src = density.data();
    for i in 0..h {
        for j in 0..w {
            out[(i / factor) * ow + j / factor] += src[i * w + j];
        }
    }
    Tensor::new(vec![oh, ow], out)
}

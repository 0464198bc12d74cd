//! Procedural face-like images with independently controllable identity and
//! non-identity factors.
//!
//! Geometry, in normalized canvas coordinates [-1, 1] (y grows downward):
//! an ellipse (the "face") whose center translates with yaw/pitch and whose
//! axes tilt with roll. Identity paints a blob pattern plus a base tone
//! inside the ellipse; the pattern translates with the face but does not
//! rotate, so a fixed readout stays identity-stable across pose. Expression
//! bends a mouth arc and squints two eye spots; a bright center bar tilts
//! with roll so pose stays recoverable from pixels. Background is a smooth
//! seeded gradient, hair a striped band across the canvas top — both depend
//! only on their seeds, never on identity or pose, which is what makes the
//! renderer its own factor-locality oracle.

use std::io::Write;
use std::path::Path;

use ndarray::{Array4, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::imgio;

/// Horizontal / vertical semi-axes of the face ellipse.
pub const FACE_AX: f64 = 0.50;
pub const FACE_AY: f64 = 0.62;
/// Face-center shift per unit sin(yaw) / sin(pitch).
pub const POSE_SHIFT: f64 = 0.10;
/// Canvas rows above this line belong to the hair band.
pub const HAIR_LINE: f64 = -0.80;
pub const POSE_MAX: f64 = std::f64::consts::FRAC_PI_4;

const BLOB_COUNT: usize = 12;

/// Ground-truth generative factors of one rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub identity_id: u32,
    /// Yaw, pitch, roll in radians, each in [-pi/4, pi/4].
    pub pose: [f64; 3],
    /// Expression coefficients in [-1, 1].
    pub expression: Vec<f64>,
    pub background_seed: u64,
    pub hair_seed: u64,
}

impl FactorVector {
    pub fn validate(&self, cfg: &DatasetConfig) -> Result<()> {
        if self.identity_id as usize >= cfg.num_identities {
            return Err(Error::domain(format!(
                "identity_id {} out of range [0, {})",
                self.identity_id, cfg.num_identities
            )));
        }
        if self.pose.iter().any(|p| p.abs() > POSE_MAX + 1e-12) {
            return Err(Error::domain("pose component outside [-pi/4, pi/4]"));
        }
        if self.expression.len() != cfg.exp_dim {
            return Err(Error::shape(format!(
                "expression dim {} != configured {}",
                self.expression.len(),
                cfg.exp_dim
            )));
        }
        if self.expression.iter().any(|e| e.abs() > 1.0 + 1e-12) {
            return Err(Error::domain("expression component outside [-1, 1]"));
        }
        Ok(())
    }
}

/// Batched pixel tensor `[B, 3, H, W]` in [-1, 1] with optional factor
/// metadata and binary face masks `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub factors: Option<Vec<FactorVector>>,
    pub face_masks: Option<Array4<f64>>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dim().3
    }

    /// Stacks single-image batches into one batch, keeping metadata only if
    /// every member carries it.
    pub fn stack(batches: &[ImageBatch]) -> ImageBatch {
        assert!(!batches.is_empty());
        let total: usize = batches.iter().map(|b| b.len()).sum();
        let (_, c, h, w) = batches[0].pixels.dim();
        let mut pixels = Array4::<f64>::zeros((total, c, h, w));
        let all_factors = batches.iter().all(|b| b.factors.is_some());
        let all_masks = batches.iter().all(|b| b.face_masks.is_some());
        let mut masks = all_masks.then(|| Array4::<f64>::zeros((total, 1, h, w)));
        let mut factors = all_factors.then(Vec::new);
        let mut off = 0;
        for b in batches {
            let n = b.len();
            pixels
                .slice_mut(ndarray::s![off..off + n, .., .., ..])
                .assign(&b.pixels);
            if let (Some(m), Some(src)) = (masks.as_mut(), b.face_masks.as_ref()) {
                m.slice_mut(ndarray::s![off..off + n, .., .., ..]).assign(src);
            }
            if let (Some(f), Some(src)) = (factors.as_mut(), b.factors.as_ref()) {
                f.extend(src.iter().cloned());
            }
            off += n;
        }
        ImageBatch {
            pixels,
            factors,
            face_masks: masks,
        }
    }
}

/// A source/target training pair; self-swap items are bitwise-equal copies.
#[derive(Debug, Clone)]
pub struct SwapPair {
    pub source: ImageBatch,
    pub target: ImageBatch,
    pub is_self_swap: Vec<bool>,
}

fn mix_seed(a: u64, tag: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.rotate_left(17))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct IdentityPattern {
    skin: [f64; 3],
    blob_pos: [(f64, f64); BLOB_COUNT],
    blob_sigma: [f64; BLOB_COUNT],
    blob_amp: [[f64; 3]; BLOB_COUNT],
}

struct BgPattern {
    base: [f64; 3],
    grad_x: [f64; 3],
    grad_y: [f64; 3],
    wave_amp: [f64; 3],
    wave_fx: f64,
    wave_fy: f64,
    wave_phase: f64,
}

struct HairPattern {
    base: [f64; 3],
    stripe_amp: [f64; 3],
    stripe_freq: f64,
    stripe_phase: f64,
}

/// Deterministic renderer and batch sampler. Pure function of
/// (pattern_seed, config); safe to share across threads.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    cfg: DatasetConfig,
    /// Fixed unit projections mapping the expression vector to the small set
    /// of rendered mouth/eye controls.
    exp_axes: Vec<Vec<f64>>,
}

impl SynthDataset {
    pub fn new(cfg: DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.pattern_seed, 0xe4, 0));
        let mut exp_axes = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut v: Vec<f64> = (0..cfg.exp_dim)
                .map(|_| uniform(&mut rng, -1.0, 1.0))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter_mut().for_each(|x| *x /= norm);
            exp_axes.push(v);
        }
        Ok(SynthDataset { cfg, exp_axes })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.cfg
    }

    fn identity_pattern(&self, identity_id: u32) -> IdentityPattern {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.cfg.pattern_seed,
            0x1d,
            identity_id as u64,
        ));
        let skin = [
            uniform(&mut rng, -0.1, 0.5),
            uniform(&mut rng, -0.1, 0.5),
            uniform(&mut rng, -0.1, 0.5),
        ];
        let mut blob_pos = [(0.0, 0.0); BLOB_COUNT];
        let mut blob_sigma = [0.0; BLOB_COUNT];
        let mut blob_amp = [[0.0; 3]; BLOB_COUNT];
        for k in 0..BLOB_COUNT {
            // annulus between the center marker zone and the ellipse boundary,
            // rejecting the mouth strip and eye spots
            let (mut px, mut py);
            loop {
                let ang = uniform(&mut rng, 0.0, std::f64::consts::TAU);
                let rad = uniform(&mut rng, 0.34, 0.78);
                px = FACE_AX * rad * ang.cos();
                py = FACE_AY * rad * ang.sin();
                let in_mouth = (0.14..0.40).contains(&py) && px.abs() < 0.26;
                let near_eye = [(-0.20 * FACE_AX, -0.22 * FACE_AY), (0.20 * FACE_AX, -0.22 * FACE_AY)]
                    .iter()
                    .any(|(ex, ey)| ((px - ex).powi(2) + (py - ey).powi(2)).sqrt() < 0.13);
                if !in_mouth && !near_eye {
                    break;
                }
            }
            blob_pos[k] = (px, py);
            blob_sigma[k] = uniform(&mut rng, 0.07, 0.15);
            for c in 0..3 {
                blob_amp[k][c] = uniform(&mut rng, -0.55, 0.55);
            }
        }
        IdentityPattern {
            skin,
            blob_pos,
            blob_sigma,
            blob_amp,
        }
    }

    fn bg_pattern(&self, seed: u64) -> BgPattern {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.pattern_seed, 0xb6, seed));
        BgPattern {
            base: std::array::from_fn(|_| uniform(&mut rng, -0.45, 0.45)),
            grad_x: std::array::from_fn(|_| uniform(&mut rng, -0.3, 0.3)),
            grad_y: std::array::from_fn(|_| uniform(&mut rng, -0.3, 0.3)),
            wave_amp: std::array::from_fn(|_| uniform(&mut rng, 0.0, 0.2)),
            wave_fx: uniform(&mut rng, 0.4, 1.4),
            wave_fy: uniform(&mut rng, 0.4, 1.4),
            wave_phase: uniform(&mut rng, 0.0, std::f64::consts::TAU),
        }
    }

    fn hair_pattern(&self, seed: u64) -> HairPattern {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.pattern_seed, 0x4a, seed));
        HairPattern {
            base: std::array::from_fn(|_| uniform(&mut rng, -0.6, 0.6)),
            stripe_amp: std::array::from_fn(|_| uniform(&mut rng, 0.1, 0.35)),
            stripe_freq: uniform(&mut rng, 2.0, 5.0),
            stripe_phase: uniform(&mut rng, 0.0, std::f64::consts::TAU),
        }
    }

    fn exp_control(&self, expression: &[f64], axis: usize) -> f64 {
        self.exp_axes[axis]
            .iter()
            .zip(expression)
            .map(|(a, e)| a * e)
            .sum()
    }

    /// Renders one image; the returned batch carries the exact face mask and
    /// the factors.
    pub fn render_face(&self, factor: &FactorVector, resolution: usize) -> Result<ImageBatch> {
        factor.validate(&self.cfg)?;
        if resolution < 16 {
            return Err(Error::config(format!(
                "render resolution {resolution} too small (minimum 16)"
            )));
        }
        let idp = self.identity_pattern(factor.identity_id);
        let bg = self.bg_pattern(factor.background_seed);
        let hair = self.hair_pattern(factor.hair_seed);

        let (yaw, pitch, roll) = (factor.pose[0], factor.pose[1], factor.pose[2]);
        let dx = POSE_SHIFT * yaw.sin();
        let dy = POSE_SHIFT * pitch.sin();
        let (sin_r, cos_r) = roll.sin_cos();

        let m1 = self.exp_control(&factor.expression, 0); // mouth curvature
        let m2 = self.exp_control(&factor.expression, 1); // mouth height
        let m3 = self.exp_control(&factor.expression, 2); // eye squint
        let eye_sigma_y = 0.045 * (1.0 + 0.5 * m3.clamp(-1.0, 1.0));

        let mut pixels = Array4::<f64>::zeros((1, 3, resolution, resolution));
        let mut mask = Array4::<f64>::zeros((1, 1, resolution, resolution));
        let step = 2.0 / resolution as f64;
        for i in 0..resolution {
            let y = -1.0 + (i as f64 + 0.5) * step;
            for j in 0..resolution {
                let x = -1.0 + (j as f64 + 0.5) * step;
                // translation-only face frame (identity pattern anchor)
                let xt = x - dx;
                let yt = y - dy;
                // rotated face frame (ellipse, marker, mouth, eyes)
                let xr = cos_r * xt + sin_r * yt;
                let yr = -sin_r * xt + cos_r * yt;
                let r2 = (xr / FACE_AX).powi(2) + (yr / FACE_AY).powi(2);
                let inside = r2 <= 1.0;
                let mut col = [0.0f64; 3];
                if inside {
                    mask[[0, 0, i, j]] = 1.0;
                    for (c, out) in col.iter_mut().enumerate() {
                        let mut v = idp.skin[c];
                        for k in 0..BLOB_COUNT {
                            let (px, py) = idp.blob_pos[k];
                            let s2 = 2.0 * idp.blob_sigma[k] * idp.blob_sigma[k];
                            let d2 = (xt - px).powi(2) + (yt - py).powi(2);
                            if d2 < 9.0 * s2 {
                                v += idp.blob_amp[k][c] * (-d2 / s2).exp();
                            }
                        }
                        *out = v;
                    }
                    // pose marker bar, tilted by roll
                    let bar = 0.55 * (-(yr / 0.045).powi(2) - (xr / 0.15).powi(4)).exp();
                    // eye spots
                    let eye_l = (-((xr + 0.20) / 0.055).powi(2)
                        - ((yr + 0.22) / eye_sigma_y).powi(2))
                    .exp();
                    let eye_r = (-((xr - 0.20) / 0.055).powi(2)
                        - ((yr + 0.22) / eye_sigma_y).powi(2))
                    .exp();
                    // mouth arc bent by expression
                    let mouth_y = 0.28 + 0.035 * m2 + 0.24 * m1 * (xr / 0.22).powi(2);
                    let mouth =
                        (-((yr - mouth_y) / 0.035).powi(2) - (xr / 0.20).powi(4)).exp();
                    for v in col.iter_mut() {
                        *v += bar - 0.45 * (eye_l + eye_r) - 0.5 * mouth;
                    }
                } else if y < HAIR_LINE {
                    for (c, out) in col.iter_mut().enumerate() {
                        *out = hair.base[c]
                            + hair.stripe_amp[c]
                                * (hair.stripe_freq * std::f64::consts::PI * x
                                    + hair.stripe_phase)
                                    .sin();
                    }
                } else {
                    for (c, out) in col.iter_mut().enumerate() {
                        *out = bg.base[c]
                            + bg.grad_x[c] * x
                            + bg.grad_y[c] * y
                            + bg.wave_amp[c]
                                * (std::f64::consts::TAU
                                    * (bg.wave_fx * x + bg.wave_fy * y)
                                    + bg.wave_phase)
                                    .sin();
                    }
                }
                for (c, v) in col.iter().enumerate() {
                    pixels[[0, c, i, j]] = v.clamp(-0.95, 0.95);
                }
            }
        }
        Ok(ImageBatch {
            pixels,
            factors: Some(vec![factor.clone()]),
            face_masks: Some(mask),
        })
    }

    /// Draws one factor vector from the configured ranges.
    pub fn sample_factor(&self, rng: &mut ChaCha8Rng) -> FactorVector {
        FactorVector {
            identity_id: rng.random_range(0..self.cfg.num_identities as u32),
            pose: std::array::from_fn(|_| uniform(rng, -POSE_MAX, POSE_MAX)),
            expression: (0..self.cfg.exp_dim).map(|_| uniform(rng, -1.0, 1.0)).collect(),
            background_seed: rng.random::<u64>(),
            hair_seed: rng.random::<u64>(),
        }
    }

    /// Renders a batch of independent samples.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<ImageBatch> {
        let singles: Vec<ImageBatch> = (0..batch_size)
            .map(|_| {
                let f = self.sample_factor(rng);
                self.render_face(&f, self.cfg.resolution)
            })
            .collect::<Result<_>>()?;
        Ok(ImageBatch::stack(&singles))
    }

    /// Samples a source/target pair batch; each pair is independently a
    /// self-swap with probability `p_self` (source copied from the target).
    pub fn sample_training_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        p_self: f64,
    ) -> Result<SwapPair> {
        if !(0.0..=1.0).contains(&p_self) {
            return Err(Error::config(format!("p_self must be in [0, 1], got {p_self}")));
        }
        let mut sources = Vec::with_capacity(batch_size);
        let mut targets = Vec::with_capacity(batch_size);
        let mut is_self = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let tf = self.sample_factor(rng);
            let target = self.render_face(&tf, self.cfg.resolution)?;
            let self_swap = rng.random::<f64>() < p_self;
            let source = if self_swap {
                target.clone()
            } else {
                let sf = self.sample_factor(rng);
                self.render_face(&sf, self.cfg.resolution)?
            };
            sources.push(source);
            targets.push(target);
            is_self.push(self_swap);
        }
        Ok(SwapPair {
            source: ImageBatch::stack(&sources),
            target: ImageBatch::stack(&targets),
            is_self_swap: is_self,
        })
    }

    /// Evaluation split: `num_sources` images with pairwise-distinct
    /// identities, seeded independently of the training stream.
    pub fn make_eval_split(
        &self,
        num_sources: usize,
        resolution: usize,
        seed: u64,
    ) -> Result<Vec<ImageBatch>> {
        if num_sources < 3 {
            return Err(Error::config(format!(
                "eval split needs at least 3 sources (got {num_sources}): identity \
                 consistency requires two swaps per source"
            )));
        }
        if num_sources > self.cfg.num_identities {
            return Err(Error::config(format!(
                "eval split of {num_sources} exceeds num_identities {}",
                self.cfg.num_identities
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.pattern_seed, 0xea1, seed));
        (0..num_sources)
            .map(|i| {
                let mut f = self.sample_factor(&mut rng);
                f.identity_id = i as u32;
                self.render_face(&f, resolution)
            })
            .collect()
    }
}

/// Exports a batch as PNGs plus a JSONL sidecar (one record per image with
/// its factors and mask path).
pub fn export_images(batch: &ImageBatch, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sidecar_path = dir.join(format!("{prefix}_metadata.jsonl"));
    let mut sidecar =
        std::fs::File::create(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    for i in 0..batch.len() {
        let img_name = format!("{prefix}_{i:04}.png");
        imgio::save_image(
            batch.pixels.slice(ndarray::s![i, .., .., ..]),
            &dir.join(&img_name),
        )?;
        let mask_name = batch
            .face_masks
            .as_ref()
            .map(|m| -> Result<String> {
                let name = format!("{prefix}_{i:04}_mask.png");
                imgio::save_mask(m.slice(ndarray::s![i, .., .., ..]), &dir.join(&name))?;
                Ok(name)
            })
            .transpose()?;
        let record = serde_json::json!({
            "image": img_name,
            "mask": mask_name,
            "factors": batch.factors.as_ref().map(|f| &f[i]),
        });
        writeln!(sidecar, "{record}").map_err(|e| Error::io(&sidecar_path, e))?;
    }
    Ok(())
}

/// Peak signal-to-noise ratio between two [-1, 1] images (peak = 2).
pub fn psnr(a: &ArrayView1<'_, f64>, b: &ArrayView1<'_, f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 1e-300 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset() -> SynthDataset {
        SynthDataset::new(DatasetConfig::default()).unwrap()
    }

    fn factor(ds: &SynthDataset, seed: u64) -> FactorVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ds.sample_factor(&mut rng)
    }

    #[test]
    fn rendering_is_deterministic() {
        let ds = dataset();
        let f = factor(&ds, 3);
        let a = ds.render_face(&f, 64).unwrap();
        let b = ds.render_face(&f, 64).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.face_masks, b.face_masks);
    }

    #[test]
    fn background_change_leaves_face_pixels() {
        let ds = dataset();
        let f1 = factor(&ds, 5);
        let mut f2 = f1.clone();
        f2.background_seed ^= 0xdead;
        let a = ds.render_face(&f1, 64).unwrap();
        let b = ds.render_face(&f2, 64).unwrap();
        let mask = a.face_masks.as_ref().unwrap();
        assert_eq!(mask, b.face_masks.as_ref().unwrap());
        let mut changed_outside = false;
        for i in 0..64 {
            for j in 0..64 {
                for c in 0..3 {
                    let (pa, pb) = (a.pixels[[0, c, i, j]], b.pixels[[0, c, i, j]]);
                    if mask[[0, 0, i, j]] > 0.5 {
                        assert_eq!(pa, pb, "face pixel changed at ({i},{j})");
                    } else if pa != pb {
                        changed_outside = true;
                    }
                }
            }
        }
        assert!(changed_outside, "background seed had no effect");
    }

    #[test]
    fn identity_change_is_contained_in_mask() {
        let ds = dataset();
        let f1 = factor(&ds, 7);
        let mut f2 = f1.clone();
        f2.identity_id = (f1.identity_id + 1) % ds.config().num_identities as u32;
        let a = ds.render_face(&f1, 64).unwrap();
        let b = ds.render_face(&f2, 64).unwrap();
        let mask = a.face_masks.as_ref().unwrap();
        let mut changed_inside = false;
        for i in 0..64 {
            for j in 0..64 {
                for c in 0..3 {
                    let (pa, pb) = (a.pixels[[0, c, i, j]], b.pixels[[0, c, i, j]]);
                    if mask[[0, 0, i, j]] < 0.5 {
                        assert_eq!(pa, pb, "non-face pixel changed at ({i},{j})");
                    } else if pa != pb {
                        changed_inside = true;
                    }
                }
            }
        }
        assert!(changed_inside, "identity change had no effect");
    }

    #[test]
    fn factor_locality_over_random_pairs() {
        // facial factors only touch the union of the two masks; non-facial
        // seeds only touch pixels outside the mask
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let f1 = ds.sample_factor(&mut rng);
            let mut f2 = f1.clone();
            match trial % 3 {
                0 => f2.identity_id = (f1.identity_id + 1) % ds.config().num_identities as u32,
                1 => {
                    f2.pose = std::array::from_fn(|_| {
                        (rng.random::<f64>() * 2.0 - 1.0) * POSE_MAX
                    })
                }
                _ => {
                    f2.expression = (0..ds.config().exp_dim)
                        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                        .collect()
                }
            }
            let a = ds.render_face(&f1, 32).unwrap();
            let b = ds.render_face(&f2, 32).unwrap();
            let (ma, mb) = (a.face_masks.unwrap(), b.face_masks.unwrap());
            for i in 0..32 {
                for j in 0..32 {
                    if ma[[0, 0, i, j]] < 0.5 && mb[[0, 0, i, j]] < 0.5 {
                        for c in 0..3 {
                            assert_eq!(
                                a.pixels[[0, c, i, j]],
                                b.pixels[[0, c, i, j]],
                                "trial {trial}: pixel ({i},{j}) outside both masks changed"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_range_and_mask_values() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = ds.sample_batch(&mut rng, 6).unwrap();
        assert!(batch.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        let masks = batch.face_masks.unwrap();
        assert!(masks.iter().all(|&v| v == 0.0 || v == 1.0));
        // the face must actually exist
        assert!(masks.sum() > 0.0);
    }

    #[test]
    fn hair_band_never_touches_face() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let f = ds.sample_factor(&mut rng);
            let img = ds.render_face(&f, 64).unwrap();
            let mask = img.face_masks.unwrap();
            let hair_rows = ((HAIR_LINE + 1.0) / 2.0 * 64.0).floor() as usize;
            for i in 0..hair_rows {
                for j in 0..64 {
                    assert_eq!(mask[[0, 0, i, j]], 0.0, "face reached hair band row {i}");
                }
            }
        }
    }

    #[test]
    fn self_swap_probability_extremes() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let all = ds.sample_training_batch(&mut rng, 8, 1.0).unwrap();
        assert!(all.is_self_swap.iter().all(|&s| s));
        assert_eq!(all.source.pixels, all.target.pixels);
        let none = ds.sample_training_batch(&mut rng, 8, 0.0).unwrap();
        assert!(none.is_self_swap.iter().all(|&s| !s));
    }

    #[test]
    fn self_swap_fraction_concentrates() {
        // count self-swap draws without rendering (same Bernoulli stream
        // logic, measured over 10k pairs through the public sampler on a
        // small resolution)
        let mut cfg = DatasetConfig::default();
        cfg.resolution = 16;
        let ds = SynthDataset::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut selfs = 0usize;
        let total = 10_000usize;
        let mut done = 0usize;
        while done < total {
            let chunk = 500.min(total - done);
            let pair = ds.sample_training_batch(&mut rng, chunk, 0.5).unwrap();
            selfs += pair.is_self_swap.iter().filter(|&&s| s).count();
            done += chunk;
        }
        let frac = selfs as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.02, "self-swap fraction {frac}");
    }

    #[test]
    fn eval_split_identities_distinct() {
        let ds = dataset();
        let split = ds.make_eval_split(3, 64, 1).unwrap();
        assert_eq!(split.len(), 3);
        let ids: Vec<u32> = split
            .iter()
            .map(|b| b.factors.as_ref().unwrap()[0].identity_id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(ds.make_eval_split(2, 64, 1).is_err());

        let mut cfg = DatasetConfig::default();
        cfg.num_identities = 128;
        let ds = SynthDataset::new(cfg).unwrap();
        let split = ds.make_eval_split(100, 32, 1).unwrap();
        let mut ids: Vec<u32> = split
            .iter()
            .map(|b| b.factors.as_ref().unwrap()[0].identity_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn psnr_basics() {
        let a = ndarray::arr1(&[0.0, 0.5, -0.5]);
        let b = ndarray::arr1(&[0.0, 0.5, -0.5]);
        assert!(psnr(&a.view(), &b.view()).is_infinite());
        let c = ndarray::arr1(&[1.0, 0.5, -0.5]);
        let p = psnr(&a.view(), &c.view());
        // mse = 1/3, psnr = 10 log10(4 / (1/3))
        assert!((p - 10.0 * (12.0f64).log10()).abs() < 1e-12);
    }
}

//! Vision frontend: raw frames to visual token streams.
//!
//! A frame of shape `(channels, h, w)` is cut into `ps x ps` patches, each
//! patch is linearly embedded, and every 2x2 patch neighborhood is merged by
//! a second linear map, so a frame yields `h*w / (4*ps^2)` tokens. Both maps
//! are bias-free: the whole frontend is exactly linear in the pixels, and
//! positional information is added later by [`PreAttention`].
//!
//! Tokens across frames are kept frame-major (`flat = frame * P + patch`).
//! The spatial mask allows attention only within a frame, the temporal mask
//! only across frames at the same patch index; both are Kronecker deltas
//! over the (frame, patch) grid and their conjunction is the identity.

use std::cell::RefCell;
use std::collections::HashMap;

use rand_chacha::ChaCha12Rng;

use crate::error::{config_err, data_err, shape_err, Result};
use crate::nn::{Embedding, Linear, Mha, NamedParams};
use crate::tensor::{ops, Element, Mask, Tensor};

/// Uniform frame sampling: `idx_k = floor((k + 0.5) * total / count)`.
/// Short clips repeat frames; an empty clip is a data error.
pub fn sample_frames(total: usize, count: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(data_err("cannot sample frames from an empty clip"));
    }
    if count == 0 {
        return Err(config_err("frame count must be positive"));
    }
    Ok((0..count)
        .map(|k| (k as f64 + 0.5) * total as f64 / count as f64)
        .map(|v| (v.floor() as usize).min(total - 1))
        .collect())
}

/// Token streams for one visual, frame-major rows.
pub struct VisualTokens<T: Element> {
    pub frames: usize,
    pub patches: usize, // per frame
    pub tokens: Tensor<T>, // (frames * patches, dim)
}

pub struct PatchEmbedder<T: Element> {
    patch_proj: Linear<T>, // (channels * ps^2) -> dim
    block_proj: Linear<T>, // 4 * dim -> dim
    pub channels: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub dim: usize,
}

impl<T: Element> PatchEmbedder<T> {
    pub fn new(
        rng: &mut ChaCha12Rng,
        channels: usize,
        image_size: usize,
        patch_size: usize,
        dim: usize,
    ) -> Result<PatchEmbedder<T>> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(config_err(format!(
                "image size {image_size} is not a multiple of patch size {patch_size}"
            )));
        }
        let grid = image_size / patch_size;
        if grid % 2 != 0 {
            return Err(config_err(format!(
                "patch grid {grid}x{grid} cannot be merged 2x2; pick sizes with an even grid"
            )));
        }
        Ok(PatchEmbedder {
            patch_proj: Linear::new(rng, channels * patch_size * patch_size, dim, false),
            block_proj: Linear::new(rng, 4 * dim, dim, false),
            channels,
            patch_size,
            image_size,
            dim,
        })
    }

    /// Tokens per frame this embedder produces.
    pub fn tokens_per_frame(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        (grid * grid) / 4
    }

    /// One frame `(channels, h, w)` flattened row-major -> `(P, dim)`.
    pub fn embed_frame(&self, frame: &[T]) -> Result<Tensor<T>> {
        let (c, s, ps) = (self.channels, self.image_size, self.patch_size);
        if frame.len() != c * s * s {
            return Err(shape_err(format!(
                "frame holds {} values, expected {}x{}x{}",
                frame.len(),
                c,
                s,
                s
            )));
        }
        let grid = s / ps;
        let mut patches = Vec::with_capacity(grid * grid * c * ps * ps);
        for pr in 0..grid {
            for pc in 0..grid {
                for ch in 0..c {
                    for i in 0..ps {
                        let row = pr * ps + i;
                        let off = ch * s * s + row * s + pc * ps;
                        patches.extend_from_slice(&frame[off..off + ps]);
                    }
                }
            }
        }
        let pmat = Tensor::from_vec(&[grid * grid, c * ps * ps], patches)?;
        let embedded = self.patch_proj.forward(&pmat)?; // (grid^2, dim)
        // Merge 2x2 neighborhoods, row-major over blocks, each block's
        // four patches concatenated row-major as well.
        let half = grid / 2;
        let mut order = Vec::with_capacity(grid * grid);
        for br in 0..half {
            for bc in 0..half {
                order.push((2 * br) * grid + 2 * bc);
                order.push((2 * br) * grid + 2 * bc + 1);
                order.push((2 * br + 1) * grid + 2 * bc);
                order.push((2 * br + 1) * grid + 2 * bc + 1);
            }
        }
        let gathered = ops::gather_rows(&embedded, &order)?;
        let blocks = ops::reshape(&gathered, &[half * half, 4 * self.dim])?;
        self.block_proj.forward(&blocks)
    }

    /// A clip of already-sampled frames -> frame-major token matrix.
    pub fn embed_frames(&self, frames: &[Vec<T>]) -> Result<VisualTokens<T>> {
        if frames.is_empty() {
            return Err(data_err("no frames to embed"));
        }
        let per: Result<Vec<Tensor<T>>> = frames.iter().map(|f| self.embed_frame(f)).collect();
        let tokens = ops::concat_rows(&per?)?;
        Ok(VisualTokens {
            frames: frames.len(),
            patches: self.tokens_per_frame(),
            tokens,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.patch_proj.params(&format!("{prefix}.patch"), out);
        self.block_proj.params(&format!("{prefix}.block"), out);
    }
}

/// Same-frame attention: token `(f, p)` may attend to `(f', p')` iff
/// `f == f'`.
pub fn spatial_mask(frames: usize, patches: usize) -> Mask {
    let n = frames * patches;
    Mask::from_fn(n, n, move |a, b| a / patches == b / patches)
}

/// Same-patch attention across frames: allowed iff `p == p'`.
pub fn temporal_mask(frames: usize, patches: usize) -> Mask {
    let n = frames * patches;
    Mask::from_fn(n, n, move |a, b| a % patches == b % patches)
}

/// Adds learned patch and frame positions, then runs the two masked
/// self-attention passes that split a clip into a spatial stream and a
/// temporal stream (each with a residual). The sequential variant chains
/// the two passes into a single combined stream instead.
pub struct PreAttention<T: Element> {
    patch_pos: Embedding<T>,
    frame_pos: Embedding<T>,
    sa_spatial: Mha<T>,
    sa_temporal: Mha<T>,
    masks: RefCell<HashMap<(usize, usize), (Mask, Mask)>>,
    max_frames: usize,
}

impl<T: Element> PreAttention<T> {
    pub fn new(
        rng: &mut ChaCha12Rng,
        dim: usize,
        heads: usize,
        max_frames: usize,
        patches: usize,
    ) -> Result<PreAttention<T>> {
        Ok(PreAttention {
            patch_pos: Embedding::new(rng, patches, dim),
            frame_pos: Embedding::new(rng, max_frames, dim),
            sa_spatial: Mha::new(rng, dim, heads)?,
            sa_temporal: Mha::new(rng, dim, heads)?,
            masks: RefCell::new(HashMap::new()),
            max_frames,
        })
    }

    fn masks_for(&self, frames: usize, patches: usize) -> (Mask, Mask) {
        let mut cache = self.masks.borrow_mut();
        cache
            .entry((frames, patches))
            .or_insert_with(|| (spatial_mask(frames, patches), temporal_mask(frames, patches)))
            .clone()
    }

    fn positioned(&self, v: &VisualTokens<T>) -> Result<Tensor<T>> {
        if v.frames > self.max_frames {
            return Err(shape_err(format!(
                "clip has {} frames, frontend supports {}",
                v.frames, self.max_frames
            )));
        }
        let mut pos_ids_patch = Vec::with_capacity(v.frames * v.patches);
        let mut pos_ids_frame = Vec::with_capacity(v.frames * v.patches);
        for f in 0..v.frames {
            for p in 0..v.patches {
                pos_ids_patch.push(p as u32);
                pos_ids_frame.push(f as u32);
            }
        }
        let pp = self.patch_pos.forward(&pos_ids_patch)?;
        let fp = self.frame_pos.forward(&pos_ids_frame)?;
        ops::add(&ops::add(&v.tokens, &pp)?, &fp)
    }

    /// Separate spatial / temporal streams.
    pub fn forward(&self, v: &VisualTokens<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = self.positioned(v)?;
        let (m_spa, m_tmp) = self.masks_for(v.frames, v.patches);
        let spa = ops::add(&x, &self.sa_spatial.forward(&x, Some(&m_spa))?)?;
        let tmp = ops::add(&x, &self.sa_temporal.forward(&x, Some(&m_tmp))?)?;
        Ok((spa, tmp))
    }

    /// Ablation: spatial then temporal attention on one stream.
    pub fn forward_sequential(&self, v: &VisualTokens<T>) -> Result<Tensor<T>> {
        let x = self.positioned(v)?;
        let (m_spa, m_tmp) = self.masks_for(v.frames, v.patches);
        let s = ops::add(&x, &self.sa_spatial.forward(&x, Some(&m_spa))?)?;
        ops::add(&s, &self.sa_temporal.forward(&s, Some(&m_tmp))?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.patch_pos.params(&format!("{prefix}.patch_pos"), out);
        self.frame_pos.params(&format!("{prefix}.frame_pos"), out);
        self.sa_spatial.params(&format!("{prefix}.sa_spatial"), out);
        self.sa_temporal.params(&format!("{prefix}.sa_temporal"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn frame_sampling_is_uniform_midpoint() {
        assert_eq!(sample_frames(12, 4).unwrap(), vec![1, 4, 7, 10]);
        assert_eq!(sample_frames(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(sample_frames(2, 4).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(sample_frames(1, 3).unwrap(), vec![0, 0, 0]);
        assert!(sample_frames(0, 4).is_err());
    }

    #[test]
    fn token_count_is_quarter_of_vit_patches() {
        let mut rng = seeded(5);
        let pe: PatchEmbedder<f32> = PatchEmbedder::new(&mut rng, 3, 56, 14, 32).unwrap();
        assert_eq!(pe.tokens_per_frame(), 4); // (56*56/14^2)/4
        let pe224: PatchEmbedder<f32> = PatchEmbedder::new(&mut rng, 3, 224, 14, 32).unwrap();
        assert_eq!(pe224.tokens_per_frame(), 64);
        // 14 -> grid 1 (odd), 20 -> not a multiple
        assert!(PatchEmbedder::<f32>::new(&mut rng, 3, 14, 14, 32).is_err());
        assert!(PatchEmbedder::<f32>::new(&mut rng, 3, 20, 14, 32).is_err());
    }

    #[test]
    fn embedding_is_exactly_linear_in_pixels() {
        let mut rng = seeded(6);
        let pe: PatchEmbedder<f32> = PatchEmbedder::new(&mut rng, 3, 56, 14, 16).unwrap();
        let frame: Vec<f32> = (0..3 * 56 * 56).map(|i| ((i % 17) as f32) * 0.05).collect();
        let doubled: Vec<f32> = frame.iter().map(|v| v * 2.0).collect();
        let a = pe.embed_frame(&frame).unwrap().to_vec();
        let b = pe.embed_frame(&doubled).unwrap().to_vec();
        // scaling by a power of two is exact in floating point
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*y, *x * 2.0);
        }
    }

    #[test]
    fn masks_are_kronecker_deltas_and_conjoin_to_identity() {
        for (f, p) in [(2, 3), (4, 4), (1, 5), (3, 1)] {
            let ms = spatial_mask(f, p);
            let mt = temporal_mask(f, p);
            assert!(ms.is_symmetric() && mt.is_symmetric());
            let n = f * p;
            for a in 0..n {
                for b in 0..n {
                    assert_eq!(ms.get(a, b), a / p == b / p);
                    assert_eq!(mt.get(a, b), a % p == b % p);
                }
            }
            let id = Mask::from_fn(n, n, |a, b| a == b);
            assert_eq!(ms.and(&mt).unwrap(), id);
        }
    }

    fn toy_tokens(f: usize, p: usize, d: usize, bump: Option<(usize, f64)>) -> VisualTokens<f64> {
        let mut data: Vec<f64> = (0..f * p * d).map(|i| ((i * 31 % 97) as f64) * 0.01).collect();
        if let Some((flat, dv)) = bump {
            data[flat] += dv;
        }
        VisualTokens {
            frames: f,
            patches: p,
            tokens: Tensor::from_vec(&[f * p, d], data).unwrap(),
        }
    }

    #[test]
    fn spatial_stream_is_local_to_frames_temporal_to_patch_index() {
        let (f, p, d) = (3, 2, 8);
        let mut rng = seeded(7);
        let pre: PreAttention<f64> = PreAttention::new(&mut rng, d, 2, f, p).unwrap();
        let base = toy_tokens(f, p, d, None);
        let (spa0, tmp0) = pre.forward(&base).unwrap();
        // Perturb token (frame 1, patch 0) = flat 2.
        let pert = toy_tokens(f, p, d, Some((2 * d + 3, 0.5)));
        let (spa1, tmp1) = pre.forward(&pert).unwrap();
        let (s0, s1) = (spa0.to_vec(), spa1.to_vec());
        let (t0, t1) = (tmp0.to_vec(), tmp1.to_vec());
        for tok in 0..f * p {
            let same_frame = tok / p == 1;
            let same_patch = tok % p == 0;
            let spa_changed = s0[tok * d..(tok + 1) * d] != s1[tok * d..(tok + 1) * d];
            let tmp_changed = t0[tok * d..(tok + 1) * d] != t1[tok * d..(tok + 1) * d];
            assert_eq!(spa_changed, same_frame, "spatial locality at token {tok}");
            assert_eq!(tmp_changed, same_patch, "temporal locality at token {tok}");
        }
    }

    #[test]
    fn mask_cache_returns_the_same_masks() {
        let mut rng = seeded(8);
        let pre: PreAttention<f32> = PreAttention::new(&mut rng, 8, 2, 4, 3).unwrap();
        let a = pre.masks_for(2, 3);
        let b = pre.masks_for(2, 3);
        assert_eq!(a, b);
        assert_eq!(pre.masks.borrow().len(), 1);
    }
}

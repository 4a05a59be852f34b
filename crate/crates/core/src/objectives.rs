//! Stage-1 losses: spatial-temporal contrastive and matching, vision-text
//! contrastive and matching, and masked language modeling, plus the
//! projection heads and learnable temperatures they use.
//!
//! Both contrastive losses share one shape: project each side into a low
//! dimensional unit sphere, score a pair of samples by the *maximum* dot
//! product over their token pairs, scale by 1/tau, and take the symmetric
//! cross-entropy of the row- and column-softmaxes against the diagonal.
//! The matching losses are two-class heads on the classification token of
//! matched and deliberately mismatched forwards. The temperature is stored
//! as log(tau) so positivity is structural.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{config_err, data_err, shape_err, Result};
use crate::nn::{Linear, NamedParams};
use crate::tensor::{ops, Element, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Linear map to a lower dimension followed by L2 normalization.
pub struct ProjectionHead<T: Element> {
    pub lin: Linear<T>,
}

impl<T: Element> ProjectionHead<T> {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, proj_dim: usize) -> ProjectionHead<T> {
        ProjectionHead {
            lin: Linear::new(rng, dim, proj_dim, true),
        }
    }

    /// `(n, D) -> (n, proj)` with unit rows.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::l2_normalize_rows(&self.lin.forward(x)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.lin.params(prefix, out);
    }
}

/// Learnable temperature kept positive by storing log(tau).
pub struct Temperature<T: Element> {
    pub log_tau: Tensor<T>,
}

impl<T: Element> Temperature<T> {
    pub fn new(init_tau: f64) -> Temperature<T> {
        assert!(init_tau > 0.0, "temperature init must be positive");
        Temperature {
            log_tau: Tensor::param(&[1], vec![T::of(init_tau.ln())]).expect("scalar param"),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.item().as_f64().exp()
    }

    /// `1/tau` as a differentiable scalar tensor.
    pub fn inv_tau(&self) -> Tensor<T> {
        ops::exp(&ops::neg(&self.log_tau))
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.log_tau"), self.log_tau.clone()));
    }
}

/// All stage-1 heads in one place so the model can register them together.
pub struct ObjectiveHeads<T: Element> {
    pub theta_spa: ProjectionHead<T>,
    pub theta_tmp: ProjectionHead<T>,
    pub theta_vis: ProjectionHead<T>,
    pub theta_txt: ProjectionHead<T>,
    pub tau_stc: Temperature<T>,
    pub tau_vtc: Temperature<T>,
    pub stm_head: Linear<T>, // D -> 2
    pub vtm_head: Linear<T>, // D -> 2
    pub mlm_head: Linear<T>, // D -> vocab
}

impl<T: Element> ObjectiveHeads<T> {
    pub fn new(
        rng: &mut ChaCha12Rng,
        dim: usize,
        proj_dim: usize,
        vocab: usize,
    ) -> ObjectiveHeads<T> {
        ObjectiveHeads {
            theta_spa: ProjectionHead::new(rng, dim, proj_dim),
            theta_tmp: ProjectionHead::new(rng, dim, proj_dim),
            theta_vis: ProjectionHead::new(rng, dim, proj_dim),
            theta_txt: ProjectionHead::new(rng, dim, proj_dim),
            tau_stc: Temperature::new(DEFAULT_TAU),
            tau_vtc: Temperature::new(DEFAULT_TAU),
            stm_head: Linear::new(rng, dim, 2, true),
            vtm_head: Linear::new(rng, dim, 2, true),
            mlm_head: Linear::new(rng, dim, vocab, true),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.theta_spa.params(&format!("{prefix}.theta_spa"), out);
        self.theta_tmp.params(&format!("{prefix}.theta_tmp"), out);
        self.theta_vis.params(&format!("{prefix}.theta_vis"), out);
        self.theta_txt.params(&format!("{prefix}.theta_txt"), out);
        self.tau_stc.params(&format!("{prefix}.tau_stc"), out);
        self.tau_vtc.params(&format!("{prefix}.tau_vtc"), out);
        self.stm_head.params(&format!("{prefix}.stm_head"), out);
        self.vtm_head.params(&format!("{prefix}.vtm_head"), out);
        self.mlm_head.params(&format!("{prefix}.mlm_head"), out);
    }
}

/// Similarity of two projected token sets: the maximum dot product over all
/// token pairs. Inputs must be row-normalized, so the result lies in
/// [-1, 1] up to rounding.
pub fn pairwise_similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, _) = a.dims2()?;
    let (nb, _) = b.dims2()?;
    if na == 0 || nb == 0 {
        return Err(shape_err("pairwise similarity of an empty token set"));
    }
    Ok(ops::max_all(&ops::matmul(a, &ops::transpose(b)?)?))
}

fn eye<T: Element>(k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); k * k];
    for i in 0..k {
        data[i * k + i] = T::one();
    }
    Tensor::from_vec(&[k, k], data).expect("square eye")
}

/// Shared body of the two contrastive losses: symmetric cross-entropy of
/// the temperature-scaled max-pair similarity matrix against the diagonal.
pub fn contrastive_loss<T: Element>(
    head_a: &ProjectionHead<T>,
    head_b: &ProjectionHead<T>,
    temp: &Temperature<T>,
    feats_a: &[Tensor<T>],
    feats_b: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let k = feats_a.len();
    if k != feats_b.len() {
        return Err(shape_err(format!(
            "contrastive sides differ: {k} vs {}",
            feats_b.len()
        )));
    }
    if k < 2 {
        return Err(data_err(
            "contrastive loss needs a batch of at least 2 (negatives come from the batch)",
        ));
    }
    let pa: Result<Vec<Tensor<T>>> = feats_a.iter().map(|f| head_a.forward(f)).collect();
    let pb: Result<Vec<Tensor<T>>> = feats_b.iter().map(|f| head_b.forward(f)).collect();
    let (pa, pb) = (pa?, pb?);
    let mut cells = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            cells.push(pairwise_similarity(&pa[i], &pb[j])?);
        }
    }
    let sims = ops::from_cells(k, k, &cells)?;
    let logits = ops::scale_by(&sims, &temp.inv_tau())?;
    let targets = eye::<T>(k);
    let a2b = ops::cross_entropy_with_logits(&logits, &targets)?;
    let b2a = ops::cross_entropy_with_logits(&ops::transpose(&logits)?, &targets)?;
    Ok(ops::scale(&ops::add(&a2b, &b2a)?, 0.5))
}

/// Mismatch partner for each batch index: uniform over `j != i`.
/// A batch of one cannot be mismatched.
pub fn sample_mismatch_indices(k: usize, rng: &mut ChaCha12Rng) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(data_err("matching loss needs a batch of at least 2"));
    }
    Ok((0..k)
        .map(|i| {
            let j = rng.random_range(0..k - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Two-class cross-entropy on classification-token states: matched
/// forwards are class 1, mismatched are class 0.
pub fn matching_loss<T: Element>(
    head: &Linear<T>,
    matched_cls: &[Tensor<T>],
    mismatched_cls: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if matched_cls.is_empty() || mismatched_cls.is_empty() {
        return Err(data_err("matching loss needs both matched and mismatched states"));
    }
    let mut rows = Vec::with_capacity(matched_cls.len() + mismatched_cls.len());
    let mut targets = Vec::new();
    for cls in matched_cls {
        rows.push(cls.clone());
        targets.extend_from_slice(&[T::zero(), T::one()]);
    }
    for cls in mismatched_cls {
        rows.push(cls.clone());
        targets.extend_from_slice(&[T::one(), T::zero()]);
    }
    let states = ops::concat_rows(&rows)?;
    let logits = head.forward(&states)?;
    let t = Tensor::from_vec(&[rows.len(), 2], targets)?;
    ops::cross_entropy_with_logits(&logits, &t)
}

/// A caption after masking: ids with replacements applied, the chosen
/// positions, and the original tokens at those positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedCaption {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// 15%-rate masking with the 80/10/10 mask/random/keep convention.
/// `word_range` bounds the random replacements (real words only). If the
/// draw selects nothing, one position is forced so the loss is defined.
pub fn mask_caption(
    ids: &[u32],
    mask_rate: f64,
    mask_id: u32,
    word_range: std::ops::Range<u32>,
    rng: &mut ChaCha12Rng,
) -> Result<MaskedCaption> {
    if ids.is_empty() {
        return Err(data_err("cannot mask an empty caption"));
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(config_err(format!("mask rate {mask_rate} outside [0, 1]")));
    }
    let mut out = ids.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &tok) in ids.iter().enumerate() {
        if rng.random_range(0.0..1.0) < mask_rate {
            positions.push(i);
            targets.push(tok);
        }
    }
    if positions.is_empty() {
        let i = rng.random_range(0..ids.len());
        positions.push(i);
        targets.push(ids[i]);
    }
    for &i in &positions {
        let roll: f64 = rng.random_range(0.0..1.0);
        if roll < 0.8 {
            out[i] = mask_id;
        } else if roll < 0.9 {
            out[i] = rng.random_range(word_range.clone());
        } // else keep
    }
    Ok(MaskedCaption {
        ids: out,
        positions,
        targets,
    })
}

/// Vocabulary cross-entropy at the masked positions of an encoded caption
/// stream. Only masked rows pass through the head, so unmasked positions
/// contribute nothing to it.
pub fn mlm_term<T: Element>(
    head: &Linear<T>,
    cap_states: &Tensor<T>,
    masked: &MaskedCaption,
) -> Result<Tensor<T>> {
    let (n, _) = cap_states.dims2()?;
    if masked.positions.iter().any(|&p| p >= n) {
        return Err(shape_err(format!(
            "masked position beyond caption stream of {n}"
        )));
    }
    let rows = ops::gather_rows(cap_states, &masked.positions)?;
    let logits = head.forward(&rows)?;
    let vocab = head.out_dim();
    let mut targets = vec![T::zero(); masked.positions.len() * vocab];
    for (r, &tok) in masked.targets.iter().enumerate() {
        if tok as usize >= vocab {
            return Err(data_err(format!("target token {tok} outside vocabulary")));
        }
        targets[r * vocab + tok as usize] = T::one();
    }
    let t = Tensor::from_vec(&[masked.positions.len(), vocab], targets)?;
    ops::cross_entropy_with_logits(&logits, &t)
}

//! Full model assembly: visual frontend, text embeddings, expert stack,
//! stage-1 loss heads, coupling layer, and the answer generator, plus the
//! stage-dependent parameter registry and stream availability.
//!
//! Stream availability per (stage, modality):
//!   stage 1  video {spa, tmp, cap}   image {spa, cap}
//!   stage 2  video {spa, tmp, cap, ctx}   image: not trained
//!   stage 3  video {spa, tmp, cap, ctx}   image {spa, cap, ctx}

use rand_chacha::ChaCha12Rng;

use crate::data::{Batch, FrameSet, RESERVED};
use crate::error::{config_err, data_err, Result};
use crate::experts::{ExpertStack, ModalityBundle, StackConfig, StackOutput, StreamId};
use crate::generator::{gen_loss, greedy_decode, teacher_forced_accuracy, CouplingLayer, LmConfig, ToyLm};
use crate::nn::{Embedding, NamedParams};
use crate::objectives::{
    contrastive_loss, mask_caption, matching_loss, mlm_term, sample_mismatch_indices,
    MaskedCaption, ObjectiveHeads, DEFAULT_MASK_RATE,
};
use crate::optim::Parameter;
use crate::tensor::{ops, Element, Tensor};
use crate::vision::{PatchEmbedder, PreAttention};

pub const MAX_TEXT_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn from_index(i: u8) -> Result<Stage> {
        match i {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            other => Err(config_err(format!("stage {other} is not one of 1|2|3"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

/// Stage-1 loss switches, for the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub stc: bool,
    pub stm: bool,
    pub vtc: bool,
    pub vtm: bool,
    pub mlm: bool,
}

impl Default for LossToggles {
    fn default() -> LossToggles {
        LossToggles {
            stc: true,
            stm: true,
            vtc: true,
            vtm: true,
            mlm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stack: StackConfig,
    pub frames: usize,     // F; 4 at paper scale too
    pub image_size: usize, // 224 at paper scale
    pub patch_size: usize,
    pub channels: usize,
    pub proj_dim: usize, // contrastive projection width
    pub lm: LmConfig,
    /// Combined spatial-temporal stream instead of two masked passes
    /// (the sequential-attention ablation).
    pub separate_visual: bool,
    /// Expert routing on; off replaces every expert with a shared FFN.
    pub experts_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale defaults. Paper scale: N=12, L=9, D=1024, 16 heads,
    /// 224px images (P=64), proj 256, d_lm=1024.
    pub fn desk(vocab: usize) -> ModelConfig {
        ModelConfig {
            stack: StackConfig {
                layers: 4,        // N (12 at paper scale)
                expert_layers: 3, // L (9 at paper scale)
                dim: 64,          // D (1024 at paper scale)
                heads: 4,
                ffn_multiplier: 4,
            },
            frames: 4,
            image_size: 56, // 224 at paper scale; P = (56/14)^2/4 = 4
            patch_size: 14,
            channels: 3,
            proj_dim: 16,
            lm: LmConfig {
                dim: 64, // 1024 at paper scale
                heads: 4,
                enc_layers: 2,
                dec_layers: 2,
                vocab,
                max_len: 16,
            },
            separate_visual: true,
            experts_enabled: true,
        }
    }
}

pub struct Model<T: Element> {
    pub cfg: ModelConfig,
    pub patches: PatchEmbedder<T>,
    pub pre: PreAttention<T>,
    pub txt_emb: Embedding<T>,
    pub txt_pos: Embedding<T>,
    pub stack: ExpertStack<T>,
    pub heads: ObjectiveHeads<T>,
    pub coupling: CouplingLayer<T>,
    pub lm: ToyLm<T>,
}

/// Streams the stack receives for a (stage, modality) pair. Stage 2
/// trains on video dialogs only.
pub fn available_streams(stage: Stage, is_video: bool) -> Result<Vec<StreamId>> {
    use StreamId::*;
    Ok(match (stage, is_video) {
        (Stage::One, true) => vec![Spa, Tmp, Cap],
        (Stage::One, false) => vec![Spa, Cap],
        (Stage::Two, true) => vec![Spa, Tmp, Cap, Ctx],
        (Stage::Two, false) => {
            return Err(config_err("stage 2 trains on video dialogs; images have none"))
        }
        (Stage::Three, true) => vec![Spa, Tmp, Cap, Ctx],
        (Stage::Three, false) => vec![Spa, Cap, Ctx],
    })
}

/// Stage-1 losses of one batch plus the bookkeeping the trainer logs.
pub struct Stage1Outcome<T: Element> {
    pub total: Tensor<T>,
    pub parts: Vec<(&'static str, f64)>,
    /// Samples without a caption, skipped by the caption-dependent losses.
    pub skipped_captions: usize,
}

impl<T: Element> Model<T> {
    pub fn new(rng: &mut ChaCha12Rng, cfg: ModelConfig) -> Result<Model<T>> {
        let patches = PatchEmbedder::new(
            rng,
            cfg.channels,
            cfg.image_size,
            cfg.patch_size,
            cfg.stack.dim,
        )?;
        let pre = PreAttention::new(
            rng,
            cfg.stack.dim,
            cfg.stack.heads,
            cfg.frames,
            patches.tokens_per_frame(),
        )?;
        let txt_emb = Embedding::new(rng, cfg.lm.vocab, cfg.stack.dim);
        let txt_pos = Embedding::new(rng, MAX_TEXT_LEN, cfg.stack.dim);
        let stack = ExpertStack::new(rng, &cfg.stack, cfg.separate_visual, cfg.experts_enabled)?;
        let heads = ObjectiveHeads::new(rng, cfg.stack.dim, cfg.proj_dim, cfg.lm.vocab);
        let coupling = CouplingLayer::new(rng, cfg.stack.dim, cfg.lm.dim);
        let lm = ToyLm::new(rng, cfg.lm.clone())?;
        Ok(Model {
            cfg,
            patches,
            pre,
            txt_emb,
            txt_pos,
            stack,
            heads,
            coupling,
            lm,
        })
    }

    /// Visual streams of one clip: `(spatial, Some(temporal))`, or the
    /// combined stream alone when the two passes are chained, or spatial
    /// alone for images.
    pub fn embed_visual(&self, clip: &FrameSet, is_video: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let frames: Vec<Vec<T>> = (0..clip.frames)
            .map(|f| clip.frame(f).iter().map(|&v| T::of(v as f64)).collect())
            .collect();
        let tokens = self.patches.embed_frames(&frames)?;
        if !is_video {
            let (spa, _) = self.pre.forward(&tokens)?;
            return Ok((spa, None));
        }
        if self.cfg.separate_visual {
            let (spa, tmp) = self.pre.forward(&tokens)?;
            Ok((spa, Some(tmp)))
        } else {
            Ok((self.pre.forward_sequential(&tokens)?, None))
        }
    }

    pub fn embed_text(&self, ids: &[u32]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(data_err("cannot embed an empty token list"));
        }
        if ids.len() > MAX_TEXT_LEN {
            return Err(data_err(format!(
                "text of {} tokens exceeds the {MAX_TEXT_LEN} budget",
                ids.len()
            )));
        }
        let emb = self.txt_emb.forward(ids)?;
        ops::add(&emb, &self.txt_pos.first_rows(ids.len())?)
    }

    fn forward_bundle(&self, streams: Vec<(StreamId, Tensor<T>)>) -> Result<StackOutput<T>> {
        self.stack.forward(&ModalityBundle::new(streams)?)
    }

    /// All five stage-1 losses on one batch (images contribute the three
    /// caption losses only). Samples with empty captions are skipped by
    /// VTC/VTM/MLM and counted.
    pub fn stage1_losses(
        &self,
        batch: &Batch,
        toggles: &LossToggles,
        rng: &mut ChaCha12Rng,
    ) -> Result<Stage1Outcome<T>> {
        let k = batch.len();
        if k < 2 {
            return Err(data_err("stage-1 losses need a batch of at least 2"));
        }
        // Per-sample visual streams and main forwards.
        let mut spa = Vec::with_capacity(k);
        let mut tmp: Vec<Option<Tensor<T>>> = Vec::with_capacity(k);
        let mut caps: Vec<Option<Vec<u32>>> = Vec::with_capacity(k);
        let mut mains = Vec::with_capacity(k);
        for i in 0..k {
            let (s, t) = self.embed_visual(&batch.items[i].frames, batch.is_video)?;
            let cap_ids = batch.caption(i);
            let cap = if cap_ids.is_empty() {
                log::warn!("sample {} has no caption; caption losses skip it", batch.items[i].id);
                None
            } else {
                Some(cap_ids.to_vec())
            };
            let mut streams = vec![(StreamId::Spa, s.clone())];
            if let Some(t) = &t {
                streams.push((StreamId::Tmp, t.clone()));
            }
            if let Some(ids) = &cap {
                streams.push((StreamId::Cap, self.embed_text(ids)?));
            }
            mains.push(self.forward_bundle(streams)?);
            spa.push(s);
            tmp.push(t);
            caps.push(cap);
        }
        let skipped_captions = caps.iter().filter(|c| c.is_none()).count();
        let two_visual_streams = batch.is_video && self.cfg.separate_visual;

        let mut parts: Vec<(&'static str, f64)> = Vec::new();
        let mut terms: Vec<Tensor<T>> = Vec::new();

        if toggles.stc && two_visual_streams {
            let a: Vec<Tensor<T>> = mains.iter().map(|m| m.routed_stream(StreamId::Spa).cloned()).collect::<Result<_>>()?;
            let b: Vec<Tensor<T>> = mains.iter().map(|m| m.routed_stream(StreamId::Tmp).cloned()).collect::<Result<_>>()?;
            let l = contrastive_loss(&self.heads.theta_spa, &self.heads.theta_tmp, &self.heads.tau_stc, &a, &b)?;
            parts.push(("stc", l.item().as_f64()));
            terms.push(l);
        }

        if toggles.stm && two_visual_streams {
            // Matched and mismatched {spa, tmp} pairings; the mismatch
            // swaps the temporal stream for even samples and the spatial
            // one for odd, so both directions are exercised.
            let neg_idx = sample_mismatch_indices(k, rng)?;
            let mut pos_cls = Vec::with_capacity(k);
            let mut neg_cls = Vec::with_capacity(k);
            for i in 0..k {
                let t_i = tmp[i].as_ref().expect("video batch has temporal streams");
                let pos = self.forward_bundle(vec![
                    (StreamId::Spa, spa[i].clone()),
                    (StreamId::Tmp, t_i.clone()),
                ])?;
                pos_cls.push(pos.cls.clone());
                let j = neg_idx[i];
                let (ns, nt) = if i % 2 == 0 {
                    (spa[i].clone(), tmp[j].as_ref().expect("video").clone())
                } else {
                    (spa[j].clone(), t_i.clone())
                };
                let neg = self.forward_bundle(vec![(StreamId::Spa, ns), (StreamId::Tmp, nt)])?;
                neg_cls.push(neg.cls.clone());
            }
            let l = matching_loss(&self.heads.stm_head, &pos_cls, &neg_cls)?;
            parts.push(("stm", l.item().as_f64()));
            terms.push(l);
        }

        let with_cap: Vec<usize> = (0..k).filter(|&i| caps[i].is_some()).collect();

        if toggles.vtc {
            if with_cap.len() >= 2 {
                let mut vis = Vec::with_capacity(with_cap.len());
                let mut txt = Vec::with_capacity(with_cap.len());
                for &i in &with_cap {
                    let s = mains[i].routed_stream(StreamId::Spa)?.clone();
                    // the visual side is both routed streams stacked on the
                    // token axis, or whatever single stream exists
                    let v = if two_visual_streams {
                        ops::concat_rows(&[s, mains[i].routed_stream(StreamId::Tmp)?.clone()])?
                    } else {
                        s
                    };
                    vis.push(v);
                    txt.push(mains[i].routed_stream(StreamId::Cap)?.clone());
                }
                let l = contrastive_loss(&self.heads.theta_vis, &self.heads.theta_txt, &self.heads.tau_vtc, &vis, &txt)?;
                parts.push(("vtc", l.item().as_f64()));
                terms.push(l);
            } else {
                log::warn!("fewer than 2 captioned samples; vision-text contrast skipped");
            }
        }

        if toggles.vtm {
            if with_cap.len() >= 2 {
                let neg_of = sample_mismatch_indices(with_cap.len(), rng)?;
                let mut pos_cls = Vec::new();
                let mut neg_cls = Vec::new();
                for (pi, &i) in with_cap.iter().enumerate() {
                    pos_cls.push(mains[i].cls.clone());
                    let j = with_cap[neg_of[pi]];
                    let mut streams = vec![(StreamId::Spa, spa[i].clone())];
                    if let Some(t) = &tmp[i] {
                        streams.push((StreamId::Tmp, t.clone()));
                    }
                    let wrong_cap = caps[j].as_ref().expect("participant has caption");
                    streams.push((StreamId::Cap, self.embed_text(wrong_cap)?));
                    neg_cls.push(self.forward_bundle(streams)?.cls.clone());
                }
                let l = matching_loss(&self.heads.vtm_head, &pos_cls, &neg_cls)?;
                parts.push(("vtm", l.item().as_f64()));
                terms.push(l);
            } else {
                log::warn!("fewer than 2 captioned samples; vision-text matching skipped");
            }
        }

        if toggles.mlm {
            let word_range = RESERVED.len() as u32..self.cfg.lm.vocab as u32;
            let mut sample_losses = Vec::new();
            for &i in &with_cap {
                let ids = caps[i].as_ref().expect("participant has caption");
                let masked: MaskedCaption =
                    mask_caption(ids, DEFAULT_MASK_RATE, crate::data::MASK, word_range.clone(), rng)?;
                let mut streams = vec![(StreamId::Spa, spa[i].clone())];
                if let Some(t) = &tmp[i] {
                    streams.push((StreamId::Tmp, t.clone()));
                }
                streams.push((StreamId::Cap, self.embed_text(&masked.ids)?));
                let out = self.forward_bundle(streams)?;
                sample_losses.push(mlm_term(&self.heads.mlm_head, &out.stream(StreamId::Cap)?, &masked)?);
            }
            if sample_losses.is_empty() {
                log::warn!("no captioned samples; masked-language loss skipped");
            } else {
                let n = sample_losses.len();
                let mut l = sample_losses.remove(0);
                for s in sample_losses {
                    l = ops::add(&l, &s)?;
                }
                let l = ops::scale(&l, 1.0 / n as f64);
                parts.push(("mlm", l.item().as_f64()));
                terms.push(l);
            }
        }

        if terms.is_empty() {
            return Err(data_err("no stage-1 loss applies to this batch"));
        }
        // unweighted sum of the active objectives
        let mut total = terms.remove(0);
        for t in terms {
            total = ops::add(&total, &t)?;
        }
        Ok(Stage1Outcome {
            total,
            parts,
            skipped_captions,
        })
    }

    /// Expert-stack states for one dialog sample, coupled into LM width.
    /// The classification token is a pooling proxy, not content; only the
    /// stream states feed the generator.
    pub fn encode_for_answer(&self, batch: &Batch, i: usize, stage: Stage) -> Result<Tensor<T>> {
        let avail = available_streams(stage, batch.is_video)?;
        let (s, t) = self.embed_visual(&batch.items[i].frames, batch.is_video)?;
        let mut streams = vec![(StreamId::Spa, s)];
        if let Some(t) = t {
            if avail.contains(&StreamId::Tmp) {
                streams.push((StreamId::Tmp, t));
            }
        }
        let cap = batch.caption(i);
        if !cap.is_empty() && avail.contains(&StreamId::Cap) {
            streams.push((StreamId::Cap, self.embed_text(cap)?));
        }
        let ctx = batch.context(i);
        if avail.contains(&StreamId::Ctx) {
            if ctx.is_empty() {
                return Err(data_err(format!(
                    "dialog sample {} has no context",
                    batch.items[i].id
                )));
            }
            streams.push((StreamId::Ctx, self.embed_text(ctx)?));
        }
        let out = self.forward_bundle(streams)?;
        let (rows, _) = out.seq.dims2()?;
        // stream states only; row 0 is the classification token
        self.coupling.forward(&ops::slice_rows(&out.seq, 1, rows - 1)?)
    }

    /// Teacher-forced generation loss averaged over a batch. Returns the
    /// count of answers cut to the length budget.
    pub fn answer_loss(&self, batch: &Batch, stage: Stage) -> Result<(Tensor<T>, usize)> {
        if batch.is_empty() {
            return Err(data_err("empty batch"));
        }
        let mut truncated = 0;
        let mut total: Option<Tensor<T>> = None;
        for i in 0..batch.len() {
            let enc = self.encode_for_answer(batch, i, stage)?;
            let (l, cut) = gen_loss(&self.lm, &enc, &batch.items[i].answer)?;
            truncated += cut as usize;
            total = Some(match total {
                Some(t) => ops::add(&t, &l)?,
                None => l,
            });
        }
        Ok((
            ops::scale(&total.expect("non-empty batch"), 1.0 / batch.len() as f64),
            truncated,
        ))
    }

    pub fn teacher_accuracy(&self, batch: &Batch, stage: Stage) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..batch.len() {
            let enc = self.encode_for_answer(batch, i, stage)?;
            acc += teacher_forced_accuracy(&self.lm, &enc, &batch.items[i].answer)?;
        }
        Ok(acc / batch.len() as f64)
    }

    pub fn generate(&self, batch: &Batch, i: usize, stage: Stage) -> Result<Vec<u32>> {
        let enc = self.encode_for_answer(batch, i, stage)?;
        greedy_decode(&self.lm, &enc, self.cfg.lm.max_len)
    }

    /// Every parameter, including those a given stage never trains.
    /// Checkpoints persist this full set.
    pub fn all_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.patches.params("vision.patches", &mut out);
        self.pre.params("vision.pre", &mut out);
        self.txt_emb.params("text.emb", &mut out);
        self.txt_pos.params("text.pos", &mut out);
        self.stack.params("stack", &mut out);
        self.heads.params("heads", &mut out);
        self.coupling.params("coupling", &mut out);
        self.lm.params("lm", &mut out);
        out
    }

    /// The optimizer registry for a stage. Stage 1 excludes the generator
    /// and coupling entirely; stage 2 registers the LM frozen; stage 3
    /// trains everything.
    pub fn stage_params(&self, stage: Stage) -> Vec<Parameter<T>> {
        self.all_params()
            .into_iter()
            .filter_map(|(name, tensor)| {
                let is_lm = name.starts_with("lm.");
                let is_coupling = name.starts_with("coupling.");
                match stage {
                    Stage::One if is_lm || is_coupling => None,
                    Stage::One => Some((name, tensor, false)),
                    Stage::Two => Some((name, tensor, is_lm)),
                    Stage::Three => Some((name, tensor, false)),
                }
            })
            .map(|(name, tensor, frozen)| Parameter {
                name,
                tensor,
                frozen,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{build_vocab, synth_corpus, SynthKind};
    use crate::data::{load_jsonl, make_batches};
    use crate::optim::AdamW;
    use crate::rng::seeded;

    fn desk_model(seed: u64) -> Model<f64> {
        let vocab = build_vocab();
        Model::new(&mut seeded(seed), ModelConfig::desk(vocab.len())).unwrap()
    }

    fn batches(kind: SynthKind, n: usize, batch: usize, stage1: bool) -> Vec<Batch> {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(77, n, kind, dir.path()).unwrap();
        let samples = load_jsonl(&dir.path().join("data.jsonl"), kind.schema()).unwrap();
        let vocab = build_vocab();
        let order: Vec<usize> = (0..samples.len()).collect();
        make_batches(&samples, &order, &vocab, batch, 4, stage1).unwrap()
    }

    #[test]
    fn stream_availability_matches_the_stage_table() {
        use StreamId::*;
        assert_eq!(available_streams(Stage::One, true).unwrap(), vec![Spa, Tmp, Cap]);
        assert_eq!(available_streams(Stage::One, false).unwrap(), vec![Spa, Cap]);
        assert_eq!(available_streams(Stage::Two, true).unwrap(), vec![Spa, Tmp, Cap, Ctx]);
        assert!(available_streams(Stage::Two, false).is_err());
        assert_eq!(available_streams(Stage::Three, true).unwrap(), vec![Spa, Tmp, Cap, Ctx]);
        assert_eq!(available_streams(Stage::Three, false).unwrap(), vec![Spa, Cap, Ctx]);
    }

    #[test]
    fn stage_one_registers_no_generator_parameters() {
        let m = desk_model(1);
        let p1 = m.stage_params(Stage::One);
        assert!(p1.iter().all(|p| !p.name.starts_with("lm.") && !p.name.starts_with("coupling.")));
        assert!(p1.iter().all(|p| !p.frozen));
        let p2 = m.stage_params(Stage::Two);
        assert!(p2.iter().any(|p| p.name.starts_with("lm.") && p.frozen));
        assert!(p2.iter().any(|p| p.name.starts_with("coupling.") && !p.frozen));
        let p3 = m.stage_params(Stage::Three);
        assert!(p3.iter().all(|p| !p.frozen));
        assert_eq!(p3.len(), m.all_params().len());
    }

    #[test]
    fn video_batch_produces_all_five_losses() {
        let m = desk_model(2);
        let b = &batches(SynthKind::Stage1, 4, 4, true)[0];
        assert!(b.is_video);
        let out = m.stage1_losses(b, &LossToggles::default(), &mut seeded(3)).unwrap();
        let names: Vec<&str> = out.parts.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["stc", "stm", "vtc", "vtm", "mlm"]);
        assert!(out.parts.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
        let sum: f64 = out.parts.iter().map(|(_, v)| v).sum();
        assert!((out.total.item() - sum).abs() < 1e-9);
        assert_eq!(out.skipped_captions, 0);
    }

    #[test]
    fn image_batch_gets_caption_losses_only() {
        let m = desk_model(4);
        let b = &batches(SynthKind::Stage3Image, 4, 4, true)[0];
        assert!(!b.is_video);
        let out = m.stage1_losses(b, &LossToggles::default(), &mut seeded(5)).unwrap();
        let names: Vec<&str> = out.parts.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["vtc", "vtm", "mlm"]);
    }

    #[test]
    fn empty_captions_are_skipped_and_counted() {
        let m = desk_model(6);
        let mut b = batches(SynthKind::Stage1, 4, 4, true).remove(0);
        b.items[1].caption_len = 0;
        let out = m.stage1_losses(&b, &LossToggles::default(), &mut seeded(7)).unwrap();
        assert_eq!(out.skipped_captions, 1);
        // contrastive and matching still run on the remaining three
        assert!(out.parts.iter().any(|(n, _)| *n == "vtc"));
    }

    #[test]
    fn toggles_drop_their_losses() {
        let m = desk_model(8);
        let b = &batches(SynthKind::Stage1, 4, 4, true)[0];
        let t = LossToggles {
            stc: false,
            stm: false,
            ..LossToggles::default()
        };
        let out = m.stage1_losses(b, &t, &mut seeded(9)).unwrap();
        let names: Vec<&str> = out.parts.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["vtc", "vtm", "mlm"]);
    }

    #[test]
    fn answer_loss_and_decoding_run_on_dialog_batches() {
        let m = desk_model(10);
        let b = &batches(SynthKind::Stage3Video, 3, 3, false)[0];
        let (loss, truncated) = m.answer_loss(b, Stage::Three).unwrap();
        assert!(loss.item().is_finite() && loss.item() > 0.0);
        assert_eq!(truncated, 0);
        let a = m.generate(b, 0, Stage::Three).unwrap();
        let b2 = m.generate(b, 0, Stage::Three).unwrap();
        assert_eq!(a, b2);
        assert!(!a.is_empty() && a.len() <= m.cfg.lm.max_len);
    }

    #[test]
    fn stage_two_step_leaves_the_generator_bit_identical() {
        let m = desk_model(12);
        let before: Vec<(String, Vec<f64>)> = m
            .all_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("lm."))
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        let b = &batches(SynthKind::Stage2, 3, 3, false)[0];
        let mut opt = AdamW::new(m.stage_params(Stage::Two), 0.01, Some(1.0)).unwrap();
        for _ in 0..3 {
            opt.zero_grads();
            let (loss, _) = m.answer_loss(b, Stage::Two).unwrap();
            loss.backward().unwrap();
            opt.step(1e-3).unwrap();
        }
        let mut coupling_changed = false;
        for (name, t) in m.all_params() {
            if let Some((_, old)) = before.iter().find(|(n, _)| *n == name) {
                let now = t.to_vec();
                assert!(
                    old.iter().zip(&now).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "frozen generator parameter {name} moved"
                );
            } else if name.starts_with("coupling.") {
                coupling_changed = true;
            }
        }
        assert!(coupling_changed);
        // stage 3 unfreezes: one step must move some generator parameter
        let mut opt3 = AdamW::new(m.stage_params(Stage::Three), 0.01, Some(1.0)).unwrap();
        opt3.zero_grads();
        let (loss, _) = m.answer_loss(b, Stage::Three).unwrap();
        loss.backward().unwrap();
        opt3.step(1e-3).unwrap();
        let moved = m.all_params().into_iter().any(|(name, t)| {
            before
                .iter()
                .find(|(n, _)| *n == name)
                .is_some_and(|(_, old)| old.iter().zip(&t.to_vec()).any(|(a, b)| a != b))
        });
        assert!(moved, "stage 3 left the generator untouched");
    }

    #[test]
    fn sequential_visual_mode_trains_without_temporal_losses() {
        let vocab = build_vocab();
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.separate_visual = false;
        let m: Model<f64> = Model::new(&mut seeded(14), cfg).unwrap();
        let b = &batches(SynthKind::Stage1, 4, 4, true)[0];
        let out = m.stage1_losses(b, &LossToggles::default(), &mut seeded(15)).unwrap();
        let names: Vec<&str> = out.parts.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["vtc", "vtm", "mlm"]);
    }
}

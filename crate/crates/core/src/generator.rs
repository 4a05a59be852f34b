//! Answer generation for stages 2-3: a small encoder-decoder language
//! model, the linear coupling from expert-stack width to LM width, the
//! teacher-forced generative loss, and greedy decoding.
//!
//! The decoder runs strictly causal self-attention over the concatenation
//! of the encoded prefix and the shifted answer, so perturbing answer
//! token t can only move logits at positions after t.

use rand_chacha::ChaCha12Rng;

use crate::data::{BOS, EOS};
use crate::error::{config_err, data_err, Result};
use crate::nn::{Embedding, FeedForward, LayerNorm, Linear, Mha, NamedParams};
use crate::tensor::{ops, Element, Mask, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub dim: usize, // d_lm; 1024 at paper scale
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab: usize,
    pub max_len: usize, // answer budget, decoder positions beyond the prefix
}

/// Pre-norm transformer block; the attention module normalizes its own
/// input, so only the feed-forward branch needs an explicit norm here.
struct LmBlock<T: Element> {
    sa: Mha<T>,
    ln: LayerNorm<T>,
    ffn: FeedForward<T>,
}

impl<T: Element> LmBlock<T> {
    fn new(rng: &mut ChaCha12Rng, dim: usize, heads: usize, hidden: usize) -> Result<LmBlock<T>> {
        Ok(LmBlock {
            sa: Mha::new(rng, dim, heads)?,
            ln: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, hidden),
        })
    }

    fn forward(&self, x: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
        let h = ops::add(x, &self.sa.forward(x, mask)?)?;
        ops::add(&h, &self.ffn.forward(&self.ln.forward(&h)?)?)
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.sa.params(&format!("{prefix}.sa"), out);
        self.ln.params(&format!("{prefix}.ln"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

/// Maps expert-stack states (width D) into the LM width. Row count is
/// preserved: one coupled state per input token.
pub struct CouplingLayer<T: Element> {
    pub lin: Linear<T>,
}

impl<T: Element> CouplingLayer<T> {
    pub fn new(rng: &mut ChaCha12Rng, stack_dim: usize, lm_dim: usize) -> CouplingLayer<T> {
        CouplingLayer {
            lin: Linear::new(rng, stack_dim, lm_dim, true),
        }
    }

    pub fn forward(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        self.lin.forward(states)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.lin.params(prefix, out);
    }
}

pub struct ToyLm<T: Element> {
    pub cfg: LmConfig,
    tok: Embedding<T>, // shared by encoder and decoder
    enc_pos: Embedding<T>,
    dec_pos: Embedding<T>,
    enc_blocks: Vec<LmBlock<T>>,
    dec_blocks: Vec<LmBlock<T>>,
    enc_ln: LayerNorm<T>,
    dec_ln: LayerNorm<T>,
    out_proj: Linear<T>, // d_lm -> vocab
}

/// Answer ids cut at the first end-of-sequence token, then to the length
/// budget. The flag reports whether the budget forced a cut.
pub fn effective_answer(ids: &[u32], max_len: usize) -> Result<(Vec<u32>, bool)> {
    let end = ids
        .iter()
        .position(|&t| t == EOS)
        .ok_or_else(|| data_err("answer lacks an end-of-sequence token"))?;
    let mut ans = ids[..=end].to_vec();
    if ans.is_empty() {
        return Err(data_err("empty answer"));
    }
    let truncated = ans.len() > max_len;
    if truncated {
        ans.truncate(max_len);
        *ans.last_mut().expect("max_len >= 1") = EOS;
    }
    Ok((ans, truncated))
}

impl<T: Element> ToyLm<T> {
    pub fn new(rng: &mut ChaCha12Rng, cfg: LmConfig) -> Result<ToyLm<T>> {
        if cfg.max_len == 0 {
            return Err(config_err("answer budget must be at least 1"));
        }
        let hidden = cfg.dim * 4;
        let mk = |rng: &mut ChaCha12Rng, n: usize| -> Result<Vec<LmBlock<T>>> {
            (0..n).map(|_| LmBlock::new(rng, cfg.dim, cfg.heads, hidden)).collect()
        };
        Ok(ToyLm {
            tok: Embedding::new(rng, cfg.vocab, cfg.dim),
            enc_pos: Embedding::new(rng, 512, cfg.dim),
            dec_pos: Embedding::new(rng, 512, cfg.dim),
            enc_blocks: mk(rng, cfg.enc_layers)?,
            dec_blocks: mk(rng, cfg.dec_layers)?,
            enc_ln: LayerNorm::new(cfg.dim),
            dec_ln: LayerNorm::new(cfg.dim),
            out_proj: Linear::new(rng, cfg.dim, cfg.vocab, true),
            cfg,
        })
    }

    /// Bidirectional encoding of already-embedded states `(n, d_lm)`.
    pub fn encode(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _) = states.dims2()?;
        let pos = self.enc_pos.first_rows(n)?;
        let mut x = ops::add(states, &pos)?;
        for b in &self.enc_blocks {
            x = b.forward(&x, None)?;
        }
        self.enc_ln.forward(&x)
    }

    /// Token-embedding encoder path, used by the built-in text embedder.
    pub fn encode_tokens(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let ids = if ids.is_empty() { &[EOS][..] } else { ids };
        self.encode(&self.tok.forward(ids)?)
    }

    /// Decoder logits for every answer position under teacher forcing:
    /// row t predicts answer token t given the prefix and tokens < t.
    pub fn teacher_logits(&self, enc: &Tensor<T>, answer: &[u32]) -> Result<Tensor<T>> {
        if answer.is_empty() {
            return Err(data_err("empty answer"));
        }
        let (n_enc, _) = enc.dims2()?;
        let t_ans = answer.len();
        let mut dec_ids = Vec::with_capacity(t_ans);
        dec_ids.push(BOS);
        dec_ids.extend_from_slice(&answer[..t_ans - 1]);
        let dec_emb = ops::add(&self.tok.forward(&dec_ids)?, &self.dec_pos.first_rows(t_ans)?)?;
        let mut x = ops::concat_rows(&[enc.clone(), dec_emb])?;
        let mask = Mask::causal(n_enc + t_ans);
        for b in &self.dec_blocks {
            x = b.forward(&x, Some(&mask))?;
        }
        let x = self.dec_ln.forward(&x)?;
        self.out_proj.forward(&ops::slice_rows(&x, n_enc, t_ans)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.tok.params(&format!("{prefix}.tok"), out);
        self.enc_pos.params(&format!("{prefix}.enc_pos"), out);
        self.dec_pos.params(&format!("{prefix}.dec_pos"), out);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.params(&format!("{prefix}.enc{i}"), out);
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.params(&format!("{prefix}.dec{i}"), out);
        }
        self.enc_ln.params(&format!("{prefix}.enc_ln"), out);
        self.dec_ln.params(&format!("{prefix}.dec_ln"), out);
        self.out_proj.params(&format!("{prefix}.out"), out);
    }
}

/// Teacher-forced cross-entropy, mean over answer tokens. Padding after
/// the end-of-sequence token never reaches the decoder, and answers over
/// the budget are truncated (flagged in the returned pair).
pub fn gen_loss<T: Element>(
    lm: &ToyLm<T>,
    coupled_states: &Tensor<T>,
    answer: &[u32],
) -> Result<(Tensor<T>, bool)> {
    let (ans, truncated) = effective_answer(answer, lm.cfg.max_len)?;
    if truncated {
        log::warn!("answer of {} tokens truncated to {}", answer.len(), lm.cfg.max_len);
    }
    let enc = lm.encode(coupled_states)?;
    let logits = lm.teacher_logits(&enc, &ans)?;
    let vocab = lm.cfg.vocab;
    let mut targets = vec![T::zero(); ans.len() * vocab];
    for (r, &tok) in ans.iter().enumerate() {
        if tok as usize >= vocab {
            return Err(data_err(format!("answer token {tok} outside vocabulary")));
        }
        targets[r * vocab + tok as usize] = T::one();
    }
    let t = Tensor::from_vec(&[ans.len(), vocab], targets)?;
    Ok((ops::cross_entropy_with_logits(&logits, &t)?, truncated))
}

/// Fraction of answer positions where the argmax of the teacher-forced
/// logits equals the gold token.
pub fn teacher_forced_accuracy<T: Element>(
    lm: &ToyLm<T>,
    coupled_states: &Tensor<T>,
    answer: &[u32],
) -> Result<f64> {
    let (ans, _) = effective_answer(answer, lm.cfg.max_len)?;
    let enc = lm.encode(coupled_states)?;
    let logits = lm.teacher_logits(&enc, &ans)?;
    let mut hits = 0usize;
    for (r, &tok) in ans.iter().enumerate() {
        if ops::argmax_row(&logits, r)? as u32 == tok {
            hits += 1;
        }
    }
    Ok(hits as f64 / ans.len() as f64)
}

/// Greedy decoding: at each step take the lowest-id argmax of the next
/// token distribution; stop on end-of-sequence (kept in the output) or
/// after `max_len` tokens. Deterministic by construction.
pub fn greedy_decode<T: Element>(
    lm: &ToyLm<T>,
    coupled_states: &Tensor<T>,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(config_err("decode budget must be at least 1"));
    }
    let enc = lm.encode(coupled_states)?;
    let (n_enc, _) = enc.dims2()?;
    let mut out: Vec<u32> = Vec::new();
    while out.len() < max_len {
        let mut dec_ids = Vec::with_capacity(out.len() + 1);
        dec_ids.push(BOS);
        dec_ids.extend_from_slice(&out);
        let t = dec_ids.len();
        let dec_emb = ops::add(&lm.tok.forward(&dec_ids)?, &lm.dec_pos.first_rows(t)?)?;
        let mut x = ops::concat_rows(&[enc.clone(), dec_emb])?;
        let mask = Mask::causal(n_enc + t);
        for b in &lm.dec_blocks {
            x = b.forward(&x, Some(&mask))?;
        }
        let x = lm.dec_ln.forward(&x)?;
        let logits = lm.out_proj.forward(&ops::slice_rows(&x, n_enc + t - 1, 1)?)?;
        let next = ops::argmax_row(&logits, 0)? as u32;
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_f64, GradCase};
    use crate::optim::{AdamW, Parameter};
    use crate::rng::seeded;
    use rand::Rng;

    fn small_cfg(vocab: usize) -> LmConfig {
        LmConfig {
            dim: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            vocab,
            max_len: 8,
        }
    }

    fn states(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut rng = seeded(seed);
        let data = (0..n * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn zeroed_head_gives_uniform_loss_ln_vocab() {
        let mut rng = seeded(40);
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, small_cfg(64)).unwrap();
        lm.out_proj.w.set_data(&vec![0.0; 16 * 64]).unwrap();
        lm.out_proj.b.as_ref().unwrap().set_data(&vec![0.0; 64]).unwrap();
        let (loss, truncated) = gen_loss(&lm, &states(1, 3, 16), &[10, 11, EOS]).unwrap();
        assert!(!truncated);
        assert!((loss.item() - (64.0f64).ln()).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn padding_beyond_eos_is_invisible() {
        let mut rng = seeded(41);
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, small_cfg(32)).unwrap();
        let s = states(2, 4, 16);
        let (a, _) = gen_loss(&lm, &s, &[7, 9, EOS]).unwrap();
        let (b, _) = gen_loss(&lm, &s, &[7, 9, EOS, 0, 0, 0, 0]).unwrap();
        assert_eq!(a.item().to_bits(), b.item().to_bits());
    }

    #[test]
    fn over_budget_answers_truncate_with_flag() {
        let mut rng = seeded(42);
        let mut cfg = small_cfg(32);
        cfg.max_len = 4;
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, cfg).unwrap();
        let long: Vec<u32> = vec![6, 7, 8, 9, 10, 11, EOS];
        let (_, truncated) = gen_loss(&lm, &states(3, 2, 16), &long).unwrap();
        assert!(truncated);
        let (eff, t) = effective_answer(&long, 4).unwrap();
        assert!(t);
        assert_eq!(eff, vec![6, 7, 8, EOS]);
        assert!(gen_loss(&lm, &states(3, 2, 16), &[5, 6]).is_err()); // no EOS
    }

    #[test]
    fn perturbing_answer_token_t_only_moves_later_logits() {
        let mut rng = seeded(43);
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, small_cfg(32)).unwrap();
        let enc = lm.encode(&states(4, 3, 16)).unwrap();
        let base = lm.teacher_logits(&enc, &[6, 7, 8, 9, EOS]).unwrap();
        let bumped = lm.teacher_logits(&enc, &[6, 7, 20, 9, EOS]).unwrap();
        let (rows, cols) = base.dims2().unwrap();
        let (a, b) = (base.to_vec(), bumped.to_vec());
        for r in 0..rows {
            let same = a[r * cols..(r + 1) * cols]
                .iter()
                .zip(&b[r * cols..(r + 1) * cols])
                .all(|(x, y)| x.to_bits() == y.to_bits());
            // token index 2 was perturbed: rows <= 2 identical, rows > 2 move
            if r <= 2 {
                assert!(same, "row {r} changed before the perturbed token");
            } else {
                assert!(!same, "row {r} ignored the perturbed token");
            }
        }
    }

    #[test]
    fn decode_is_deterministic_and_ties_break_low() {
        let mut rng = seeded(44);
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, small_cfg(32)).unwrap();
        let s = states(5, 3, 16);
        let a = greedy_decode(&lm, &s, 6).unwrap();
        let b = greedy_decode(&lm, &s, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        // all-equal logits: argmax must pick token 0
        lm.out_proj.w.set_data(&vec![0.0; 16 * 32]).unwrap();
        lm.out_proj.b.as_ref().unwrap().set_data(&vec![0.0; 32]).unwrap();
        let tied = greedy_decode(&lm, &s, 3).unwrap();
        assert_eq!(tied, vec![0, 0, 0]);
    }

    #[test]
    fn loss_matches_independent_log_prob_sum() {
        let mut rng = seeded(45);
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, small_cfg(24)).unwrap();
        let s = states(6, 3, 16);
        let ans = [7u32, 12, EOS];
        let (loss, _) = gen_loss(&lm, &s, &ans).unwrap();
        let enc = lm.encode(&s).unwrap();
        let logits = lm.teacher_logits(&enc, &ans).unwrap();
        let v = logits.to_vec();
        let mut total = 0.0;
        for (r, &tok) in ans.iter().enumerate() {
            let row = &v[r * 24..(r + 1) * 24];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[tok as usize];
        }
        assert!((loss.item() - total / ans.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn gen_loss_gradient_matches_finite_differences() {
        let build = || {
            let mut rng = seeded(46);
            let lm: ToyLm<f64> = ToyLm::new(
                &mut rng,
                LmConfig {
                    dim: 8,
                    heads: 2,
                    enc_layers: 1,
                    dec_layers: 1,
                    vocab: 12,
                    max_len: 8,
                },
            )
            .unwrap();
            let s = Tensor::param(&[2, 8], states(7, 2, 8).to_vec()).unwrap();
            let mut leaves = vec![("states".to_string(), s.clone())];
            lm.params("lm", &mut leaves);
            GradCase {
                leaves,
                forward: Box::new(move || Ok(gen_loss(&lm, &s, &[6, 7, EOS])?.0)),
            }
        };
        let worst = check_f64(&build()).unwrap();
        assert!(worst < 1e-6, "gen loss grad rel err {worst:.2e}");
    }

    #[test]
    fn one_sample_overfits_to_exact_decode() {
        let mut rng = seeded(47);
        let lm: ToyLm<f64> = ToyLm::new(&mut rng, small_cfg(24)).unwrap();
        let s = states(8, 3, 16);
        let ans = [7u32, 9, 13, EOS];
        let mut named = Vec::new();
        lm.params("lm", &mut named);
        let params: Vec<Parameter<f64>> = named
            .into_iter()
            .map(|(name, tensor)| Parameter { name, tensor, frozen: false })
            .collect();
        let mut opt = AdamW::new(params, 0.0, Some(1.0)).unwrap();
        for _ in 0..120 {
            opt.zero_grads();
            let (loss, _) = gen_loss(&lm, &s, &ans).unwrap();
            loss.backward().unwrap();
            opt.step(5e-3).unwrap();
        }
        assert_eq!(greedy_decode(&lm, &s, 8).unwrap(), ans.to_vec());
        assert!((teacher_forced_accuracy(&lm, &s, &ans).unwrap() - 1.0).abs() < 1e-12);
    }
}

//! Answer evaluation: overlap metrics over prediction/reference files,
//! retrieval metrics over ranked candidate lists, and the cosine ranking
//! scheme with pluggable embedding providers.

pub mod nlg;

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{split_text, Vocabulary};
use crate::error::{config_err, data_err, provider_err, Result};
use crate::generator::ToyLm;
use crate::tensor::Element;

/// A candidate list ordered by similarity to the generated answer.
#[derive(Debug, Clone)]
pub struct RankedCandidates {
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// Cosine similarity per candidate (original indexing).
    pub scores: Vec<f64>,
    pub gt_index: usize,
    /// Graded relevance per candidate, when the dataset provides it.
    pub relevance: Option<Vec<f64>>,
}

/// Indices sorted by score descending; ties go to the lower index.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

impl RankedCandidates {
    pub fn new(scores: Vec<f64>, gt_index: usize, relevance: Option<Vec<f64>>) -> Result<RankedCandidates> {
        if scores.is_empty() {
            return Err(data_err("cannot rank an empty candidate list"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(data_err("non-finite candidate score"));
        }
        if gt_index >= scores.len() {
            return Err(data_err(format!(
                "answer index {gt_index} outside the {} candidates",
                scores.len()
            )));
        }
        if let Some(rel) = &relevance {
            if rel.len() != scores.len() {
                return Err(data_err(format!(
                    "{} relevance grades for {} candidates",
                    rel.len(),
                    scores.len()
                )));
            }
        }
        Ok(RankedCandidates {
            order: rank_by_scores(&scores),
            scores,
            gt_index,
            relevance,
        })
    }

    /// 1-based rank of the ground-truth candidate.
    pub fn gt_rank(&self) -> usize {
        1 + self
            .order
            .iter()
            .position(|&c| c == self.gt_index)
            .expect("order is a permutation")
    }
}

pub fn r_at(ranked: &RankedCandidates, k: usize) -> f64 {
    if ranked.gt_rank() <= k {
        1.0
    } else {
        0.0
    }
}

pub fn mrr(ranked: &RankedCandidates) -> f64 {
    1.0 / ranked.gt_rank() as f64
}

/// Discounted cumulative gain over the full list, linear in relevance,
/// discount log₂(rank+1), normalized by the ideal ordering. A list with
/// no relevant candidate scores 0.
pub fn ndcg(ranked: &RankedCandidates) -> Result<f64> {
    let rel = ranked
        .relevance
        .as_ref()
        .ok_or_else(|| data_err("ndcg needs per-candidate relevance grades"))?;
    let dcg: f64 = ranked
        .order
        .iter()
        .enumerate()
        .map(|(i, &c)| rel[c] / ((i + 2) as f64).log2())
        .sum();
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum();
    Ok(if idcg == 0.0 { 0.0 } else { dcg / idcg })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RetrievalReport {
    pub samples: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mrr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
}

/// Mean retrieval metrics over samples. With `want_ndcg`, every sample
/// must carry relevance grades.
pub fn summarize_retrieval(items: &[RankedCandidates], want_ndcg: bool) -> Result<RetrievalReport> {
    if items.is_empty() {
        return Err(data_err("no ranked samples to summarize"));
    }
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&RankedCandidates) -> f64| items.iter().map(|r| f(r)).sum::<f64>() / n;
    let ndcg_mean = if want_ndcg {
        let mut acc = 0.0;
        for r in items {
            acc += ndcg(r)?;
        }
        Some(acc / n)
    } else {
        None
    };
    Ok(RetrievalReport {
        samples: items.len(),
        r_at_1: mean(&|r| r_at(r, 1)),
        r_at_5: mean(&|r| r_at(r, 5)),
        r_at_10: mean(&|r| r_at(r, 10)),
        mrr: mean(&mrr),
        ndcg: ndcg_mean,
    })
}

/// Text-to-vector backends for the ranking scheme. Vectors are
/// L2-normalized, one per input text, all the same width.
pub trait EmbeddingProvider {
    /// Vector width, when the provider knows it up front. Remote services
    /// declare theirs per response instead.
    fn dim(&self) -> Option<usize>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Offline text embedder: mean-pooled encoder states of the model's own
/// generator, L2-normalized. Texts beyond the encoder's position budget
/// are truncated.
pub struct BuiltinEmbedder<'a, T: Element> {
    lm: &'a ToyLm<T>,
    vocab: &'a Vocabulary,
}

/// Encoder position-table size; the hard cap on embedded text length.
pub const EMBED_MAX_TOKENS: usize = 512;

impl<'a, T: Element> BuiltinEmbedder<'a, T> {
    pub fn new(lm: &'a ToyLm<T>, vocab: &'a Vocabulary) -> BuiltinEmbedder<'a, T> {
        BuiltinEmbedder { lm, vocab }
    }
}

impl<T: Element> EmbeddingProvider for BuiltinEmbedder<'_, T> {
    fn dim(&self) -> Option<usize> {
        Some(self.lm.cfg.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                let mut ids = self.vocab.tokenize(t);
                ids.truncate(EMBED_MAX_TOKENS);
                let states = self.lm.encode_tokens(&ids)?;
                let (n, d) = states.dims2()?;
                let data = states.data();
                let mut pooled = vec![0.0f64; d];
                for r in 0..n {
                    for c in 0..d {
                        pooled[c] += data[r * d + c].as_f64();
                    }
                }
                for x in &mut pooled {
                    *x /= n as f64;
                }
                Ok(l2_normalized(pooled))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

/// HTTP embedding service: POST {base}/embed with {"texts": [...]},
/// response {"embeddings": [[...]], "dim": n}. Failed batches retry with
/// exponential backoff before aborting the evaluation.
pub struct RemoteEmbedder {
    url: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str) -> RemoteEmbedder {
        Self::with_timing(base_url, 3, Duration::from_millis(500), Duration::from_secs(30))
    }

    pub fn with_timing(base_url: &str, retries: u32, backoff: Duration, timeout: Duration) -> RemoteEmbedder {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        RemoteEmbedder {
            url: format!("{}/embed", base_url.trim_end_matches('/')),
            agent,
            retries,
            backoff,
        }
    }

    fn call(&self, texts: &[String]) -> std::result::Result<EmbedResponse, ureq::Error> {
        let mut resp = self.agent.post(&self.url).send_json(EmbedRequest { texts })?;
        resp.body_mut().read_json::<EmbedResponse>()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> Option<usize> {
        None
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.call(texts) {
                Ok(resp) => {
                    if resp.embeddings.len() != texts.len() {
                        return Err(provider_err(format!(
                            "{} returned {} embeddings for a batch of {} texts",
                            self.url,
                            resp.embeddings.len(),
                            texts.len()
                        )));
                    }
                    if resp.dim == 0 || resp.embeddings.iter().any(|e| e.len() != resp.dim) {
                        return Err(provider_err(format!(
                            "{} returned vectors not matching its declared width {}",
                            self.url, resp.dim
                        )));
                    }
                    if resp.embeddings.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(provider_err(format!("{} returned non-finite values", self.url)));
                    }
                    return Ok(resp.embeddings.into_iter().map(l2_normalized).collect());
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(provider_err(format!(
            "batch of {} texts failed after {} attempts against {}: {last_err}",
            texts.len(),
            self.retries + 1,
            self.url
        )))
    }
}

/// The cosine ranking scheme: embed the generated answer and every
/// candidate, score candidates by cosine to the answer, order descending
/// with index tie-break.
pub fn rank_candidates(
    generated: &str,
    candidates: &[String],
    gt_index: usize,
    relevance: Option<Vec<f64>>,
    provider: &dyn EmbeddingProvider,
) -> Result<RankedCandidates> {
    if candidates.is_empty() {
        return Err(data_err("no candidates to rank"));
    }
    let mut texts = Vec::with_capacity(candidates.len() + 1);
    texts.push(generated.to_string());
    texts.extend_from_slice(candidates);
    let emb = provider.embed(&texts)?;
    if emb.len() != texts.len() {
        return Err(provider_err(format!(
            "provider returned {} vectors for {} texts",
            emb.len(),
            texts.len()
        )));
    }
    let width = emb[0].len();
    if width == 0 || emb.iter().any(|e| e.len() != width) {
        return Err(provider_err("provider returned ragged embedding widths"));
    }
    let q = &emb[0];
    // rows are unit length (or zero), so the dot product is the cosine
    let scores: Vec<f64> = emb[1..]
        .iter()
        .map(|e| q.iter().zip(e).map(|(a, b)| a * b).sum())
        .collect();
    RankedCandidates::new(scores, gt_index, relevance)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NlgReport {
    pub samples: usize,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl NlgReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column table, one metric per line.
    pub fn table(&self) -> String {
        let rows = [
            ("samples", self.samples as f64),
            ("B-1", self.bleu[0]),
            ("B-2", self.bleu[1]),
            ("B-3", self.bleu[2]),
            ("B-4", self.bleu[3]),
            ("M", self.meteor),
            ("R", self.rouge_l),
            ("C", self.cider),
        ];
        let mut out = String::new();
        for (name, v) in rows {
            if name == "samples" {
                out.push_str(&format!("{name:<8} {v:>8}\n", v = v as usize));
            } else {
                out.push_str(&format!("{name:<8} {v:>8.4}\n"));
            }
        }
        out
    }
}

/// Corpus scores for (candidate tokens, reference token lists) pairs:
/// BLEU/METEOR/ROUGE-L are sentence scores averaged over samples (METEOR
/// and ROUGE-L take the best reference); the consensus metric is corpus
/// level by construction.
pub fn score_nlg(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<NlgReport> {
    if pairs.is_empty() {
        return Err(data_err("no prediction/reference pairs to score"));
    }
    let n = pairs.len() as f64;
    let mut bleu = [0.0f64; 4];
    let mut meteor = 0.0;
    let mut rouge = 0.0;
    for (cand, refs) in pairs {
        for (k, b) in bleu.iter_mut().enumerate() {
            *b += nlg::bleu(cand, refs, k + 1)?;
        }
        meteor += refs
            .iter()
            .map(|r| nlg::meteor_exact(cand, r))
            .fold(0.0, f64::max);
        rouge += refs
            .iter()
            .map(|r| nlg::rouge_l(cand, r))
            .fold(0.0, f64::max);
    }
    let cands: Vec<Vec<String>> = pairs.iter().map(|(c, _)| c.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let cider = nlg::cider(&cands, &refs)?;
    for b in &mut bleu {
        *b /= n;
    }
    Ok(NlgReport {
        samples: pairs.len(),
        bleu,
        meteor: meteor / n,
        rouge_l: rouge / n,
        cider,
    })
}

#[derive(Deserialize)]
struct PredRecord {
    id: String,
    generated: String,
}

#[derive(Deserialize)]
struct RefRecord {
    id: String,
    references: Vec<String>,
}

/// Score a prediction file ({"id", "generated"} per line) against a
/// reference file ({"id", "references": [...]}), matching records by id.
pub fn nlg_report_from_files(pred_path: &Path, ref_path: &Path) -> Result<NlgReport> {
    let refs_text = std::fs::read_to_string(ref_path)?;
    let mut refs: HashMap<String, Vec<String>> = HashMap::new();
    for (i, line) in refs_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RefRecord = serde_json::from_str(line)
            .map_err(|e| data_err(format!("{}:{}: {e}", ref_path.display(), i + 1)))?;
        if rec.references.is_empty() {
            return Err(data_err(format!(
                "{}:{}: record {:?} has no references",
                ref_path.display(),
                i + 1,
                rec.id
            )));
        }
        if refs.insert(rec.id.clone(), rec.references).is_some() {
            return Err(data_err(format!(
                "{}: duplicate reference id {:?}",
                ref_path.display(),
                rec.id
            )));
        }
    }
    let pred_text = std::fs::read_to_string(pred_path)?;
    let mut pairs = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (i, line) in pred_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredRecord = serde_json::from_str(line)
            .map_err(|e| data_err(format!("{}:{}: {e}", pred_path.display(), i + 1)))?;
        if seen.insert(rec.id.clone(), ()).is_some() {
            return Err(data_err(format!(
                "{}: duplicate prediction id {:?}",
                pred_path.display(),
                rec.id
            )));
        }
        let rs = refs.get(&rec.id).ok_or_else(|| {
            data_err(format!(
                "{}: prediction id {:?} has no reference record",
                pred_path.display(),
                rec.id
            ))
        })?;
        pairs.push((
            split_text(&rec.generated),
            rs.iter().map(|r| split_text(r)).collect::<Vec<_>>(),
        ));
    }
    if pairs.is_empty() {
        return Err(data_err(format!(
            "{}: no predictions to score",
            pred_path.display()
        )));
    }
    score_nlg(&pairs)
}

/// Parse the `--embedder` argument: `builtin` or an http(s) URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedderChoice {
    Builtin,
    Remote(String),
}

impl EmbedderChoice {
    pub fn parse(s: &str) -> Result<EmbedderChoice> {
        if s == "builtin" {
            Ok(EmbedderChoice::Builtin)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(EmbedderChoice::Remote(s.to_string()))
        } else {
            Err(config_err(format!(
                "embedder {s:?} is neither 'builtin' nor an http(s) URL"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LmConfig;
    use crate::rng::seeded;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    struct FixedProvider {
        map: HashMap<String, Vec<f64>>,
        scale: f64,
    }

    impl EmbeddingProvider for FixedProvider {
        fn dim(&self) -> Option<usize> {
            None
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(texts
                .iter()
                .map(|t| {
                    let raw = self.map.get(t).expect("test text registered");
                    l2_normalized(raw.iter().map(|v| v * self.scale).collect())
                })
                .collect())
        }
    }

    #[test]
    fn ranking_puts_the_identical_embedding_first() {
        let mut map = HashMap::new();
        map.insert("q".into(), vec![1.0, 0.0]);
        map.insert("other".into(), vec![0.0, 1.0]);
        map.insert("same".into(), vec![1.0, 0.0]);
        let p = FixedProvider { map, scale: 1.0 };
        let r = rank_candidates("q", &["other".into(), "same".into()], 1, None, &p).unwrap();
        assert_eq!(r.order, vec![1, 0]);
        assert_eq!(r.gt_rank(), 1);
        assert!((r.scores[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_is_invariant_to_positive_scaling_of_raw_embeddings() {
        let mut map = HashMap::new();
        map.insert("q".into(), vec![0.7, 0.3, 0.1]);
        map.insert("a".into(), vec![0.6, 0.4, 0.0]);
        map.insert("b".into(), vec![0.1, 0.9, 0.3]);
        map.insert("c".into(), vec![0.5, 0.5, 0.5]);
        let cands: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let base = rank_candidates("q", &cands, 0, None, &FixedProvider { map: map.clone(), scale: 1.0 }).unwrap();
        let scaled = rank_candidates("q", &cands, 0, None, &FixedProvider { map, scale: 7.25 }).unwrap();
        assert_eq!(base.order, scaled.order);
        for (x, y) in base.scores.iter().zip(&scaled.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_rank_the_lower_index_first() {
        assert_eq!(rank_by_scores(&[0.5, 0.8, 0.5, 0.9]), vec![3, 1, 0, 2]);
    }

    #[test]
    fn recall_and_reciprocal_rank_match_the_hand_cases() {
        let top = RankedCandidates::new(vec![0.9, 0.1, 0.2], 0, None).unwrap();
        assert_eq!(r_at(&top, 1), 1.0);
        assert_eq!(mrr(&top), 1.0);
        let second = RankedCandidates::new(vec![0.5, 0.9, 0.2], 0, None).unwrap();
        assert_eq!(second.gt_rank(), 2);
        assert_eq!(r_at(&second, 1), 0.0);
        assert_eq!(r_at(&second, 5), 1.0);
        assert_eq!(mrr(&second), 0.5);
    }

    #[test]
    fn ndcg_matches_the_worked_example_and_guards_its_edges() {
        // relevance [1, 0.5, 0]; ranking puts candidate 1 first, then 0, then 2
        let r = RankedCandidates::new(vec![0.6, 0.9, 0.1], 0, Some(vec![1.0, 0.5, 0.0])).unwrap();
        assert_eq!(r.order, vec![1, 0, 2]);
        let dcg = 0.5 / 2f64.log2() + 1.0 / 3f64.log2();
        let idcg = 1.0 / 2f64.log2() + 0.5 / 3f64.log2();
        assert!((ndcg(&r).unwrap() - dcg / idcg).abs() < 1e-12);

        let no_rel = RankedCandidates::new(vec![0.6], 0, None).unwrap();
        assert!(ndcg(&no_rel).is_err());
        let all_zero = RankedCandidates::new(vec![0.6, 0.2], 0, Some(vec![0.0, 0.0])).unwrap();
        assert_eq!(ndcg(&all_zero).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_summary_averages_over_samples() {
        let a = RankedCandidates::new(vec![0.9, 0.1], 0, Some(vec![1.0, 0.0])).unwrap();
        let b = RankedCandidates::new(vec![0.1, 0.9], 0, Some(vec![1.0, 0.0])).unwrap();
        let rep = summarize_retrieval(&[a, b], true).unwrap();
        assert_eq!(rep.samples, 2);
        assert!((rep.r_at_1 - 0.5).abs() < 1e-12);
        assert!((rep.mrr - 0.75).abs() < 1e-12);
        assert!(rep.ndcg.is_some());
        assert!(summarize_retrieval(&[], false).is_err());
    }

    #[test]
    fn builtin_embedder_returns_unit_rows_and_truncates_long_text() {
        let vocab = crate::data::synth::build_vocab();
        let lm: ToyLm<f32> = ToyLm::new(
            &mut seeded(4),
            LmConfig {
                dim: 32,
                heads: 4,
                enc_layers: 1,
                dec_layers: 1,
                vocab: vocab.len(),
                max_len: 8,
            },
        )
        .unwrap();
        let e = BuiltinEmbedder::new(&lm, &vocab);
        assert_eq!(e.dim(), Some(32));
        let long = vec!["square "; EMBED_MAX_TOKENS + 50].concat();
        let cut = vec!["square "; EMBED_MAX_TOKENS].concat();
        let out = e
            .embed(&["a red square".into(), long, cut, String::new()])
            .unwrap();
        for row in &out {
            assert_eq!(row.len(), 32);
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // truncation makes the over-long text identical to the cut one
        assert_eq!(out[1], out[2]);
        assert_ne!(out[0], out[1]);
    }

    /// Minimal scripted HTTP server: each entry is (status, body) for one
    /// connection, served in order.
    fn spawn_server(script: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for (status, body) in script {
                let (mut sock, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut tmp = [0u8; 4096];
                // read headers, then the content-length body
                let body_start = loop {
                    let n = sock.read(&mut tmp).unwrap();
                    if n == 0 {
                        break None;
                    }
                    buf.extend_from_slice(&tmp[..n]);
                    if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break Some(p + 4);
                    }
                };
                if let Some(start) = body_start {
                    let head = String::from_utf8_lossy(&buf[..start]).to_lowercase();
                    let want: usize = head
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .map(|v| v.trim().parse().unwrap())
                        .unwrap_or(0);
                    while buf.len() - start < want {
                        let n = sock.read(&mut tmp).unwrap();
                        if n == 0 {
                            break;
                        }
                        buf.extend_from_slice(&tmp[..n]);
                    }
                }
                let _ = write!(
                    sock,
                    "HTTP/1.1 {status} NA\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (format!("http://{addr}"), handle)
    }

    fn embed_body(vecs: &[Vec<f64>]) -> String {
        serde_json::json!({"embeddings": vecs, "dim": vecs[0].len()}).to_string()
    }

    #[test]
    fn remote_embedder_round_trips_and_normalizes() {
        let (url, h) = spawn_server(vec![(200, embed_body(&[vec![3.0, 4.0], vec![0.0, 2.0]]))]);
        let e = RemoteEmbedder::with_timing(&url, 0, Duration::from_millis(1), Duration::from_secs(5));
        let out = e.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(out, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
        h.join().unwrap();
    }

    #[test]
    fn remote_embedder_retries_server_errors_then_succeeds() {
        let (url, h) = spawn_server(vec![
            (500, "{}".into()),
            (503, "{}".into()),
            (200, embed_body(&[vec![1.0, 0.0]])),
        ]);
        let e = RemoteEmbedder::with_timing(&url, 3, Duration::from_millis(5), Duration::from_secs(5));
        let out = e.embed(&["a".into()]).unwrap();
        assert_eq!(out.len(), 1);
        h.join().unwrap();
    }

    #[test]
    fn remote_embedder_gives_up_with_a_provider_error_naming_the_batch() {
        let (url, h) = spawn_server(vec![(500, "{}".into()), (500, "{}".into())]);
        let e = RemoteEmbedder::with_timing(&url, 1, Duration::from_millis(5), Duration::from_secs(5));
        let err = e.embed(&["a".into(), "b".into(), "c".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let msg = err.to_string();
        assert!(msg.contains("batch of 3 texts"), "{msg}");
        assert!(msg.contains("2 attempts"), "{msg}");
        h.join().unwrap();
    }

    #[test]
    fn remote_embedder_rejects_malformed_shapes() {
        let (url, h) = spawn_server(vec![(200, embed_body(&[vec![1.0, 0.0]]))]);
        let e = RemoteEmbedder::with_timing(&url, 0, Duration::from_millis(1), Duration::from_secs(5));
        // two texts, one vector back
        let err = e.embed(&["a".into(), "b".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        h.join().unwrap();
    }

    #[test]
    fn nlg_report_self_match_saturates_every_metric() {
        let texts = [
            "a small red square moves left",
            "a large blue circle moves right",
            "a small green triangle moves up",
        ];
        let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = texts
            .iter()
            .map(|t| (split_text(t), vec![split_text(t)]))
            .collect();
        let rep = score_nlg(&pairs).unwrap();
        for b in rep.bleu {
            assert!((b - 1.0).abs() < 1e-9);
        }
        assert!((rep.rouge_l - 1.0).abs() < 1e-9);
        assert!((rep.cider - 10.0).abs() < 1e-6);
        assert!(rep.meteor > 0.99); // bounded below 1 by the chunk penalty
    }

    #[test]
    fn report_files_round_trip_and_reject_empty_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let pred = dir.path().join("pred.jsonl");
        let refs = dir.path().join("refs.jsonl");
        std::fs::write(
            &refs,
            "{\"id\":\"s1\",\"references\":[\"a red square\"]}\n{\"id\":\"s2\",\"references\":[\"a blue circle\"]}\n",
        )
        .unwrap();
        std::fs::write(
            &pred,
            "{\"id\":\"s1\",\"generated\":\"a red square\"}\n{\"id\":\"s2\",\"generated\":\"a blue circle\"}\n",
        )
        .unwrap();
        let a = nlg_report_from_files(&pred, &refs).unwrap();
        let b = nlg_report_from_files(&pred, &refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 2);
        assert!(a.table().contains("B-1"));
        assert!(a.to_json().unwrap().contains("\"cider\""));

        std::fs::write(&pred, "").unwrap();
        let err = nlg_report_from_files(&pred, &refs).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        std::fs::write(&pred, "{\"id\":\"zz\",\"generated\":\"a\"}\n").unwrap();
        assert!(nlg_report_from_files(&pred, &refs).is_err());
    }

    #[test]
    fn embedder_choice_parses_builtin_and_urls_only() {
        assert!(matches!(EmbedderChoice::parse("builtin").unwrap(), EmbedderChoice::Builtin));
        assert!(matches!(
            EmbedderChoice::parse("http://127.0.0.1:9").unwrap(),
            EmbedderChoice::Remote(_)
        ));
        let err = EmbedderChoice::parse("ftp://x").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

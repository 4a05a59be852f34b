//! Overlap metrics for generated answers: BLEU-n, ROUGE-L, exact-match
//! METEOR, and CIDEr. All operate on token lists (see
//! [`crate::data::split_text`]) and are pure functions of their inputs.

use std::collections::{HashMap, HashSet};

use crate::error::{config_err, data_err, Result};

/// F-measure weight for ROUGE-L (the dialog-benchmark convention).
pub const ROUGE_BETA_SQ: f64 = 1.2;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    if n >= 1 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    m
}

/// Geometric mean of modified n-gram precisions up to `max_n`, times the
/// brevity penalty exp(1 − r/c) when the candidate is shorter than the
/// closest reference (length ties resolved toward the shorter reference).
/// A zero precision at any order zeroes the score; no smoothing.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if max_n == 0 || max_n > 4 {
        return Err(config_err(format!("bleu order {max_n} outside 1..=4")));
    }
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(data_err("bleu needs at least one non-empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| ((rl as i64 - c as i64).abs(), rl))
        .expect("non-empty references");
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0); // candidate has no n-grams at this order
        }
        let refs: Vec<HashMap<String, usize>> =
            references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut clipped = 0usize;
        for (g, &cnt) in &cand {
            let cap = refs.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            clipped += cnt.min(cap);
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(precision * bp)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β² = [`ROUGE_BETA_SQ`].
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    ((1.0 + ROUGE_BETA_SQ) * p * r) / (r + ROUGE_BETA_SQ * p)
}

// Up to this many tokens per side the chunk count is minimized exactly
// over all maximal alignments; longer pairs fall back to the greedy
// left-to-right alignment (matches are identical either way — only the
// fragmentation penalty can differ, and only on pathological repetition).
const EXACT_ALIGN_LIMIT: usize = 12;

struct AlignSearch<'a> {
    cand: &'a [String],
    rf: &'a [String],
    // (cand index, used-reference bitmask, chunk-continuation slot)
    memo: HashMap<(usize, u32, usize), (usize, usize)>,
}

impl<'a> AlignSearch<'a> {
    /// Best (matches, -chunks) achievable from `ci` onward. `cont` is the
    /// reference index that would extend the current chunk, or rf.len()+1
    /// when no extension is possible.
    fn best(&mut self, ci: usize, used: u32, cont: usize) -> (usize, usize) {
        if ci == self.cand.len() {
            return (0, 0);
        }
        if let Some(&v) = self.memo.get(&(ci, used, cont)) {
            return v;
        }
        let sentinel = self.rf.len() + 1;
        // leave cand[ci] unmatched
        let (m0, c0) = self.best(ci + 1, used, sentinel);
        let mut best = (m0, c0);
        for (rj, w) in self.rf.iter().enumerate() {
            if *w != self.cand[ci] || used & (1 << rj) != 0 {
                continue;
            }
            let newc = usize::from(rj != cont);
            let (m, c) = self.best(ci + 1, used | (1 << rj), rj + 1);
            let cand = (m + 1, c + newc);
            // more matches wins; equal matches prefer fewer chunks
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        self.memo.insert((ci, used, cont), best);
        best
    }
}

fn align_greedy(cand: &[String], rf: &[String]) -> (usize, usize) {
    let mut used = vec![false; rf.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut cont: Option<usize> = None; // ref index extending the chunk
    for w in cand {
        let pick = match cont {
            Some(rj) if rj < rf.len() && !used[rj] && rf[rj] == *w => Some(rj),
            _ => rf.iter().enumerate().position(|(rj, r)| r == w && !used[rj]),
        };
        match pick {
            Some(rj) => {
                used[rj] = true;
                matches += 1;
                if cont != Some(rj) {
                    chunks += 1;
                }
                cont = Some(rj + 1);
            }
            None => cont = None,
        }
    }
    (matches, chunks)
}

fn align(cand: &[String], rf: &[String]) -> (usize, usize) {
    if cand.len() <= EXACT_ALIGN_LIMIT && rf.len() <= EXACT_ALIGN_LIMIT {
        let mut s = AlignSearch {
            cand,
            rf,
            memo: HashMap::new(),
        };
        s.best(0, 0, rf.len() + 1)
    } else {
        align_greedy(cand, rf)
    }
}

/// Exact-match METEOR: unigram alignment maximizing matches and then
/// minimizing chunks; F = 10PR/(R+9P); fragmentation penalty
/// 0.5·(chunks/matches)³. No stemming or synonymy.
pub fn meteor_exact(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = align(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

fn tfidf_vec(tokens: &[String], n: usize, df: &HashMap<String, usize>, n_docs: usize) -> HashMap<String, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, cnt)| {
            let d = df.get(&g).copied().unwrap_or(0).max(1);
            let idf = (n_docs as f64 / d as f64).ln();
            (g, cnt as f64 * idf)
        })
        .collect()
}

fn sparse_cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Consensus metric: mean over n = 1..4 of 10 × the average cosine between
/// tf-idf n-gram vectors of the candidate and each of its references,
/// averaged over samples. Document frequencies come from the reference
/// sets themselves (one document per sample), idf = ln(N/df) with df
/// clipped to ≥ 1. A single-document corpus has zero idf everywhere and a
/// degenerate score; warned, not an error.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(data_err("consensus metric needs at least one sample"));
    }
    if candidates.len() != references.len() {
        return Err(data_err(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(data_err("every sample needs at least one reference"));
    }
    let n_docs = references.len();
    if n_docs < 2 {
        log::warn!("idf over a single reference document is zero everywhere; the consensus score degenerates");
    }
    let mut df: Vec<HashMap<String, usize>> = vec![HashMap::new(); 4];
    for refs in references {
        for n in 1..=4usize {
            let mut seen: HashSet<String> = HashSet::new();
            for r in refs {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let mut over_n = 0.0;
        for n in 1..=4usize {
            let cv = tfidf_vec(cand, n, &df[n - 1], n_docs);
            let avg = refs
                .iter()
                .map(|r| sparse_cosine(&cv, &tfidf_vec(r, n, &df[n - 1], n_docs)))
                .sum::<f64>()
                / refs.len() as f64;
            over_n += 10.0 * avg;
        }
        total += over_n / 4.0;
    }
    Ok(total / n_docs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_text;

    fn toks(s: &str) -> Vec<String> {
        split_text(s)
    }

    #[test]
    fn bleu_rewards_a_self_match_fully() {
        let c = toks("a small red square moves left");
        for n in 1..=4 {
            assert!((bleu(&c, &[c.clone()], n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_one_matches_the_hand_case() {
        // precision 1, brevity exp(1 - 3/2)
        let b = bleu(&toks("the cat"), &[toks("the cat sat")], 1).unwrap();
        assert!((b - 0.6065).abs() < 1e-4, "got {b}");
    }

    #[test]
    fn bleu_is_zero_on_disjoint_unigrams_and_empty_candidates() {
        assert_eq!(bleu(&toks("x y"), &[toks("a b")], 1).unwrap(), 0.0);
        assert_eq!(bleu(&[], &[toks("a b")], 4).unwrap(), 0.0);
        assert!(bleu(&toks("a"), &[], 1).is_err());
        assert!(bleu(&toks("a"), &[toks("a")], 5).is_err());
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // "the the the" vs "the cat": clipped count 1 of 3
        let b = bleu(&toks("the the the"), &[toks("the cat")], 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_matches_the_formula_on_the_worked_example() {
        // LCS("a b c", "a c") = 2; P = 2/3, R = 1
        let p: f64 = 2.0 / 3.0;
        let r: f64 = 1.0;
        let want = (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p);
        let got = rouge_l(&toks("a b c"), &toks("a c"));
        assert!((got - want).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
        assert!((rouge_l(&toks("a b c"), &toks("a b c")) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_penalizes_the_swapped_pair_to_half() {
        // two matches in two chunks: F = 1, penalty = 0.5
        let m = meteor_exact(&toks("b a"), &toks("a b"));
        assert!((m - 0.5).abs() < 1e-12, "got {m}");
    }

    #[test]
    fn meteor_self_match_leaves_only_the_single_chunk_penalty() {
        let c = toks("a small red square moves left");
        let len = c.len() as f64;
        let want = 1.0 - 0.5 * (1.0 / len).powi(3);
        assert!((meteor_exact(&c, &c) - want).abs() < 1e-12);
        assert_eq!(meteor_exact(&toks("x"), &toks("y")), 0.0);
        assert_eq!(meteor_exact(&[], &toks("y")), 0.0);
    }

    #[test]
    fn meteor_alignment_minimizes_chunks_where_greedy_would_not() {
        // candidate "a b" against "x a y a b": a greedy scan pins "a" to the
        // first occurrence (two chunks); the exact search keeps one chunk.
        let (m, ch) = align(&toks("a b"), &toks("x a y a b"));
        assert_eq!((m, ch), (2, 1));
        let (gm, gch) = align_greedy(&toks("a b"), &toks("x a y a b"));
        assert_eq!((gm, gch), (2, 2));
    }

    #[test]
    fn meteor_exact_and_greedy_agree_on_match_counts() {
        let cases = [
            ("a b c a", "a a b c"),
            ("the red square moves", "the square moves left"),
            ("a a a", "a a"),
        ];
        for (c, r) in cases {
            let (m1, _) = align(&toks(c), &toks(r));
            let (m2, _) = align_greedy(&toks(c), &toks(r));
            assert_eq!(m1, m2, "{c} vs {r}");
        }
    }

    #[test]
    fn cider_self_match_on_distinct_references_is_ten() {
        let texts = [
            "a small red square moves left",
            "a large blue circle moves right",
            "a small green triangle moves up",
            "a large yellow square moves down",
        ];
        let cands: Vec<Vec<String>> = texts.iter().map(|t| toks(t)).collect();
        let refs: Vec<Vec<Vec<String>>> = texts.iter().map(|t| vec![toks(t)]).collect();
        let c = cider(&cands, &refs).unwrap();
        assert!((c - 10.0).abs() < 1e-6, "got {c}");
    }

    #[test]
    fn cider_is_zero_on_disjoint_ngrams() {
        let cands = vec![toks("p q r s t"), toks("u v w x y")];
        let refs = vec![vec![toks("a b c d e")], vec![toks("f g h i j")]];
        assert_eq!(cider(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn cider_degenerates_to_zero_on_a_single_document() {
        // one reference document: every idf is ln(1) = 0
        let cands = vec![toks("a b c")];
        let refs = vec![vec![toks("a b c")]];
        assert_eq!(cider(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn cider_rejects_mismatched_or_empty_inputs() {
        assert!(cider(&[], &[]).is_err());
        assert!(cider(&[toks("a")], &[]).is_err());
        assert!(cider(&[toks("a")], &[vec![]]).is_err());
    }
}

//! Dataset plumbing: the fixed vocabulary and tokenizer, JSONL sample
//! schemas, raw visual payload files, and batching.
//!
//! Visual payloads are a one-line ASCII header "F C H W" followed by raw
//! little-endian f32 pixels. Text formats are JSONL, one object per line.

pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::vision::sample_frames;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const CLS: u32 = 5;

pub const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<mask>", "<cls>"];

/// Lowercase, split on whitespace, detach punctuation into single-char
/// tokens. Total function: never fails.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut run = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                run.push(ch);
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(ch.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds from the non-reserved word list; reserved ids come first.
    pub fn new(words: &[&str]) -> Result<Vocabulary> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words.iter().map(|s| s.to_string()));
        let mut token_to_id = HashMap::new();
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(data_err(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Ids of real words, excluding the reserved block. Used to draw
    /// random replacements during masking.
    pub fn word_range(&self) -> std::ops::Range<u32> {
        RESERVED.len() as u32..self.len() as u32
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_text(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined surface forms; end-of-sequence and padding dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != EOS && id != PAD && id != BOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.id_to_token {
            body.push_str(tok);
            body.push('\n');
        }
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(data_err(format!("vocabulary {path:?} too short")));
        }
        for (i, expect) in RESERVED.iter().enumerate() {
            if lines[i] != *expect {
                return Err(data_err(format!(
                    "vocabulary {path:?} line {i} is {:?}, expected reserved {expect:?}",
                    lines[i]
                )));
            }
        }
        Vocabulary::new(&lines[RESERVED.len()..])
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionRecord {
    id: String,
    visual: String,
    is_video: bool,
    caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogRecord {
    id: String,
    visual: String,
    is_video: bool,
    caption: String,
    history: Vec<(String, String)>,
    question: String,
    answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relevance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Caption,
    Dialog,
}

/// One loaded sample, unified across both schemas. Dialog-only fields are
/// `None` for captions.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub visual: PathBuf,
    pub is_video: bool,
    pub caption: String,
    pub history: Vec<(String, String)>,
    pub question: Option<String>,
    pub answer: Option<String>,
    pub candidates: Option<Vec<String>>,
    pub gt_index: Option<usize>,
    pub relevance: Option<Vec<f64>>,
}

impl Sample {
    /// Serialized dialog history plus the current question.
    pub fn context(&self) -> Option<String> {
        let q = self.question.as_ref()?;
        let mut s = String::new();
        for (hq, ha) in &self.history {
            s.push_str(&format!("question: {hq} answer: {ha} "));
        }
        s.push_str(&format!("question: {q}"));
        Some(s)
    }
}

fn at_line(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    data_err(format!("{}:{line}: {msg}", path.display()))
}

pub fn load_jsonl(path: &Path, schema: Schema) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = match schema {
            Schema::Caption => {
                let r: CaptionRecord =
                    serde_json::from_str(line).map_err(|e| at_line(path, lineno, e))?;
                if r.caption.trim().is_empty() {
                    return Err(at_line(path, lineno, "field caption: empty"));
                }
                Sample {
                    id: r.id,
                    visual: base.join(&r.visual),
                    is_video: r.is_video,
                    caption: r.caption,
                    history: Vec::new(),
                    question: None,
                    answer: None,
                    candidates: None,
                    gt_index: None,
                    relevance: None,
                }
            }
            Schema::Dialog => {
                let r: DialogRecord =
                    serde_json::from_str(line).map_err(|e| at_line(path, lineno, e))?;
                if let Some(c) = &r.candidates {
                    if c.len() != 100 {
                        return Err(at_line(
                            path,
                            lineno,
                            format!("field candidates: {} entries, must be 100", c.len()),
                        ));
                    }
                    let gt = r.gt_index.ok_or_else(|| {
                        at_line(path, lineno, "field gt_index: required with candidates")
                    })?;
                    if gt >= c.len() || c[gt] != r.answer {
                        return Err(at_line(
                            path,
                            lineno,
                            "field gt_index: does not point at the answer",
                        ));
                    }
                    if let Some(rel) = &r.relevance {
                        if rel.len() != c.len() {
                            return Err(at_line(
                                path,
                                lineno,
                                "field relevance: length differs from candidates",
                            ));
                        }
                        if rel.iter().any(|v| !(0.0..=1.0).contains(v)) {
                            return Err(at_line(path, lineno, "field relevance: outside [0,1]"));
                        }
                    }
                }
                Sample {
                    id: r.id,
                    visual: base.join(&r.visual),
                    is_video: r.is_video,
                    caption: r.caption,
                    history: r.history,
                    question: Some(r.question),
                    answer: Some(r.answer),
                    candidates: r.candidates,
                    gt_index: r.gt_index,
                    relevance: r.relevance,
                }
            }
        };
        out.push(sample);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, samples: &[Sample], schema: Schema) -> Result<()> {
    let mut body = String::new();
    for s in samples {
        let visual = s.visual.to_string_lossy().into_owned();
        let line = match schema {
            Schema::Caption => serde_json::to_string(&CaptionRecord {
                id: s.id.clone(),
                visual,
                is_video: s.is_video,
                caption: s.caption.clone(),
            })?,
            Schema::Dialog => serde_json::to_string(&DialogRecord {
                id: s.id.clone(),
                visual,
                is_video: s.is_video,
                caption: s.caption.clone(),
                history: s.history.clone(),
                question: s.question.clone().unwrap_or_default(),
                answer: s.answer.clone().unwrap_or_default(),
                candidates: s.candidates.clone(),
                gt_index: s.gt_index,
                relevance: s.relevance.clone(),
            })?,
        };
        body.push_str(&line);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Raw pixel clip: `frames * channels * height * width` f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameSet {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> FrameSet {
        FrameSet {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    /// New set holding the given frame indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<FrameSet> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.frames {
                return Err(data_err(format!("frame {i} beyond clip of {}", self.frames)));
            }
            data.extend_from_slice(self.frame(i));
        }
        Ok(FrameSet {
            frames: indices.len(),
            data,
            ..*self
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(
            f,
            "{} {} {} {}",
            self.frames, self.channels, self.height, self.width
        )?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<FrameSet> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| data_err(format!("{}: bad header: {e}", path.display())))?;
        if dims.len() != 4 {
            return Err(data_err(format!(
                "{}: header needs 4 fields F C H W",
                path.display()
            )));
        }
        let (frames, channels, height, width) = (dims[0], dims[1], dims[2], dims[3]);
        let n = frames * channels * height * width;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(data_err(format!(
                "{}: payload {} bytes, header implies {}",
                path.display(),
                bytes.len(),
                n * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FrameSet {
            frames,
            channels,
            height,
            width,
            data,
        })
    }
}

/// One batch entry: frame-sampled pixels plus tokenized text fields,
/// padded to the batch maxima. `*_len` give the unpadded lengths.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub id: String,
    pub frames: FrameSet,
    pub caption: Vec<u32>,
    pub caption_len: usize,
    pub context: Vec<u32>,
    pub context_len: usize,
    pub answer: Vec<u32>, // terminated by EOS, then padding
    pub answer_text: String,
    pub candidates: Option<Vec<String>>,
    pub gt_index: Option<usize>,
    pub relevance: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub is_video: bool,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn caption(&self, i: usize) -> &[u32] {
        &self.items[i].caption[..self.items[i].caption_len]
    }

    pub fn context(&self, i: usize) -> &[u32] {
        &self.items[i].context[..self.items[i].context_len]
    }
}

fn pad_to(ids: &mut Vec<u32>, len: usize) {
    while ids.len() < len {
        ids.push(PAD);
    }
}

fn build_batch(
    group: &[&Sample],
    vocab: &Vocabulary,
    frames_per_clip: usize,
) -> Result<Batch> {
    let is_video = group[0].is_video;
    if group.iter().any(|s| s.is_video != is_video) {
        return Err(data_err("batch mixes videos and images"));
    }
    let mut items = Vec::with_capacity(group.len());
    for s in group {
        let raw = FrameSet::read(&s.visual)?;
        let frames = if s.is_video {
            let idx = sample_frames(raw.frames, frames_per_clip)?;
            raw.select(&idx)?
        } else {
            if raw.frames != 1 {
                return Err(data_err(format!(
                    "image {} carries {} frames",
                    s.id, raw.frames
                )));
            }
            raw
        };
        let caption = vocab.tokenize(&s.caption);
        let context = s.context().map(|c| vocab.tokenize(&c)).unwrap_or_default();
        let mut answer = s
            .answer
            .as_ref()
            .map(|a| vocab.tokenize(a))
            .unwrap_or_default();
        if s.answer.is_some() {
            answer.push(EOS);
        }
        items.push(BatchItem {
            id: s.id.clone(),
            frames,
            caption_len: caption.len(),
            caption,
            context_len: context.len(),
            context,
            answer,
            answer_text: s.answer.clone().unwrap_or_default(),
            candidates: s.candidates.clone(),
            gt_index: s.gt_index,
            relevance: s.relevance.clone(),
        });
    }
    let cap_max = items.iter().map(|i| i.caption_len).max().unwrap_or(0);
    let ctx_max = items.iter().map(|i| i.context_len).max().unwrap_or(0);
    let ans_max = items.iter().map(|i| i.answer.len()).max().unwrap_or(0);
    for item in &mut items {
        pad_to(&mut item.caption, cap_max);
        pad_to(&mut item.context, ctx_max);
        pad_to(&mut item.answer, ans_max);
    }
    Ok(Batch { is_video, items })
}

/// Chunks samples into uniform-modality batches in `order`, alternating
/// video and image batches. Stage-1 mode drops size-1 remainders, since
/// the contrastive losses need in-batch negatives.
pub fn make_batches(
    samples: &[Sample],
    order: &[usize],
    vocab: &Vocabulary,
    batch_size: usize,
    frames_per_clip: usize,
    stage1: bool,
) -> Result<Vec<Batch>> {
    if stage1 && batch_size < 2 {
        return Err(config_err("stage-1 batches need at least 2 samples"));
    }
    if batch_size == 0 {
        return Err(config_err("batch size must be positive"));
    }
    let mut videos = Vec::new();
    let mut images = Vec::new();
    for &i in order {
        let s = samples
            .get(i)
            .ok_or_else(|| data_err(format!("batch order index {i} out of range")))?;
        if s.is_video {
            videos.push(s);
        } else {
            images.push(s);
        }
    }
    let chunk = |group: Vec<&Sample>| -> Result<Vec<Batch>> {
        let mut out = Vec::new();
        for g in group.chunks(batch_size) {
            if stage1 && g.len() < 2 {
                log::warn!("dropping a trailing batch of 1; contrastive losses need 2");
                continue;
            }
            out.push(build_batch(g, vocab, frames_per_clip)?);
        }
        Ok(out)
    };
    let vb = chunk(videos)?;
    let ib = chunk(images)?;
    // alternate modalities so both train "simultaneously"
    let mut out = Vec::with_capacity(vb.len() + ib.len());
    let mut vi = vb.into_iter();
    let mut ii = ib.into_iter();
    loop {
        match (vi.next(), ii.next()) {
            (None, None) => break,
            (v, i) => {
                out.extend(v);
                out.extend(i);
            }
        }
    }
    Ok(out)
}

/// Deterministic permutation of `0..n` from the given stream.
pub fn shuffle_indices(n: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

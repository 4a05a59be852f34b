//! Synthetic desk-scale corpus: colored shapes drifting over a black
//! background, with programmatically true captions, QA rounds, and graded
//! candidate lists. Everything is a pure function of the seed, so two runs
//! write byte-identical files.
//!
//! The verifier re-derives color, shape, and motion from the rendered
//! pixels alone and checks them against the recorded answers, so the
//! ground truth is anchored to the frames rather than to the templates.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{load_jsonl, save_jsonl, FrameSet, Sample, Schema, Vocabulary};
use crate::error::{config_err, data_err, Result};
use crate::rng::seeded;

pub const IMAGE_SIZE: usize = 56;
pub const CHANNELS: usize = 3;
pub const CLIP_FRAMES: usize = 8;

const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
];
const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];
const SIZES: [(&str, i32); 2] = [("small", 6), ("large", 9)];

/// The canonical word list. Combined with the 6 reserved tokens the
/// vocabulary holds exactly 64 entries, which keeps the uniform-logit
/// losses at ln 64.
const WORDS: [&str; 58] = [
    "a", "the", "is", "it", "what", "which", "way", "does", "color", "shape", "moves", "moving",
    "move", "question", "answer", ".", "?", ":", ",", "red", "green", "blue", "yellow", "square",
    "circle", "triangle", "left", "right", "up", "down", "small", "large", "there", "this",
    "that", "yes", "no", "not", "still", "of", "in", "on", "background", "dark", "scene", "with",
    "and", "to", "toward", "side", "slowly", "quickly", "stays", "drifts", "bright", "shows",
    "one", "picture",
];

pub fn build_vocab() -> Vocabulary {
    Vocabulary::new(&WORDS).expect("canonical word list has no duplicates")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Stage1,
    Stage2,
    Stage3Video,
    Stage3Image,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<SynthKind> {
        match s {
            "stage1" => Ok(SynthKind::Stage1),
            "stage2" => Ok(SynthKind::Stage2),
            "stage3-video" => Ok(SynthKind::Stage3Video),
            "stage3-image" => Ok(SynthKind::Stage3Image),
            other => Err(config_err(format!(
                "unknown corpus kind {other:?}; use stage1|stage2|stage3-video|stage3-image"
            ))),
        }
    }

    pub fn schema(self) -> Schema {
        match self {
            SynthKind::Stage1 => Schema::Caption,
            _ => Schema::Dialog,
        }
    }

    fn is_video(self) -> bool {
        !matches!(self, SynthKind::Stage3Image)
    }

    fn with_candidates(self) -> bool {
        matches!(self, SynthKind::Stage3Video | SynthKind::Stage3Image)
    }
}

#[derive(Debug, Clone)]
struct Scene {
    color: usize,     // into COLORS
    shape: usize,     // into SHAPES
    direction: usize, // into DIRECTIONS; meaningful for videos only
    size: usize,      // into SIZES
    is_video: bool,
}

impl Scene {
    fn draw(rng: &mut ChaCha12Rng, is_video: bool) -> Scene {
        Scene {
            color: rng.random_range(0..COLORS.len()),
            shape: rng.random_range(0..SHAPES.len()),
            direction: rng.random_range(0..DIRECTIONS.len()),
            size: rng.random_range(0..SIZES.len()),
            is_video,
        }
    }

    fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    fn direction_name(&self) -> &'static str {
        DIRECTIONS[self.direction]
    }

    fn caption(&self) -> String {
        let (size, _) = SIZES[self.size];
        if self.is_video {
            format!(
                "a {size} {} {} moves {}",
                self.color_name(),
                self.shape_name(),
                self.direction_name()
            )
        } else {
            format!("a {size} {} {}", self.color_name(), self.shape_name())
        }
    }

    /// All QA rounds this scene supports, in a fixed order.
    fn rounds(&self) -> Vec<(String, String)> {
        let mut r = vec![
            (
                format!("what color is the {}?", self.shape_name()),
                self.color_name().to_string(),
            ),
            ("what shape is it?".to_string(), format!("a {}", self.shape_name())),
        ];
        if self.is_video {
            r.push((
                "which way does it move?".to_string(),
                self.direction_name().to_string(),
            ));
        } else {
            r.push(("is it moving?".to_string(), "no".to_string()));
        }
        r
    }

    fn render(&self) -> FrameSet {
        let frames = if self.is_video { CLIP_FRAMES } else { 1 };
        let mut out = FrameSet::zeros(frames, CHANNELS, IMAGE_SIZE, IMAGE_SIZE);
        let half = SIZES[self.size].1;
        let rgb = COLORS[self.color].1;
        // 2 px/frame drift; start offset keeps every frame in bounds
        let (dx, dy): (i32, i32) = match DIRECTIONS[self.direction] {
            "left" => (-2, 0),
            "right" => (2, 0),
            "up" => (0, -2),
            _ => (0, 2),
        };
        let steps = frames as i32 - 1;
        let c = IMAGE_SIZE as i32 / 2;
        let (mut cx, mut cy) = if self.is_video {
            (c - dx * steps / 2, c - dy * steps / 2)
        } else {
            (c, c)
        };
        for f in 0..frames {
            let buf = out.frame_mut(f);
            for y in 0..IMAGE_SIZE as i32 {
                for x in 0..IMAGE_SIZE as i32 {
                    let (ox, oy) = (x - cx, y - cy);
                    let inside = match SHAPES[self.shape] {
                        "square" => ox.abs() <= half && oy.abs() <= half,
                        "circle" => ox * ox + oy * oy <= half * half,
                        // upward-pointing: apex at -half, base at +half
                        _ => oy >= -half && oy <= half && 2 * ox.abs() <= oy + half,
                    };
                    if inside {
                        for ch in 0..CHANNELS {
                            buf[ch * IMAGE_SIZE * IMAGE_SIZE + (y as usize) * IMAGE_SIZE + x as usize] =
                                rgb[ch];
                        }
                    }
                }
            }
            cx += dx;
            cy += dy;
        }
        out
    }
}

/// Distractor pool: every template instantiation not equal to the gold
/// answer or the paraphrase, in deterministic order.
fn distractors(gold: &str, paraphrase: &str) -> Vec<String> {
    let mut pool = Vec::new();
    for (c, _) in COLORS {
        pool.push(c.to_string());
    }
    for s in SHAPES {
        pool.push(format!("a {s}"));
    }
    for d in DIRECTIONS {
        pool.push(d.to_string());
        pool.push(format!("it moves {d}"));
        pool.push(format!("it drifts {d} slowly"));
    }
    for s in SHAPES {
        for (c, _) in COLORS {
            pool.push(format!("the {s} is {c}"));
            pool.push(format!("this scene shows a {c} {s}"));
            for d in DIRECTIONS {
                pool.push(format!("the {c} {s} moves {d}"));
            }
        }
    }
    for (sz, _) in SIZES {
        for (c, _) in COLORS {
            for s in SHAPES {
                pool.push(format!("a {sz} {c} {s}"));
            }
        }
    }
    pool.extend(
        [
            "yes",
            "no",
            "it is not moving",
            "it stays still",
            "a dark scene",
            "the background is dark",
            "the background is bright",
            "one bright picture",
            "it moves to the side",
            "it drifts toward the side",
        ]
        .map(String::from),
    );
    let mut seen = std::collections::BTreeSet::new();
    pool.retain(|s| s != gold && s != paraphrase && seen.insert(s.clone()));
    pool
}

fn paraphrase_for(scene: &Scene, answer: &str) -> String {
    if answer == scene.color_name() {
        format!("the {} is {}", scene.shape_name(), scene.color_name())
    } else if answer == scene.direction_name() {
        format!("it moves {}", scene.direction_name())
    } else if answer == "no" {
        "it is not moving".to_string()
    } else {
        format!("it is a {}", scene.shape_name())
    }
}

fn candidates_for(
    scene: &Scene,
    answer: &str,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<String>, usize, Vec<f64>)> {
    let paraphrase = paraphrase_for(scene, answer);
    let pool = distractors(answer, &paraphrase);
    if pool.len() < 98 {
        return Err(data_err(format!("distractor pool of {} is too small", pool.len())));
    }
    let mut picked: Vec<String> = pool
        .choose_multiple(rng, 98)
        .cloned()
        .collect();
    picked.push(answer.to_string());
    picked.push(paraphrase.clone());
    picked.shuffle(rng);
    let gt_index = picked.iter().position(|c| c == answer).expect("gold present");
    let relevance = picked
        .iter()
        .map(|c| {
            if c == answer {
                1.0
            } else if *c == paraphrase {
                0.5
            } else {
                0.0
            }
        })
        .collect();
    Ok((picked, gt_index, relevance))
}

/// Writes `data.jsonl`, `visuals/*.bin`, and `vocab.txt` under `out`.
pub fn synth_corpus(seed: u64, n: usize, kind: SynthKind, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(config_err("corpus size must be at least 1"));
    }
    let mut rng = seeded(seed);
    fs::create_dir_all(out.join("visuals"))?;
    let vocab = build_vocab();
    vocab.save(&out.join("vocab.txt"))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let scene = Scene::draw(&mut rng, kind.is_video());
        let id = format!("s{i:04}");
        let rel = format!("visuals/{id}.bin");
        scene.render().write(&out.join(&rel))?;
        let rounds = scene.rounds();
        let sample = match kind {
            SynthKind::Stage1 => Sample {
                id,
                visual: rel.into(),
                is_video: scene.is_video,
                caption: scene.caption(),
                history: Vec::new(),
                question: None,
                answer: None,
                candidates: None,
                gt_index: None,
                relevance: None,
            },
            _ => {
                let k = rng.random_range(0..rounds.len());
                let history = rounds[..k].to_vec();
                let (question, answer) = rounds[k].clone();
                let (candidates, gt_index, relevance) = if kind.with_candidates() {
                    let (c, g, r) = candidates_for(&scene, &answer, &mut rng)?;
                    (Some(c), Some(g), Some(r))
                } else {
                    (None, None, None)
                };
                Sample {
                    id,
                    visual: rel.into(),
                    is_video: scene.is_video,
                    caption: scene.caption(),
                    history,
                    question: Some(question),
                    answer: Some(answer),
                    candidates,
                    gt_index,
                    relevance,
                }
            }
        };
        samples.push(sample);
    }
    save_jsonl(&out.join("data.jsonl"), &samples, kind.schema())
}

fn derive_color(frame: &[f32]) -> Result<&'static str> {
    let pix = IMAGE_SIZE * IMAGE_SIZE;
    for i in 0..pix {
        let rgb = [frame[i], frame[pix + i], frame[2 * pix + i]];
        if rgb != [0.0, 0.0, 0.0] {
            return COLORS
                .iter()
                .find(|(_, c)| *c == rgb)
                .map(|(name, _)| *name)
                .ok_or_else(|| data_err(format!("pixel color {rgb:?} not in the palette")));
        }
    }
    Err(data_err("frame is entirely black"))
}

fn shape_stats(frame: &[f32]) -> Result<(f64, f64, f64)> {
    // centroid x, centroid y, fill ratio of the bounding box
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let pix = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let i = y * IMAGE_SIZE + x;
            if frame[i] != 0.0 || frame[pix + i] != 0.0 || frame[2 * pix + i] != 0.0 {
                n += 1;
                sx += x as f64;
                sy += y as f64;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if n == 0 {
        return Err(data_err("frame is entirely black"));
    }
    let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    Ok((sx / n as f64, sy / n as f64, n as f64 / area))
}

fn derive_shape(fill: f64) -> &'static str {
    // square fills its box, circle ~pi/4, triangle ~1/2
    let refs = [("square", 1.0), ("circle", std::f64::consts::PI / 4.0), ("triangle", 0.5)];
    refs.iter()
        .min_by(|a, b| (a.1 - fill).abs().partial_cmp(&(b.1 - fill).abs()).unwrap())
        .unwrap()
        .0
}

fn derive_direction(first: &[f32], last: &[f32]) -> Result<&'static str> {
    let (x0, y0, _) = shape_stats(first)?;
    let (x1, y1, _) = shape_stats(last)?;
    let (dx, dy) = (x1 - x0, y1 - y0);
    Ok(if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if dy < 0.0 {
        "up"
    } else {
        "down"
    })
}

/// Re-derives every answer from the rendered pixels and cross-checks the
/// recorded QA pairs and caption. Fails on the first inconsistency.
pub fn verify_corpus(dir: &Path, kind: SynthKind) -> Result<()> {
    let samples = load_jsonl(&dir.join("data.jsonl"), kind.schema())?;
    for s in &samples {
        let frames = FrameSet::read(&s.visual)?;
        let color = derive_color(frames.frame(0))?;
        let (_, _, fill) = shape_stats(frames.frame(0))?;
        let shape = derive_shape(fill);
        if !s.caption.contains(color) || !s.caption.contains(shape) {
            return Err(data_err(format!(
                "{}: caption {:?} disagrees with rendered {color} {shape}",
                s.id, s.caption
            )));
        }
        let mut qa: Vec<(String, String)> = s.history.clone();
        if let (Some(q), Some(a)) = (&s.question, &s.answer) {
            qa.push((q.clone(), a.clone()));
        }
        for (q, a) in &qa {
            let expect = if q.contains("color") {
                Some(color.to_string())
            } else if q.contains("what shape") {
                Some(format!("a {shape}"))
            } else if q.contains("which way") {
                Some(derive_direction(frames.frame(0), frames.frame(frames.frames - 1))?.to_string())
            } else {
                None // moving/other templates carry no pixel-checkable claim
            };
            if let Some(e) = expect {
                if *a != e {
                    return Err(data_err(format!(
                        "{}: answer {a:?} to {q:?} but pixels say {e:?}",
                        s.id
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_has_exactly_64_tokens_and_covers_all_templates() {
        let v = build_vocab();
        assert_eq!(v.len(), 64);
        let mut rng = seeded(3);
        for is_video in [true, false] {
            for _ in 0..40 {
                let scene = Scene::draw(&mut rng, is_video);
                let mut text = scene.caption();
                for (q, a) in scene.rounds() {
                    text.push_str(&format!(" question: {q} answer: {a}"));
                }
                let ids = v.tokenize(&text);
                assert!(
                    !ids.contains(&super::super::UNK),
                    "template produced an OOV token: {text}"
                );
            }
        }
    }

    #[test]
    fn same_seed_writes_byte_identical_corpora() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_corpus(11, 4, SynthKind::Stage3Video, d1.path()).unwrap();
        synth_corpus(11, 4, SynthKind::Stage3Video, d2.path()).unwrap();
        for name in ["data.jsonl", "vocab.txt", "visuals/s0000.bin", "visuals/s0003.bin"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        let d3 = tempfile::tempdir().unwrap();
        synth_corpus(12, 4, SynthKind::Stage3Video, d3.path()).unwrap();
        assert_ne!(
            fs::read(d1.path().join("data.jsonl")).unwrap(),
            fs::read(d3.path().join("data.jsonl")).unwrap()
        );
    }

    #[test]
    fn stage1_uses_caption_schema_only() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(5, 3, SynthKind::Stage1, dir.path()).unwrap();
        let samples = load_jsonl(&dir.path().join("data.jsonl"), Schema::Caption).unwrap();
        assert_eq!(samples.len(), 3);
        assert!(samples.iter().all(|s| s.question.is_none()));
        let raw = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
        assert!(!raw.contains("question"));
    }

    #[test]
    fn rendered_pixels_back_the_recorded_answers() {
        for kind in [SynthKind::Stage1, SynthKind::Stage2, SynthKind::Stage3Video, SynthKind::Stage3Image] {
            let dir = tempfile::tempdir().unwrap();
            synth_corpus(17, 6, kind, dir.path()).unwrap();
            verify_corpus(dir.path(), kind).unwrap();
        }
    }

    #[test]
    fn verifier_catches_a_doctored_answer() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(19, 8, SynthKind::Stage2, dir.path()).unwrap();
        let path = dir.path().join("data.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        // flip one color answer to a different palette word
        let mut doctored_any = false;
        let lines: Vec<String> = text
            .lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                let ans = v["answer"].as_str().unwrap().to_string();
                if !doctored_any {
                    if let Some(pos) = COLORS.iter().position(|(c, _)| *c == ans) {
                        v["answer"] = COLORS[(pos + 1) % COLORS.len()].0.into();
                        doctored_any = true;
                    }
                }
                v.to_string()
            })
            .collect();
        assert!(doctored_any, "corpus had no color answers to doctor");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(verify_corpus(dir.path(), SynthKind::Stage2).is_err());
    }

    #[test]
    fn candidate_lists_are_valid_and_graded() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(23, 5, SynthKind::Stage3Image, dir.path()).unwrap();
        let samples = load_jsonl(&dir.path().join("data.jsonl"), Schema::Dialog).unwrap();
        for s in samples {
            let c = s.candidates.unwrap();
            let rel = s.relevance.unwrap();
            let gt = s.gt_index.unwrap();
            assert_eq!(c.len(), 100);
            assert_eq!(c[gt], s.answer.unwrap());
            assert_eq!(rel[gt], 1.0);
            assert_eq!(rel.iter().filter(|&&r| r == 1.0).count(), 1);
            assert_eq!(rel.iter().filter(|&&r| r == 0.5).count(), 1);
            // unique entries
            let set: std::collections::BTreeSet<&String> = c.iter().collect();
            assert_eq!(set.len(), 100);
            assert!(!s.is_video);
        }
    }

    #[test]
    fn clips_have_eight_frames_and_images_one() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(29, 2, SynthKind::Stage2, dir.path()).unwrap();
        let f = FrameSet::read(&dir.path().join("visuals/s0000.bin")).unwrap();
        assert_eq!((f.frames, f.channels, f.height, f.width), (CLIP_FRAMES, 3, 56, 56));
        let dir2 = tempfile::tempdir().unwrap();
        synth_corpus(29, 2, SynthKind::Stage3Image, dir2.path()).unwrap();
        let f = FrameSet::read(&dir2.path().join("visuals/s0000.bin")).unwrap();
        assert_eq!(f.frames, 1);
    }
}

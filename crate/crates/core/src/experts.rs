//! The N-layer multimodal expert stack: shared self-attention over the
//! concatenated streams, per-stream expert FFNs (with the visual pair also
//! passing jointly through the vis expert) in the first L layers, and a
//! fusion expert over everything in the remaining layers.
//!
//! A learnable classification token rides at row 0: attended by everyone,
//! skipped by the per-stream experts, folded in by the fusion expert. Token
//! type embeddings are added per stream so the unmasked shared attention
//! can tell streams apart.
//!
//! Two ablations live here. With `separate_visual = false` the combined
//! visual stream occupies the `spa` slot and routes straight through the
//! vis expert (no spa/tmp experts, no pair step). With experts disabled
//! every layer is attention plus one shared FFN, which the audit reports as
//! the fusion expert.

use rand_chacha::ChaCha12Rng;

use crate::error::{config_err, shape_err, Result};
use crate::nn::{init_normal, Embedding, FeedForward, Mha, NamedParams};
use crate::tensor::{ops, Element, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum StreamId {
    Spa,
    Tmp,
    Cap,
    Ctx,
}

impl StreamId {
    pub const ALL: [StreamId; 4] = [StreamId::Spa, StreamId::Tmp, StreamId::Cap, StreamId::Ctx];

    pub fn key(self) -> &'static str {
        match self {
            StreamId::Spa => "spa",
            StreamId::Tmp => "tmp",
            StreamId::Cap => "cap",
            StreamId::Ctx => "ctx",
        }
    }

    pub fn parse(s: &str) -> Result<StreamId> {
        match s {
            "spa" => Ok(StreamId::Spa),
            "tmp" => Ok(StreamId::Tmp),
            "cap" => Ok(StreamId::Cap),
            "ctx" => Ok(StreamId::Ctx),
            other => Err(config_err(format!(
                "unknown stream '{other}' (expected spa|tmp|cap|ctx)"
            ))),
        }
    }

    fn type_row(self) -> usize {
        match self {
            StreamId::Spa => 1,
            StreamId::Tmp => 2,
            StreamId::Cap => 3,
            StreamId::Ctx => 4,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExpertId {
    Spa,
    Tmp,
    Vis,
    Cap,
    Ctx,
    Fus,
}

impl ExpertId {
    pub fn key(self) -> &'static str {
        match self {
            ExpertId::Spa => "spa",
            ExpertId::Tmp => "tmp",
            ExpertId::Vis => "vis",
            ExpertId::Cap => "cap",
            ExpertId::Ctx => "ctx",
            ExpertId::Fus => "fus",
        }
    }
}

/// Which expert each stream routes through in the routed layers. Swaps
/// permute the expert side; the map must stay a bijection.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RoutingMap {
    entries: Vec<(StreamId, ExpertId)>,
}

impl RoutingMap {
    /// Identity routing for the standard model.
    pub fn identity() -> RoutingMap {
        RoutingMap {
            entries: vec![
                (StreamId::Spa, ExpertId::Spa),
                (StreamId::Tmp, ExpertId::Tmp),
                (StreamId::Cap, ExpertId::Cap),
                (StreamId::Ctx, ExpertId::Ctx),
            ],
        }
    }

    /// Sequential-attention variant: one visual stream in the spa slot,
    /// routed through the vis expert.
    pub fn sequential_visual() -> RoutingMap {
        RoutingMap {
            entries: vec![
                (StreamId::Spa, ExpertId::Vis),
                (StreamId::Cap, ExpertId::Cap),
                (StreamId::Ctx, ExpertId::Ctx),
            ],
        }
    }

    pub fn expert_for(&self, stream: StreamId) -> Result<ExpertId> {
        self.entries
            .iter()
            .find(|(s, _)| *s == stream)
            .map(|(_, e)| *e)
            .ok_or_else(|| {
                config_err(format!(
                    "stream '{}' is not routed in this configuration",
                    stream.key()
                ))
            })
    }

    /// Exchange the experts of each named pair. Pairs must be disjoint and
    /// every stream must exist in the map.
    pub fn swapped(&self, pairs: &[(StreamId, StreamId)]) -> Result<RoutingMap> {
        let mut seen: Vec<StreamId> = Vec::new();
        for &(a, b) in pairs {
            if a == b {
                return Err(config_err(format!("cannot swap '{}' with itself", a.key())));
            }
            for s in [a, b] {
                if seen.contains(&s) {
                    return Err(config_err(format!(
                        "stream '{}' appears in more than one swap pair",
                        s.key()
                    )));
                }
                seen.push(s);
            }
        }
        let mut next = self.clone();
        for &(a, b) in pairs {
            let ea = self.expert_for(a)?;
            let eb = self.expert_for(b)?;
            for (s, e) in next.entries.iter_mut() {
                if *s == a {
                    *e = eb;
                } else if *s == b {
                    *e = ea;
                }
            }
        }
        debug_assert!(next.is_bijection());
        Ok(next)
    }

    pub fn is_bijection(&self) -> bool {
        for i in 1..self.entries.len() {
            if self.entries[..i].iter().any(|(_, e)| *e == self.entries[i].1) {
                return false;
            }
        }
        true
    }

    pub fn entries(&self) -> &[(StreamId, ExpertId)] {
        &self.entries
    }
}

/// Ordered per-stream inputs to the stack, all `(n_s, D)`. Construction
/// enforces the canonical [spa, tmp, cap, ctx] order and uniqueness.
pub struct ModalityBundle<T: Element> {
    streams: Vec<(StreamId, Tensor<T>)>,
}

impl<T: Element> ModalityBundle<T> {
    pub fn new(mut streams: Vec<(StreamId, Tensor<T>)>) -> Result<ModalityBundle<T>> {
        if streams.is_empty() {
            return Err(shape_err("bundle needs at least one stream"));
        }
        streams.sort_by_key(|(id, _)| *id);
        for i in 1..streams.len() {
            if streams[i - 1].0 == streams[i].0 {
                return Err(shape_err(format!(
                    "duplicate stream '{}' in bundle",
                    streams[i].0.key()
                )));
            }
        }
        let (_, c0) = streams[0].1.dims2()?;
        for (id, t) in &streams {
            let (_, c) = t.dims2()?;
            if c != c0 {
                return Err(shape_err(format!(
                    "stream '{}' has width {c}, expected {c0}",
                    id.key()
                )));
            }
        }
        Ok(ModalityBundle { streams })
    }

    pub fn ids(&self) -> Vec<StreamId> {
        self.streams.iter().map(|(id, _)| *id).collect()
    }

    pub fn get(&self, id: StreamId) -> Option<&Tensor<T>> {
        self.streams
            .iter()
            .find(|(s, _)| *s == id)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (StreamId, &Tensor<T>)> {
        self.streams.iter().map(|(id, t)| (*id, t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackConfig {
    pub layers: usize,        // N
    pub expert_layers: usize, // L
    pub dim: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
}

enum LayerKind<T: Element> {
    Routed {
        experts: Vec<(ExpertId, FeedForward<T>)>, // spa, tmp, vis, cap, ctx
    },
    Fusion(FeedForward<T>),
    Plain(FeedForward<T>), // experts disabled
}

struct Layer<T: Element> {
    sa: Mha<T>,
    kind: LayerKind<T>,
}

/// Stream states after the stack. `routed` carries each stream as it left
/// the last routed layer (the representations the stage-1 losses consume);
/// `seq` is the final concatenation including the classification token at
/// row 0.
pub struct StackOutput<T: Element> {
    pub seq: Tensor<T>,
    pub spans: Vec<(StreamId, usize, usize)>,
    pub routed: Vec<(StreamId, Tensor<T>)>,
    pub cls: Tensor<T>,
}

impl<T: Element> StackOutput<T> {
    pub fn stream(&self, id: StreamId) -> Result<Tensor<T>> {
        let (_, start, len) = self
            .spans
            .iter()
            .find(|(s, _, _)| *s == id)
            .ok_or_else(|| shape_err(format!("stream '{}' not in output", id.key())))?;
        ops::slice_rows(&self.seq, *start, *len)
    }

    pub fn routed_stream(&self, id: StreamId) -> Result<&Tensor<T>> {
        self.routed
            .iter()
            .find(|(s, _)| *s == id)
            .map(|(_, t)| t)
            .ok_or_else(|| shape_err(format!("stream '{}' not in routed states", id.key())))
    }
}

/// Audit of which expert processed which stream, per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditLayer {
    pub assignments: Vec<(StreamId, ExpertId)>,
    /// Vis expert ran over the [spa-out, tmp-out] concatenation.
    pub vis_pair: bool,
    pub fusion: bool,
}

pub struct ExpertStack<T: Element> {
    layers: Vec<Layer<T>>,
    cls: Tensor<T>,
    type_emb: Embedding<T>, // rows: 0 cls, 1 spa, 2 tmp, 3 cap, 4 ctx
    routing: RoutingMap,
    pub expert_layers: usize,
    pub dim: usize,
    separate_visual: bool,
    experts_enabled: bool,
}

impl<T: Element> ExpertStack<T> {
    pub fn new(
        rng: &mut ChaCha12Rng,
        cfg: &StackConfig,
        separate_visual: bool,
        experts_enabled: bool,
    ) -> Result<ExpertStack<T>> {
        if cfg.expert_layers == 0 || cfg.expert_layers > cfg.layers {
            return Err(config_err(format!(
                "expert layers {} must satisfy 1 <= L <= N = {}",
                cfg.expert_layers, cfg.layers
            )));
        }
        if cfg.ffn_multiplier == 0 {
            return Err(config_err("ffn multiplier must be positive"));
        }
        let hidden = cfg.dim * cfg.ffn_multiplier;
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            let sa = Mha::new(rng, cfg.dim, cfg.heads)?;
            let kind = if !experts_enabled {
                LayerKind::Plain(FeedForward::new(rng, cfg.dim, hidden))
            } else if li < cfg.expert_layers {
                let ids = [
                    ExpertId::Spa,
                    ExpertId::Tmp,
                    ExpertId::Vis,
                    ExpertId::Cap,
                    ExpertId::Ctx,
                ];
                LayerKind::Routed {
                    experts: ids
                        .iter()
                        .map(|&id| (id, FeedForward::new(rng, cfg.dim, hidden)))
                        .collect(),
                }
            } else {
                LayerKind::Fusion(FeedForward::new(rng, cfg.dim, hidden))
            };
            layers.push(Layer { sa, kind });
        }
        let routing = if separate_visual {
            RoutingMap::identity()
        } else {
            RoutingMap::sequential_visual()
        };
        Ok(ExpertStack {
            layers,
            cls: init_normal(rng, &[1, cfg.dim], 0.02),
            type_emb: Embedding::new(rng, 5, cfg.dim),
            routing,
            expert_layers: cfg.expert_layers,
            dim: cfg.dim,
            separate_visual,
            experts_enabled,
        })
    }

    pub fn routing(&self) -> &RoutingMap {
        &self.routing
    }

    /// Install a (possibly swapped) routing map. Inference-time hook; the
    /// trainer never calls this.
    pub fn set_routing(&mut self, map: RoutingMap) -> Result<()> {
        if !map.is_bijection() {
            return Err(config_err("routing map is not a bijection"));
        }
        self.routing = map;
        Ok(())
    }

    pub fn separate_visual(&self) -> bool {
        self.separate_visual
    }

    fn expert(experts: &[(ExpertId, FeedForward<T>)], id: ExpertId) -> &FeedForward<T> {
        &experts
            .iter()
            .find(|(e, _)| *e == id)
            .expect("all five per-stream experts exist")
            .1
    }

    pub fn forward(&self, bundle: &ModalityBundle<T>) -> Result<StackOutput<T>> {
        // Assemble [cls, spa, tmp, cap, ctx] with type embeddings.
        let mut parts = Vec::with_capacity(1 + bundle.streams.len());
        parts.push(ops::add(&self.cls, &self.type_emb.row(0)?)?);
        let mut spans = Vec::new();
        let mut start = 1;
        for (id, t) in bundle.iter() {
            let (n, c) = t.dims2()?;
            if c != self.dim {
                return Err(shape_err(format!(
                    "stream '{}' width {c} does not match stack width {}",
                    id.key(),
                    self.dim
                )));
            }
            let type_row = ops::reshape(&self.type_emb.row(id.type_row())?, &[self.dim])?;
            parts.push(ops::add_bias(t, &type_row)?);
            spans.push((id, start, n));
            start += n;
        }
        let mut seq = ops::concat_rows(&parts)?;
        // Routed states default to the typed inputs in case L covers the
        // whole stack and the loop below never reaches a fusion layer.
        let mut routed: Vec<(StreamId, Tensor<T>)> = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let attended = ops::add(&seq, &layer.sa.forward(&seq, None)?)?;
            seq = match &layer.kind {
                LayerKind::Plain(ffn) | LayerKind::Fusion(ffn) => {
                    ops::add(&attended, &ffn.forward(&attended)?)?
                }
                LayerKind::Routed { experts } => {
                    let cls_row = ops::slice_rows(&attended, 0, 1)?;
                    let mut stream_outs: Vec<(StreamId, Tensor<T>)> = Vec::new();
                    for &(id, s, n) in &spans {
                        let xs = ops::slice_rows(&attended, s, n)?;
                        let eid = self.routing.expert_for(id)?;
                        let ffn = Self::expert(experts, eid);
                        stream_outs.push((id, ops::add(&xs, &ffn.forward(&xs)?)?));
                    }
                    if self.separate_visual {
                        // Vis expert over the visual pair (or the lone spa
                        // stream for images), along the token axis.
                        let vis_ids: Vec<StreamId> = stream_outs
                            .iter()
                            .map(|(id, _)| *id)
                            .filter(|id| matches!(id, StreamId::Spa | StreamId::Tmp))
                            .collect();
                        if !vis_ids.is_empty() {
                            let vis_parts: Vec<Tensor<T>> = stream_outs
                                .iter()
                                .filter(|(id, _)| vis_ids.contains(id))
                                .map(|(_, t)| t.clone())
                                .collect();
                            let cat = ops::concat_rows(&vis_parts)?;
                            let vis_ffn = Self::expert(experts, ExpertId::Vis);
                            let fused = ops::add(&cat, &vis_ffn.forward(&cat)?)?;
                            let mut off = 0;
                            for (id, t) in stream_outs.iter_mut() {
                                if vis_ids.contains(id) {
                                    let (n, _) = t.dims2()?;
                                    *t = ops::slice_rows(&fused, off, n)?;
                                    off += n;
                                }
                            }
                        }
                    }
                    if li + 1 == self.expert_layers {
                        routed = stream_outs.clone();
                    }
                    let mut parts = vec![cls_row];
                    parts.extend(stream_outs.into_iter().map(|(_, t)| t));
                    ops::concat_rows(&parts)?
                }
            };
        }
        if routed.is_empty() {
            // Experts disabled: stage-1 losses read the streams at layer L
            // of the plain stack instead.
            for &(id, s, n) in &spans {
                routed.push((id, ops::slice_rows(&seq, s, n)?));
            }
        }
        let cls = ops::slice_rows(&seq, 0, 1)?;
        Ok(StackOutput {
            seq,
            spans,
            routed,
            cls,
        })
    }

    /// Which expert touches which stream, per layer, for a given set of
    /// available streams.
    pub fn routing_audit(&self, streams: &[StreamId]) -> Result<Vec<AuditLayer>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for li in 0..self.layers.len() {
            if !self.experts_enabled || li >= self.expert_layers {
                out.push(AuditLayer {
                    assignments: streams.iter().map(|&s| (s, ExpertId::Fus)).collect(),
                    vis_pair: false,
                    fusion: true,
                });
            } else {
                let mut assignments = Vec::with_capacity(streams.len());
                for &s in streams {
                    assignments.push((s, self.routing.expert_for(s)?));
                }
                let vis_pair = self.separate_visual
                    && streams
                        .iter()
                        .any(|s| matches!(s, StreamId::Spa | StreamId::Tmp));
                out.push(AuditLayer {
                    assignments,
                    vis_pair,
                    fusion: false,
                });
            }
        }
        Ok(out)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.cls"), self.cls.clone()));
        self.type_emb.params(&format!("{prefix}.type_emb"), out);
        for (li, layer) in self.layers.iter().enumerate() {
            let lp = format!("{prefix}.layer{li}");
            layer.sa.params(&format!("{lp}.sa"), out);
            match &layer.kind {
                LayerKind::Plain(ffn) => ffn.params(&format!("{lp}.ffn"), out),
                LayerKind::Fusion(ffn) => ffn.params(&format!("{lp}.expert.fus"), out),
                LayerKind::Routed { experts } => {
                    for (id, ffn) in experts {
                        ffn.params(&format!("{lp}.expert.{}", id.key()), out);
                    }
                }
            }
        }
    }
}

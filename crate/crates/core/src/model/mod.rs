//! Small multi-modal diffusion transformer over `[conditions; prompt; noise]`.

mod checkpoint;
mod config;
pub mod embed;
pub mod patch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry};
pub use config::ModelConfig;

use crate::data::{ConditionInput, TokenId};
use crate::error::{Error, Result};
use crate::layout::{PromptSpanTable, SegmentKind, SequenceLayout};
use crate::lora::{gated_project, GateMode, GateRows, GatedLoraSet, LoraSite};
use crate::numerics::{Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::routing::{
    build_dynamic_mask, build_static_mask, combine, compute_affinity, head_averaged_similarity, head_similarities,
    route, AffinityMatrix, FlowMask, RoutingAssignment,
};

/// How per-layer affinity feeds the dynamic mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityMode {
    /// One assignment from the head-averaged similarity, shared by all heads.
    #[default]
    HeadAveraged,
    /// Each head routes on its own similarity.
    PerHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingOptions {
    pub static_routing: bool,
    pub dynamic_routing: bool,
    pub affinity: AffinityMode,
    /// Keep each layer's affinity and assignment.
    pub record: bool,
    /// Check every combined mask for single-block routing; violations abort.
    pub audit: bool,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        Self {
            static_routing: true,
            dynamic_routing: true,
            affinity: AffinityMode::HeadAveraged,
            record: false,
            audit: false,
        }
    }
}

/// Parameters a block owns directly; projections live in the LoRA set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub modulation_w: ParamId,
    pub modulation_b: ParamId,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub ffn1: usize,
    pub ffn2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub lora: GatedLoraSet,
    pub blocks: Vec<BlockParams>,
    patch_w: ParamId,
    patch_b: ParamId,
    text_table: ParamId,
    segment_table: ParamId,
    time1_w: ParamId,
    time1_b: ParamId,
    time2_w: ParamId,
    time2_b: ParamId,
    final_mod_w: ParamId,
    final_mod_b: ParamId,
    final_out_w: ParamId,
    final_out_b: ParamId,
}

/// Which parameters an optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Everything except the adapters.
    Base,
    /// Adapter branches only; the base is frozen.
    Adapter,
}

/// One forward request. `x_t` holds noise-grid patch tokens in `[-1, 1]` units.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub conditions: &'a [ConditionInput],
    pub prompt: &'a [TokenId],
    pub spans: &'a PromptSpanTable,
    pub x_t: &'a Tensor,
    pub t: f32,
}

/// Embedded sequence and the segment label of each row.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub layout: SequenceLayout,
    pub labels: Vec<SegmentKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub affinity: AffinityMatrix,
    pub assignment: RoutingAssignment,
}

pub struct ForwardOutput {
    /// `n × patch_dim` velocity in patch-token order.
    pub velocity: Var,
    pub layout: SequenceLayout,
    pub traces: Vec<LayerTrace>,
    /// Masks that passed the single-block audit.
    pub audits: usize,
}

fn normal_tensor(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("sized")
}

fn rows_of(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let c = t.cols();
    Tensor::matrix(range.len(), c, t.data()[range.start * c..range.end * c].to_vec()).expect("in range")
}

fn ones_row<S: Scalar>(g: &mut Graph<S>, d: usize) -> Var {
    g.constant_matrix(1, d, &vec![1.0; d]).expect("sized")
}

fn zeros_row<S: Scalar>(g: &mut Graph<S>, d: usize) -> Var {
    g.constant_matrix(1, d, &vec![0.0; d]).expect("sized")
}

/// Pre-norm with adaptive shift and scale: `LN(x)·(1 + scale) + shift`.
fn modulate<S: Scalar>(g: &mut Graph<S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let d = g.dims(x).1;
    let (one, zero) = (ones_row(g, d), zeros_row(g, d));
    let h = g.layer_norm(x, one, zero)?;
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul_row(h, s)?;
    g.add_row(h, shift)
}

/// Multi-head attention with a per-head additive mask (one mask may serve all heads).
pub fn masked_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    masks: &[Tensor],
) -> Result<Var> {
    let d = g.dims(q).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
    }
    if masks.is_empty() || (masks.len() != 1 && masks.len() != heads) {
        return Err(Error::shape(format!("{} masks for {heads} heads", masks.len())));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let logits = g.matmul_t(qh, false, kh, true)?;
        let logits = g.scale(logits, scale);
        let mask = &masks[if masks.len() == 1 { 0 } else { h }];
        let p = g.softmax_masked(logits, mask)?;
        outs.push(g.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Routing state shared by every layer of one forward pass.
struct Router<'a> {
    layout: SequenceLayout,
    spans: &'a PromptSpanTable,
    static_mask: Option<FlowMask>,
    static_additive: Tensor,
    opts: RoutingOptions,
    heads: usize,
    traces: Vec<LayerTrace>,
    audits: usize,
}

impl Router<'_> {
    fn finish(&mut self, mask: FlowMask) -> Result<Tensor> {
        if self.opts.audit {
            mask.audit_bijective()?;
            self.audits += 1;
        }
        Ok(mask.to_additive())
    }

    /// Per-head masks for one layer given that layer's projected queries and keys.
    fn masks(&mut self, layer: usize, q: &Tensor, k: &Tensor) -> Result<Vec<Tensor>> {
        let c = self.layout.c;
        let wants_affinity = c >= 1 && self.layout.m > 0 && (self.opts.record || (self.opts.dynamic_routing && c >= 2));
        if !wants_affinity {
            return Ok(vec![self.static_additive.clone()]);
        }
        let q_x = rows_of(q, self.layout.noise());
        let k_t = rows_of(k, self.layout.prompt());
        let averaged = head_averaged_similarity(&q_x, &k_t, self.heads)?;
        let affinity = compute_affinity(&averaged, self.spans, c)?;
        let assignment = route(&affinity);
        if self.opts.record {
            self.traces.push(LayerTrace {
                layer,
                affinity,
                assignment: assignment.clone(),
            });
        }
        if !self.opts.dynamic_routing || c < 2 {
            return Ok(vec![self.static_additive.clone()]);
        }
        let base = self.static_mask.clone().unwrap_or_else(|| FlowMask::open(self.layout));
        match self.opts.affinity {
            AffinityMode::HeadAveraged => {
                let dynamic = build_dynamic_mask(&assignment, &self.layout)?;
                Ok(vec![self.finish(combine(&base, &dynamic)?)?])
            }
            AffinityMode::PerHead => head_similarities(&q_x, &k_t, self.heads)?
                .iter()
                .map(|s| {
                    let a = route(&compute_affinity(s, self.spans, c)?);
                    let dynamic = build_dynamic_mask(&a, &self.layout)?;
                    self.finish(combine(&base, &dynamic)?)
                })
                .collect(),
        }
    }
}

impl Model {
    /// Freshly initialized model. Adapter `up` matrices start at zero and the
    /// block gates and output head start at zero, so the initial velocity is 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.d;
        let pd = config.patch_dim();
        let patch_w = p.insert("patch.weight", normal_tensor(pd, d, (1.0 / pd as f32).sqrt(), &mut rng), true);
        let patch_b = p.insert("patch.bias", Tensor::zeros(&[1, d]), true);
        let text_table = p.insert("text.table", normal_tensor(config.vocab, d, 0.5, &mut rng), true);
        let segment_table = p.insert("segment.table", normal_tensor(4, d, 0.5, &mut rng), true);
        let time1_w = p.insert("time.fc1.weight", normal_tensor(d, d, (1.0 / d as f32).sqrt(), &mut rng), true);
        let time1_b = p.insert("time.fc1.bias", Tensor::zeros(&[1, d]), true);
        let time2_w = p.insert("time.fc2.weight", normal_tensor(d, d, (1.0 / d as f32).sqrt(), &mut rng), true);
        let time2_b = p.insert("time.fc2.bias", Tensor::zeros(&[1, d]), true);
        let mut lora = GatedLoraSet::default();
        let mut blocks = Vec::with_capacity(config.layers);
        let f = config.ffn_width();
        for l in 0..config.layers {
            let modulation_w = p.insert(format!("blocks.{l}.mod.weight"), Tensor::zeros(&[d, 6 * d]), true);
            let modulation_b = p.insert(format!("blocks.{l}.mod.bias"), Tensor::zeros(&[1, 6 * d]), true);
            let mut site = |name: &str, d_in: usize, d_out: usize, p: &mut ParamSet| -> Result<usize> {
                lora.sites.push(LoraSite::create(p, &format!("blocks.{l}.{name}"), d_in, d_out, &config.lora, &mut rng)?);
                Ok(lora.sites.len() - 1)
            };
            let q = site("q", d, d, &mut p)?;
            let k = site("k", d, d, &mut p)?;
            let v = site("v", d, d, &mut p)?;
            let o = site("o", d, d, &mut p)?;
            let ffn1 = site("ffn1", d, f, &mut p)?;
            let ffn2 = site("ffn2", f, d, &mut p)?;
            blocks.push(BlockParams {
                modulation_w,
                modulation_b,
                q,
                k,
                v,
                o,
                ffn1,
                ffn2,
            });
        }
        let final_mod_w = p.insert("final.mod.weight", Tensor::zeros(&[d, 2 * d]), true);
        let final_mod_b = p.insert("final.mod.bias", Tensor::zeros(&[1, 2 * d]), true);
        let final_out_w = p.insert("final.out.weight", Tensor::zeros(&[d, pd]), true);
        let final_out_b = p.insert("final.out.bias", Tensor::zeros(&[1, pd]), true);
        let mut model = Model {
            config,
            params: p,
            lora,
            blocks,
            patch_w,
            patch_b,
            text_table,
            segment_table,
            time1_w,
            time1_b,
            time2_w,
            time2_b,
            final_mod_w,
            final_mod_b,
            final_out_w,
            final_out_b,
        };
        model.set_phase(Phase::Base);
        Ok(model)
    }

    pub fn set_phase(&mut self, phase: Phase) {
        let adapters = self.lora.trainable_parameters();
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let is_adapter = adapters.contains(&id);
            self.params.set_trainable(id, is_adapter == (phase == Phase::Adapter));
        }
    }

    pub fn gate_mode(&self) -> GateMode {
        self.lora.mode
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.lora.mode = mode;
    }

    /// Parameters that are not adapter branches.
    pub fn base_parameters(&self) -> Vec<ParamId> {
        let adapters = self.lora.trainable_parameters();
        self.params.ids().filter(|id| !adapters.contains(id)).collect()
    }

    pub fn layout_for(&self, c: usize, m: usize) -> SequenceLayout {
        SequenceLayout::new(c, self.config.n_prime(), self.config.m_prime, m, self.config.n())
    }

    fn check_input(&self, input: &ModelInput) -> Result<SequenceLayout> {
        let cfg = &self.config;
        let c = input.conditions.len();
        let m = input.prompt.len();
        if m > cfg.max_m {
            return Err(Error::invalid(format!("prompt has {m} tokens, budget is {}", cfg.max_m)));
        }
        if (input.x_t.rows(), input.x_t.cols()) != (cfg.n(), cfg.patch_dim()) {
            return Err(Error::shape(format!(
                "noisy input is {}x{}, expected {}x{}",
                input.x_t.rows(),
                input.x_t.cols(),
                cfg.n(),
                cfg.patch_dim()
            )));
        }
        for (k, cond) in input.conditions.iter().enumerate() {
            if cond.prompt.len() != cfg.m_prime {
                return Err(Error::invalid(format!(
                    "condition {k} prompt has {} tokens, expected {}",
                    cond.prompt.len(),
                    cfg.m_prime
                )));
            }
            if cond.image.width != cfg.cond_edge || cond.image.height != cfg.cond_edge {
                return Err(Error::shape(format!(
                    "condition {k} image is {}x{}, expected {}x{}",
                    cond.image.width, cond.image.height, cfg.cond_edge, cfg.cond_edge
                )));
            }
        }
        if c > 0 {
            if input.spans.len() != c {
                return Err(Error::invalid(format!("{} prompt spans for {c} conditions", input.spans.len())));
            }
            input.spans.validate(m)?;
        }
        if let Some(&bad) = input.prompt.iter().chain(input.conditions.iter().flat_map(|c| c.prompt.iter())).find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(self.layout_for(c, m))
    }

    fn linear<S: Scalar>(&self, g: &mut Graph<S>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// `silu` of the learned timestep embedding, fed to every modulation layer.
    pub fn time_embedding<S: Scalar>(&self, g: &mut Graph<S>, t: f32) -> Result<Var> {
        let feats = g.constant(&embed::timestep_features(t, self.config.d));
        let h = self.linear(g, feats, self.time1_w, self.time1_b)?;
        let h = g.silu(h);
        let e = self.linear(g, h, self.time2_w, self.time2_b)?;
        Ok(g.silu(e))
    }

    /// Token embeddings plus segment-type and position features.
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, input: &ModelInput) -> Result<TokenBatch> {
        let layout = self.check_input(input)?;
        let cfg = &self.config;
        let mut image_rows = Vec::with_capacity((layout.c * layout.n_prime + layout.n) * cfg.patch_dim());
        for cond in input.conditions {
            image_rows.extend_from_slice(patch::to_signed(&patch::patchify(&cond.image, cfg.patch)?).data());
        }
        image_rows.extend_from_slice(input.x_t.data());
        let image_count = layout.c * layout.n_prime + layout.n;
        let raw = g.constant_matrix(image_count, cfg.patch_dim(), &image_rows)?;
        let images = self.linear(g, raw, self.patch_w, self.patch_b)?;
        let table = g.param(&self.params, self.text_table);
        let mut parts = Vec::with_capacity(2 * layout.c + 2);
        for (k, cond) in input.conditions.iter().enumerate() {
            parts.push(g.slice_rows(images, k * layout.n_prime, layout.n_prime)?);
            let idx: Vec<usize> = cond.prompt.iter().map(|&t| t as usize).collect();
            parts.push(g.gather_rows(table, &idx)?);
        }
        if layout.m > 0 {
            let idx: Vec<usize> = input.prompt.iter().map(|&t| t as usize).collect();
            parts.push(g.gather_rows(table, &idx)?);
        }
        parts.push(g.slice_rows(images, layout.c * layout.n_prime, layout.n)?);
        let tokens = g.concat_rows(&parts)?;
        let labels = layout.labels();
        let seg_idx: Vec<usize> = labels.iter().map(|k| k.type_index()).collect();
        let seg_table = g.param(&self.params, self.segment_table);
        let seg = g.gather_rows(seg_table, &seg_idx)?;
        let tokens = g.add(tokens, seg)?;
        let pos = embed::position_features(&embed::embed_positions(&layout, cfg)?, cfg.d);
        let pos = g.constant(&pos);
        let tokens = g.add(tokens, pos)?;
        Ok(TokenBatch { tokens, layout, labels })
    }

    fn block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        l: usize,
        x: Var,
        temb: Var,
        rows: &GateRows,
        masks_for: &mut dyn FnMut(&Graph<S>, Var, Var) -> Result<Vec<Tensor>>,
    ) -> Result<Var> {
        let d = self.config.d;
        let bp = self.blocks[l];
        let sites = &self.lora.sites;
        let m = self.linear(g, temb, bp.modulation_w, bp.modulation_b)?;
        let chunk = |g: &mut Graph<S>, i: usize| g.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);
        let h = modulate(g, x, shift1, scale1)?;
        let q = gated_project(g, &self.params, &sites[bp.q], h, rows)?;
        let k = gated_project(g, &self.params, &sites[bp.k], h, rows)?;
        let v = gated_project(g, &self.params, &sites[bp.v], h, rows)?;
        let masks = masks_for(g, q, k)?;
        let a = masked_attention(g, q, k, v, self.config.heads, &masks)?;
        let a = gated_project(g, &self.params, &sites[bp.o], a, rows)?;
        let a = g.mul_row(a, gate1)?;
        let x = g.add(x, a)?;
        let h = modulate(g, x, shift2, scale2)?;
        let f = gated_project(g, &self.params, &sites[bp.ffn1], h, rows)?;
        let f = g.gelu(f);
        let f = gated_project(g, &self.params, &sites[bp.ffn2], f, rows)?;
        let f = g.mul_row(f, gate2)?;
        g.add(x, f)
    }

    /// One block under a fixed flow mask.
    pub fn mma_block<S: Scalar>(&self, g: &mut Graph<S>, l: usize, batch: &TokenBatch, mask: &FlowMask, temb: Var) -> Result<TokenBatch> {
        if mask.layout() != &batch.layout {
            return Err(Error::shape("mask layout differs from batch layout"));
        }
        let rows = GateRows::new(&batch.labels, self.lora.mode);
        let additive = mask.to_additive();
        let mut fixed = |_: &Graph<S>, _: Var, _: Var| Ok(vec![additive.clone()]);
        let tokens = self.block(g, l, batch.tokens, temb, &rows, &mut fixed)?;
        Ok(TokenBatch {
            tokens,
            layout: batch.layout,
            labels: batch.labels.clone(),
        })
    }

    /// Runs every block with routing recomputed per layer, then the velocity head.
    pub fn run<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        batch: &TokenBatch,
        spans: &PromptSpanTable,
        t: f32,
        opts: &RoutingOptions,
    ) -> Result<ForwardOutput> {
        let layout = batch.layout;
        let temb = self.time_embedding(g, t)?;
        let rows = GateRows::new(&batch.labels, self.lora.mode);
        let static_mask = (layout.c > 0 && opts.static_routing).then(|| build_static_mask(&layout));
        let l_total = layout.total();
        let static_additive = static_mask
            .as_ref()
            .map_or_else(|| Tensor::zeros(&[l_total, l_total]), FlowMask::to_additive);
        let mut router = Router {
            layout,
            spans,
            static_mask,
            static_additive,
            opts: *opts,
            heads: self.config.heads,
            traces: Vec::new(),
            audits: 0,
        };
        let mut x = batch.tokens;
        for l in 0..self.config.layers {
            let mut masks_for = |g: &Graph<S>, q: Var, k: Var| router.masks(l, &g.tensor(q), &g.tensor(k));
            x = self.block(g, l, x, temb, &rows, &mut masks_for)?;
        }
        let d = self.config.d;
        let m = self.linear(g, temb, self.final_mod_w, self.final_mod_b)?;
        let shift = g.slice_cols(m, 0, d)?;
        let scale = g.slice_cols(m, d, d)?;
        let noise = g.slice_rows(x, layout.noise().start, layout.n)?;
        let h = modulate(g, noise, shift, scale)?;
        let velocity = self.linear(g, h, self.final_out_w, self.final_out_b)?;
        Ok(ForwardOutput {
            velocity,
            layout,
            traces: router.traces,
            audits: router.audits,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, input: &ModelInput, opts: &RoutingOptions) -> Result<ForwardOutput> {
        let batch = self.embed(g, input)?;
        self.run(g, &batch, input.spans, input.t, opts)
    }

    /// Eager velocity prediction (`n × patch_dim`) plus any recorded traces.
    pub fn predict(&self, input: &ModelInput, opts: &RoutingOptions) -> Result<(Tensor, Vec<LayerTrace>)> {
        let mut g = Graph::<f32>::new();
        let out = self.forward(&mut g, input, opts)?;
        Ok((g.tensor(out.velocity), out.traces))
    }
}

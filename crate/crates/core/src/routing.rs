//! Attention flow masks: the static routing pattern, the per-step dynamic
//! routing derived from noise-to-prompt affinity, and their union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{PromptSpanTable, SegmentKind, SequenceLayout};
use crate::numerics::{kernels, Tensor, BLOCKED};
use crate::pgm::GrayImage;

/// `L × L` boolean attention-flow matrix; `true` blocks row `i` from attending to column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowMask {
    layout: SequenceLayout,
    blocked: Vec<bool>,
}

impl FlowMask {
    /// Nothing blocked.
    pub fn open(layout: SequenceLayout) -> Self {
        let l = layout.total();
        Self {
            layout,
            blocked: vec![false; l * l],
        }
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn size(&self) -> usize {
        self.layout.total()
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size() + j]
    }

    pub fn block(&mut self, i: usize, j: usize) {
        let l = self.size();
        self.blocked[i * l + j] = true;
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.blocked.iter().any(|&b| b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.blocked
    }

    /// Additive form: blocked → [`BLOCKED`], open → 0.
    pub fn to_additive(&self) -> Tensor {
        let l = self.size();
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { BLOCKED } else { 0.0 })
            .collect();
        Tensor::matrix(l, l, data).expect("square mask")
    }

    /// Unblocked condition-region columns of row `i`.
    pub fn open_condition_columns(&self, i: usize) -> Vec<usize> {
        (0..self.layout.condition_tokens())
            .filter(|&j| !self.is_blocked(i, j))
            .collect()
    }

    /// Checks that every noise row sees exactly one whole condition block.
    pub fn audit_bijective(&self) -> Result<()> {
        let lay = self.layout;
        if lay.c == 0 {
            return Ok(());
        }
        for i in lay.noise() {
            let open = self.open_condition_columns(i);
            if open.len() != lay.l_prime() {
                return Err(Error::Numerical(format!(
                    "noise row {i} sees {} condition columns, expected {}",
                    open.len(),
                    lay.l_prime()
                )));
            }
            let k = open[0] / lay.l_prime();
            if open.iter().any(|&j| j / lay.l_prime() != k) {
                return Err(Error::Numerical(format!(
                    "noise row {i} sees columns from more than one condition"
                )));
            }
        }
        Ok(())
    }

    /// Blocked entries grouped by (row segment, column segment).
    pub fn block_summary(&self) -> Vec<BlockCount> {
        let lay = self.layout;
        let labels = lay.labels();
        let mut out: Vec<BlockCount> = Vec::new();
        for (i, ri) in labels.iter().enumerate() {
            for (j, cj) in labels.iter().enumerate() {
                if !self.is_blocked(i, j) {
                    continue;
                }
                let (row, col) = (segment_name(*ri), segment_name(*cj));
                match out.iter_mut().find(|b| b.rows == row && b.cols == col) {
                    Some(b) => b.blocked += 1,
                    None => out.push(BlockCount {
                        rows: row,
                        cols: col,
                        blocked: 1,
                    }),
                }
            }
        }
        out
    }

    /// Grayscale rendering: blocked = 0 (black), open = 255 (white).
    pub fn to_pgm(&self) -> GrayImage {
        let l = self.size();
        let pixels = self.blocked.iter().map(|&b| if b { 0 } else { 255 }).collect();
        GrayImage::new(l, l, pixels).expect("square mask")
    }
}

fn segment_name(kind: SegmentKind) -> String {
    match kind {
        SegmentKind::ConditionImage(k) | SegmentKind::ConditionText(k) => format!("cond{k}"),
        SegmentKind::Prompt => "prompt".into(),
        SegmentKind::Noise => "noise".into(),
    }
}

/// Blocked-entry count for one (row segment, column segment) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCount {
    pub rows: String,
    pub cols: String,
    pub blocked: usize,
}

/// Static routing: prompt and conditions never exchange attention, and
/// distinct conditions never attend to each other. Noise, prompt and each
/// segment's own tokens stay open.
pub fn build_static_mask(layout: &SequenceLayout) -> FlowMask {
    let mut mask = FlowMask::open(*layout);
    let cond = layout.condition_tokens();
    let prompt = layout.prompt();
    for i in prompt.clone() {
        for j in 0..cond {
            mask.block(i, j);
            mask.block(j, i);
        }
    }
    let lp = layout.l_prime();
    for i in 0..cond {
        for j in 0..cond {
            if i / lp != j / lp {
                mask.block(i, j);
            }
        }
    }
    mask
}

/// Row-softmax of `q_x · k_tᵀ / √d`: noise-to-prompt similarity, `n × m`.
pub fn compute_similarity(q_x: &Tensor, k_t: &Tensor, d: usize) -> Result<Tensor> {
    let (n, m) = (q_x.rows(), k_t.rows());
    if m == 0 {
        return Err(Error::invalid("similarity needs at least one prompt token"));
    }
    if d == 0 || q_x.cols() != d || k_t.cols() != d {
        return Err(Error::shape(format!(
            "similarity width {d} vs q {} / k {}",
            q_x.cols(),
            k_t.cols()
        )));
    }
    let mut logits = vec![0.0; n * m];
    kernels::gemm(n, d, m, q_x.data(), false, k_t.data(), true, &mut logits, false);
    let inv = 1.0 / (d as f32).sqrt();
    logits.iter_mut().for_each(|v| *v *= inv);
    let mut out = vec![0.0; n * m];
    let open = vec![0.0f32; n * m];
    kernels::softmax_masked_rows(&logits, &open, m, &mut out);
    Tensor::matrix(n, m, out)
}

/// Per-head similarity (`q_x`, `k_t` hold `heads` column groups of width
/// `d / heads`), one `n × m` matrix per head.
pub fn head_similarities(q_x: &Tensor, k_t: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let d = q_x.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let q = column_slice(q_x, h * dh, dh);
            let k = column_slice(k_t, h * dh, dh);
            compute_similarity(&q, &k, dh)
        })
        .collect()
}

/// Mean of the per-head similarity matrices.
pub fn head_averaged_similarity(q_x: &Tensor, k_t: &Tensor, heads: usize) -> Result<Tensor> {
    let per_head = head_similarities(q_x, k_t, heads)?;
    let (n, m) = (q_x.rows(), k_t.rows());
    let mut acc = vec![0.0f32; n * m];
    for s in &per_head {
        acc.iter_mut().zip(s.data()).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / heads as f32;
    acc.iter_mut().for_each(|a| *a *= inv);
    Tensor::matrix(n, m, acc)
}

fn column_slice(t: &Tensor, start: usize, len: usize) -> Tensor {
    let data = (0..t.rows())
        .flat_map(|r| t.row(r)[start..start + len].iter().copied())
        .collect();
    Tensor::matrix(t.rows(), len, data).expect("slice dims")
}

/// Noise-token × condition affinity: span-averaged similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    n: usize,
    c: usize,
    values: Vec<f32>,
}

impl AffinityMatrix {
    pub fn new(n: usize, c: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n * c {
            return Err(Error::shape("affinity extent"));
        }
        if values.iter().any(|v| !(0.0..=1.0 + 1e-6).contains(v)) {
            return Err(Error::invalid("affinity entries must lie in [0, 1]"));
        }
        Ok(Self { n, c, values })
    }

    pub fn noise_tokens(&self) -> usize {
        self.n
    }

    pub fn conditions(&self) -> usize {
        self.c
    }

    pub fn get(&self, i: usize, k: usize) -> f32 {
        self.values[i * self.c + k]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.c..(i + 1) * self.c]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Column `k` as an `n`-vector.
    pub fn column(&self, k: usize) -> Vec<f32> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }

    /// JSON array of rows.
    pub fn to_json_rows(&self) -> serde_json::Value {
        serde_json::Value::Array(
            (0..self.n)
                .map(|i| serde_json::json!(self.row(i)))
                .collect(),
        )
    }

    /// `n × c` heatmap, pixel = 255·S*.
    pub fn to_pgm(&self) -> GrayImage {
        GrayImage::from_unit(self.c, self.n, &self.values).expect("affinity dims")
    }
}

/// `S*[i,k] = (1/l_k) Σ_{z<l_k} S[i, p_k + z]`.
pub fn compute_affinity(similarity: &Tensor, spans: &PromptSpanTable, c: usize) -> Result<AffinityMatrix> {
    if c == 0 {
        return Err(Error::invalid("affinity needs at least one condition"));
    }
    if spans.len() != c {
        return Err(Error::invalid(format!(
            "{} spans for {c} conditions",
            spans.len()
        )));
    }
    spans.validate(similarity.cols())?;
    let n = similarity.rows();
    let mut values = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = similarity.row(i);
        for span in spans.iter() {
            let s: f32 = row[span.range()].iter().sum();
            values.push(s / span.len as f32);
        }
    }
    AffinityMatrix::new(n, c, values)
}

/// Chosen condition for each noise token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoutingAssignment(pub Vec<usize>);

impl RoutingAssignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Argmax over each affinity row; ties go to the smallest condition index.
pub fn route(affinity: &AffinityMatrix) -> RoutingAssignment {
    let picks = (0..affinity.noise_tokens())
        .map(|i| {
            let row = affinity.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    RoutingAssignment(picks)
}

/// Dynamic routing mask: noise row `i` keeps only the condition block
/// `assignment[i]`. Only the noise→condition direction is restricted.
pub fn build_dynamic_mask(assignment: &RoutingAssignment, layout: &SequenceLayout) -> Result<FlowMask> {
    if assignment.len() != layout.n {
        return Err(Error::invalid(format!(
            "assignment covers {} noise tokens, layout has {}",
            assignment.len(),
            layout.n
        )));
    }
    if let Some(&bad) = assignment.0.iter().find(|&&a| a >= layout.c.max(1)) {
        return Err(Error::invalid(format!(
            "assignment names condition {bad} but layout has {}",
            layout.c
        )));
    }
    let mut mask = FlowMask::open(*layout);
    let lp = layout.l_prime();
    for (z, i) in layout.noise().enumerate() {
        for j in 0..layout.condition_tokens() {
            if j / lp != assignment.0[z] {
                mask.block(i, j);
            }
        }
    }
    Ok(mask)
}

/// Elementwise union of blocked entries.
pub fn combine(a: &FlowMask, b: &FlowMask) -> Result<FlowMask> {
    if a.layout != b.layout {
        return Err(Error::invalid("cannot combine masks over different layouts"));
    }
    let blocked = a
        .blocked
        .iter()
        .zip(&b.blocked)
        .map(|(&x, &y)| x || y)
        .collect();
    Ok(FlowMask {
        layout: a.layout,
        blocked,
    })
}

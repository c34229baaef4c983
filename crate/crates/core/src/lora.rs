//! Segment-gated pairs of low-rank adapters on frozen projections.
//!
//! Weights are stored input-major (`d_in × d_out`) so a projection is `x·W`.
//! A branch adds `(α/r)·x·down·up` to the rows routed to it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SegmentKind;
use crate::numerics::{Graph, ParamId, ParamSet, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Subject,
    Image,
    None,
}

/// `Dual` gates by segment; `Uniform` sends every row, prompt included,
/// through the subject branch like a plain adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Dual,
    Uniform,
}

pub fn gate(kind: SegmentKind, mode: GateMode) -> Gate {
    match (mode, kind) {
        (GateMode::Uniform, _) => Gate::Subject,
        (GateMode::Dual, SegmentKind::Prompt) => Gate::None,
        (GateMode::Dual, SegmentKind::Noise) => Gate::Image,
        (GateMode::Dual, SegmentKind::ConditionImage(_) | SegmentKind::ConditionText(_)) => Gate::Subject,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub subject_rank: usize,
    pub image_rank: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            subject_rank: 8,
            image_rank: 2,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if self.subject_rank <= self.image_rank {
            return Err(Error::invalid(format!(
                "subject rank {} must exceed image rank {}",
                self.subject_rank, self.image_rank
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraBranch {
    pub rank: usize,
    pub alpha: f32,
    /// `d_in × r`
    pub down: ParamId,
    /// `r × d_out`, zero at initialization.
    pub up: ParamId,
}

impl LoraBranch {
    fn create(params: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, (1.0 / d_in as f32).sqrt()).expect("positive std");
        let down: Vec<f32> = (0..d_in * rank).map(|_| normal.sample(rng)).collect();
        Self {
            rank,
            alpha: rank as f32,
            down: params.insert(
                format!("{prefix}.down"),
                Tensor::matrix(d_in, rank, down).expect("sized"),
                true,
            ),
            up: params.insert(format!("{prefix}.up"), Tensor::zeros(&[rank, d_out]), true),
        }
    }

    /// Eager `(α/r)·x·down·up` for one row.
    pub fn delta_row(&self, params: &ParamSet, x: &[f32]) -> Vec<f32> {
        let down = params.get(self.down);
        let up = params.get(self.up);
        let mid: Vec<f32> = (0..self.rank)
            .map(|j| x.iter().enumerate().map(|(i, &v)| v * down.get(i, j)).sum())
            .collect();
        let s = self.alpha / self.rank as f32;
        (0..up.cols())
            .map(|o| s * mid.iter().enumerate().map(|(j, &m)| m * up.get(j, o)).sum::<f32>())
            .collect()
    }
}

/// One frozen projection with its two adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSite {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub subject: LoraBranch,
    pub image: LoraBranch,
}

impl LoraSite {
    /// Registers base weight, bias and both branches. Base entries are
    /// `name.weight`/`name.bias`; branches live under `lora.subject.name` and
    /// `lora.image.name`.
    pub fn create(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        config: &LoraConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let std = (1.0 / d_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let w: Vec<f32> = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        let weight = params.insert(format!("{name}.weight"), Tensor::matrix(d_in, d_out, w)?, true);
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[1, d_out]), true);
        let subject = LoraBranch::create(params, &format!("lora.subject.{name}"), d_in, d_out, config.subject_rank, rng);
        let image = LoraBranch::create(params, &format!("lora.image.{name}"), d_in, d_out, config.image_rank, rng);
        Ok(Self {
            name: name.to_string(),
            d_in,
            d_out,
            weight,
            bias,
            subject,
            image,
        })
    }

    pub fn branch(&self, gate: Gate) -> Option<&LoraBranch> {
        match gate {
            Gate::Subject => Some(&self.subject),
            Gate::Image => Some(&self.image),
            Gate::None => None,
        }
    }
}

/// Row indices routed to each branch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GateRows {
    pub subject: Vec<usize>,
    pub image: Vec<usize>,
}

impl GateRows {
    pub fn new(labels: &[SegmentKind], mode: GateMode) -> Self {
        let mut rows = GateRows::default();
        for (i, &kind) in labels.iter().enumerate() {
            match gate(kind, mode) {
                Gate::Subject => rows.subject.push(i),
                Gate::Image => rows.image.push(i),
                Gate::None => {}
            }
        }
        rows
    }
}

/// Every adapted site of a model plus the gating mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GatedLoraSet {
    pub sites: Vec<LoraSite>,
    pub mode: GateMode,
}

impl GatedLoraSet {
    /// Branch matrices only; base weights are never included.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        self.sites
            .iter()
            .flat_map(|s| [s.subject.down, s.subject.up, s.image.down, s.image.up])
            .collect()
    }

    pub fn base_parameters(&self) -> Vec<ParamId> {
        self.sites.iter().flat_map(|s| [s.weight, s.bias]).collect()
    }
}

/// `x·W + b` plus the gated low-rank delta on each row.
pub fn gated_project<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamSet,
    site: &LoraSite,
    x: Var,
    rows: &GateRows,
) -> Result<Var> {
    let w = g.param(params, site.weight);
    let b = g.param(params, site.bias);
    let base = g.matmul(x, w)?;
    let mut out = g.add_row(base, b)?;
    for (branch, idx) in [(&site.subject, &rows.subject), (&site.image, &rows.image)] {
        if idx.is_empty() {
            continue;
        }
        let picked = g.gather_rows(x, idx)?;
        let down = g.param(params, branch.down);
        let up = g.param(params, branch.up);
        let mid = g.matmul(picked, down)?;
        let delta = g.matmul(mid, up)?;
        let delta = g.scale(delta, branch.alpha / branch.rank as f32);
        out = g.scatter_add_rows(out, delta, idx)?;
    }
    Ok(out)
}

/// Checks that every label is gated and returns the routed rows.
pub fn gate_rows_checked(labels: &[SegmentKind], rows: usize, mode: GateMode) -> Result<GateRows> {
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
    }
    Ok(GateRows::new(labels, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn site(params: &mut ParamSet, d: usize, rng: &mut ChaCha8Rng) -> LoraSite {
        LoraSite::create(params, "proj", d, d, &LoraConfig::default(), rng).unwrap()
    }

    fn randomize(params: &mut ParamSet, id: ParamId, rng: &mut ChaCha8Rng) {
        params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }

    fn labels() -> Vec<SegmentKind> {
        vec![
            SegmentKind::ConditionImage(0),
            SegmentKind::ConditionText(0),
            SegmentKind::Prompt,
            SegmentKind::Prompt,
            SegmentKind::Noise,
            SegmentKind::Noise,
        ]
    }

    fn project(params: &ParamSet, s: &LoraSite, x: &Tensor, mode: GateMode) -> Tensor {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let rows = gate_rows_checked(&labels(), x.rows(), mode).unwrap();
        let y = gated_project(&mut g, params, s, xv, &rows).unwrap();
        g.tensor(y)
    }

    fn input(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        Tensor::matrix(6, d, (0..6 * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gate_table() {
        assert_eq!(gate(SegmentKind::Prompt, GateMode::Dual), Gate::None);
        assert_eq!(gate(SegmentKind::Noise, GateMode::Dual), Gate::Image);
        assert_eq!(gate(SegmentKind::ConditionText(3), GateMode::Dual), Gate::Subject);
        assert_eq!(gate(SegmentKind::Prompt, GateMode::Uniform), Gate::Subject);
    }

    #[test]
    fn zero_up_matches_base_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let s = site(&mut params, 8, &mut rng);
        let x = input(&mut rng, 8);
        let y = project(&params, &s, &x, GateMode::Dual);
        let mut g = Graph::<f32>::new();
        let (xv, w, b) = (g.constant(&x), g.param(&params, s.weight), g.param(&params, s.bias));
        let base = g.matmul(xv, w).unwrap();
        let base = g.add_row(base, b).unwrap();
        assert_eq!(g.tensor(base).data(), y.data());
    }

    #[test]
    fn prompt_rows_ignore_branch_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let s = site(&mut params, 8, &mut rng);
        let x = input(&mut rng, 8);
        let before = project(&params, &s, &x, GateMode::Dual);
        for id in [s.subject.down, s.subject.up, s.image.down, s.image.up] {
            randomize(&mut params, id, &mut rng);
        }
        let after = project(&params, &s, &x, GateMode::Dual);
        for r in [2, 3] {
            assert_eq!(before.row(r), after.row(r));
        }
        assert_ne!(before.row(0), after.row(0));
        assert_ne!(before.row(4), after.row(4));
    }

    #[test]
    fn mixed_batch_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let s = site(&mut params, 8, &mut rng);
        for id in [s.subject.up, s.image.up] {
            randomize(&mut params, id, &mut rng);
        }
        let x = input(&mut rng, 8);
        let y = project(&params, &s, &x, GateMode::Dual);
        for (r, &kind) in labels().iter().enumerate() {
            let mut g = Graph::<f32>::new();
            let xr = g.constant_matrix(1, 8, x.row(r)).unwrap();
            let w = g.param(&params, s.weight);
            let b = g.param(&params, s.bias);
            let base = g.matmul(xr, w).unwrap();
            let base = g.add_row(base, b).unwrap();
            let mut expect = g.tensor(base).into_data();
            if let Some(branch) = s.branch(gate(kind, GateMode::Dual)) {
                let delta = branch.delta_row(&params, x.row(r));
                let mut g2 = Graph::<f32>::new();
                let d = g2.constant_matrix(1, 8, &delta).unwrap();
                let e = g2.constant_matrix(1, 8, &expect).unwrap();
                let sum = g2.add(e, d).unwrap();
                expect = g2.tensor(sum).into_data();
            }
            let got = y.row(r);
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "row {r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn trainable_count_per_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let s = LoraSite::create(&mut params, "q", 64, 64, &LoraConfig::default(), &mut rng).unwrap();
        let set = GatedLoraSet {
            sites: vec![s],
            mode: GateMode::Dual,
        };
        let ids = set.trainable_parameters();
        assert_eq!(params.numel(&ids), (8 + 8) * 64 + (2 + 2) * 64);
        assert!(GatedLoraSet::default().trainable_parameters().is_empty());
    }

    #[test]
    fn rank_asymmetry_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let bad = LoraConfig {
            subject_rank: 2,
            image_rank: 2,
        };
        assert!(LoraSite::create(&mut params, "q", 4, 4, &bad, &mut rng).is_err());
        assert!(gate_rows_checked(&labels(), 5, GateMode::Dual).is_err());
    }

    #[test]
    fn frozen_base_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let s = site(&mut params, 8, &mut rng);
        params.set_trainable(s.weight, false);
        params.set_trainable(s.bias, false);
        let x = input(&mut rng, 8);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(&x);
        let rows = GateRows::new(&labels()[..4], GateMode::Dual);
        let xv = g.slice_rows(xv, 0, 4).unwrap();
        let y = gated_project(&mut g, &params, &s, xv, &rows).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(s.weight).is_none());
        assert!(grads.param(s.bias).is_none());
        assert!(grads.param(s.subject.up).is_some());
        // no noise rows in the batch, so the image branch sees nothing
        assert!(grads.param(s.image.up).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }
}

//! Rectified-flow objective, Adam, base pretraining and the staged adapter schedule.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{curriculum_batch, pretrain_scene, Corpus, TrainingSample};
use crate::error::{Error, Result};
use crate::layout::PromptSpanTable;
use crate::lora::GateMode;
use crate::model::patch::{patchify, to_signed};
use crate::model::{save_checkpoint, Model, ModelConfig, ModelInput, Phase, RoutingOptions};
use crate::numerics::{Graph, ParamId, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage_iters: [usize; 3],
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub static_routing: bool,
    pub dynamic_routing: bool,
    pub diptych: bool,
    /// Segment-gated adapters; off means one adapter for every row.
    pub dual_lora: bool,
    /// Audit every routed mask during training.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage_iters: [2000, 1000, 1000],
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            static_routing: true,
            dynamic_routing: true,
            diptych: true,
            dual_lora: true,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn routing(&self) -> RoutingOptions {
        RoutingOptions {
            static_routing: self.static_routing,
            dynamic_routing: self.dynamic_routing,
            audit: self.audit,
            ..RoutingOptions::default()
        }
    }
}

/// Text-to-image pretraining of the base model on free-layout scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iters: 6000,
            batch_size: 8,
            lr: 1e-3,
            warmup: 200,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// `x_t = (1−t)·x₀ + t·ε` for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f32,
    pub x_t: Tensor,
}

impl FlowState {
    pub fn new(x0: Tensor, eps: Tensor, t: f32) -> Result<FlowState> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape("clean and noise tensors differ in shape"));
        }
        let data = x0.data().iter().zip(eps.data()).map(|(&a, &e)| (1.0 - t) * a + t * e).collect();
        let x_t = Tensor::new(x0.shape().to_vec(), data)?;
        Ok(FlowState { x0, eps, t, x_t })
    }

    /// Draws `ε ~ N(0, I)` and `t ~ U(0, 1)`.
    pub fn sample(x0: Tensor, rng: &mut impl Rng) -> FlowState {
        let eps: Vec<f32> = (0..x0.numel()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(x0.shape().to_vec(), eps).expect("same shape");
        let mut t: f32 = rng.gen();
        while t == 0.0 {
            t = rng.gen();
        }
        FlowState::new(x0, eps, t).expect("same shape")
    }

    /// Velocity target `ε − x₀`.
    pub fn velocity(&self) -> Vec<f32> {
        self.eps.data().iter().zip(self.x0.data()).map(|(&e, &a)| e - a).collect()
    }
}

/// Clean target in model units (signed patch tokens).
pub fn target_tokens(sample: &TrainingSample, patch: usize) -> Result<Tensor> {
    Ok(to_signed(&patchify(&sample.target, patch)?))
}

/// Records one sample's loss on `g`; only noise-token pixels enter the loss.
pub fn flow_loss(
    g: &mut Graph<f32>,
    model: &Model,
    sample: &TrainingSample,
    state: &FlowState,
    opts: &RoutingOptions,
) -> Result<(crate::numerics::Var, usize)> {
    let input = ModelInput {
        conditions: &sample.conditions,
        prompt: &sample.target_prompt,
        spans: &sample.spans,
        x_t: &state.x_t,
        t: state.t,
    };
    let out = model.forward(g, &input, opts)?;
    let loss = g.mse(out.velocity, &state.velocity())?;
    Ok((loss, out.audits))
}

/// Adam with bias correction over a fixed parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    ids: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, ids: Vec<ParamId>) -> Adam {
        let zeros = |id: &ParamId| vec![0.0; params.get(*id).numel()];
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// Applies the accumulated gradients (scaled by `grad_scale`) and clears them.
    pub fn step(&mut self, params: &mut ParamSet, lr: f32, grad_scale: f32) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, &id) in self.ids.iter().enumerate() {
            let t = params.get_mut(id);
            let Some(grad) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = grad[j] * grad_scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
            t.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    /// 0 for base pretraining, 1–3 for adapter stages.
    pub stage: u8,
    pub loss: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// Routed masks that passed the audit.
    pub audits: usize,
    /// Samples drawn per condition count (index = c).
    pub condition_counts: Vec<usize>,
}

/// One optimizer step over a batch; returns the mean loss and the audit count.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    lr: f32,
    batch: &[TrainingSample],
    rng: &mut ChaCha8Rng,
    opts: &RoutingOptions,
) -> Result<(f32, usize)> {
    let mut total = 0.0;
    let mut audits = 0;
    for sample in batch {
        let state = FlowState::sample(target_tokens(sample, model.config.patch)?, rng);
        let mut g = Graph::<f32>::new();
        let (loss, a) = flow_loss(&mut g, model, sample, &state, opts)?;
        audits += a;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {value} at t = {}", state.t)));
        }
        total += value;
        g.backward(loss)?.accumulate_into(&mut model.params)?;
    }
    adam.step(&mut model.params, lr, 1.0 / batch.len() as f32);
    Ok((total / batch.len() as f32, audits))
}

fn write_losses(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iter,stage,loss\n");
    for r in losses {
        text.push_str(&format!("{},{},{}\n", r.iter, r.stage, r.loss));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn scene_sample(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<TrainingSample> {
    let scene = pretrain_scene(corpus, rng)?;
    Ok(TrainingSample {
        conditions: Vec::new(),
        target: scene.image,
        target_prompt: scene.prompt,
        spans: PromptSpanTable::default(),
        pairing: crate::data::Pairing::Single,
        specs: scene.specs,
    })
}

/// Trains every base parameter on text-to-image scenes with no conditions.
/// Writes `base.ckpt` and `pretrain_loss.csv` when `out` is given.
pub fn pretrain(config: &PretrainConfig, corpus: &Corpus, out: Option<&Path>) -> Result<(Model, Vec<LossRecord>)> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = Model::new(config.model, config.seed)?;
    model.set_phase(Phase::Base);
    let mut adam = Adam::new(&model.params, model.params.trainable_ids());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba5e);
    let opts = RoutingOptions::default();
    let mut losses = Vec::with_capacity(config.iters);
    for it in 0..config.iters {
        let batch = (0..config.batch_size)
            .map(|_| scene_sample(corpus, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let warm = ((it + 1) as f32 / config.warmup.max(1) as f32).min(1.0);
        let (loss, _) = train_step(&mut model, &mut adam, config.lr * warm, &batch, &mut rng, &opts)
            .map_err(|e| annotate(e, it + 1, 0))?;
        losses.push(LossRecord {
            iter: it + 1,
            stage: 0,
            loss,
        });
        if (it + 1) % 100 == 0 {
            log::info!("pretrain iter {} loss {loss:.4}", it + 1);
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_value(config)?;
        save_checkpoint(dir.join("base.ckpt"), &model, config.iters as u64, "base", meta)?;
        write_losses(&dir.join("pretrain_loss.csv"), &losses)?;
    }
    Ok((model, losses))
}

fn annotate(e: Error, iter: usize, stage: u8) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("stage {stage}, iteration {iter}: {msg}")),
        other => other,
    }
}

/// Adapter training over the three curriculum stages. The base is frozen;
/// only adapter branches move. Writes `stage{1,2,3}.ckpt` and `loss.csv`
/// when `out` is given.
pub fn train(config: &TrainConfig, corpus: &Corpus, base: Model, out: Option<&Path>) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut model = base;
    model.set_phase(Phase::Adapter);
    model.set_gate_mode(if config.dual_lora { GateMode::Dual } else { GateMode::Uniform });
    let mut adam = Adam::new(&model.params, model.lora.trainable_parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let opts = config.routing();
    let mut report = TrainReport::default();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut iter = 0;
    for (s, &count) in config.stage_iters.iter().enumerate() {
        let stage = s as u8 + 1;
        for _ in 0..count {
            iter += 1;
            let batch = (0..config.batch_size)
                .map(|_| curriculum_batch(stage, corpus, &mut rng, config.diptych))
                .collect::<Result<Vec<_>>>()?;
            for b in &batch {
                if report.condition_counts.len() <= b.c() {
                    report.condition_counts.resize(b.c() + 1, 0);
                }
                report.condition_counts[b.c()] += 1;
            }
            let (loss, audits) = train_step(&mut model, &mut adam, config.lr, &batch, &mut rng, &opts)
                .map_err(|e| annotate(e, iter, stage))?;
            report.audits += audits;
            report.losses.push(LossRecord { iter, stage, loss });
            if iter % 100 == 0 {
                log::info!("stage {stage} iter {iter} loss {loss:.4}");
            }
        }
        if let Some(dir) = out {
            let meta = serde_json::to_value(config)?;
            save_checkpoint(dir.join(format!("stage{stage}.ckpt")), &model, iter as u64, &stage.to_string(), meta)?;
            write_losses(&dir.join("loss.csv"), &report.losses)?;
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, Extents};

    #[test]
    fn interpolation_identity() {
        let x0 = Tensor::matrix(1, 3, vec![0.5, -1.0, 0.0]).unwrap();
        let eps = Tensor::matrix(1, 3, vec![1.0, 1.0, -2.0]).unwrap();
        let s = FlowState::new(x0, eps, 0.25).unwrap();
        assert_eq!(s.x_t.data(), &[0.625, -0.5, -0.5]);
        assert_eq!(s.velocity(), vec![0.5, 2.0, -2.0]);
    }

    #[test]
    fn zero_predictor_loss_matches_expectation() {
        // zero velocity gives E‖ε − x₀‖²/dim = 1 + mean(x₀²)
        let corpus = generate_corpus(4, 1, 0, Extents::default());
        let model = Model::new(ModelConfig::default(), 0).unwrap();
        let sample: TrainingSample = corpus.single(0, 0).into();
        let x0 = target_tokens(&sample, 4).unwrap();
        let expect = 1.0 + x0.data().iter().map(|v| v * v).sum::<f32>() / x0.numel() as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 200;
        let mut mean = 0.0;
        for _ in 0..trials {
            let state = FlowState::sample(x0.clone(), &mut rng);
            let mut g = Graph::new();
            let (l, _) = flow_loss(&mut g, &model, &sample, &state, &RoutingOptions::default()).unwrap();
            mean += g.value(l)[0] / trials as f32;
        }
        assert!((mean - expect).abs() < 0.02 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let v = vec![0.3f32, -0.2];
        let mut g = Graph::<f32>::new();
        let p = g.constant_matrix(1, 2, &v).unwrap();
        let l = g.mse(p, &v).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let corpus = generate_corpus(8, 1, 0, Extents::default());
        let base = Model::new(ModelConfig::tiny(), 3).unwrap();
        let cfg = TrainConfig {
            stage_iters: [0, 0, 0],
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (m, r) = train(&cfg, &corpus, base.clone(), Some(dir.path())).unwrap();
        assert!(r.losses.is_empty());
        for id in base.params.ids() {
            assert_eq!(base.params.get(id).data(), m.params.get(id).data());
        }
        let ck = crate::model::load_checkpoint(dir.path().join("stage3.ckpt")).unwrap();
        for id in base.params.ids() {
            assert_eq!(base.params.get(id).data(), ck.model.params.get(id).data());
        }
    }

    fn tiny_corpus() -> Corpus {
        // tiny model: 8px targets and 4px conditions
        let mut corpus = generate_corpus(16, 1, 5, Extents::default());
        for c in &mut corpus.conditions {
            *c = c.downscale(4, 4).unwrap();
        }
        for ts in &mut corpus.targets {
            for t in ts {
                *t = t.downscale(4, 4).unwrap();
            }
        }
        corpus.extents = Extents {
            image_edge: 8,
            cond_edge: 4,
        };
        corpus
    }

    /// Stand-in for a pretrained base: fresh models have zero gates and a zero head.
    fn random_base(seed: u64) -> Model {
        let mut m = Model::new(ModelConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.base_parameters() {
            m.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn adapter_training_moves_only_adapters() {
        let corpus = tiny_corpus();
        let base = random_base(4);
        let cfg = TrainConfig {
            stage_iters: [2, 2, 2],
            batch_size: 2,
            audit: true,
            ..TrainConfig::default()
        };
        let (m, r) = train(&cfg, &corpus, base.clone(), None).unwrap();
        for id in m.base_parameters() {
            assert_eq!(base.params.get(id).data(), m.params.get(id).data(), "{}", m.params.name(id));
            assert!(!m.params.get(id).has_grad());
        }
        assert!(m
            .lora
            .trainable_parameters()
            .iter()
            .any(|&id| base.params.get(id).data() != m.params.get(id).data()));
        assert_eq!(r.losses.len(), 6);
        assert!(r.audits > 0);
    }

    #[test]
    fn stage_one_only_never_pairs() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            stage_iters: [3, 0, 0],
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (_, r) = train(&cfg, &corpus, Model::new(ModelConfig::tiny(), 0).unwrap(), None).unwrap();
        assert_eq!(r.condition_counts, vec![0, 6]);
    }

    #[test]
    fn training_is_reproducible() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            stage_iters: [1, 2, 1],
            batch_size: 2,
            ..TrainConfig::default()
        };
        let base = random_base(6);
        let (_, a) = train(&cfg, &corpus, base.clone(), None).unwrap();
        let (_, b) = train(&cfg, &corpus, base, None).unwrap();
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn pretraining_moves_only_base() {
        let corpus = tiny_corpus();
        let cfg = PretrainConfig {
            iters: 2,
            batch_size: 2,
            model: ModelConfig::tiny(),
            ..PretrainConfig::default()
        };
        let (m, losses) = pretrain(&cfg, &corpus, None).unwrap();
        let init = Model::new(ModelConfig::tiny(), 0).unwrap();
        for id in m.lora.trainable_parameters() {
            assert_eq!(init.params.get(id).data(), m.params.get(id).data());
        }
        assert_eq!(losses.len(), 2);
    }
}

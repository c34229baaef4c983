//! Euler integration of the learned velocity field from noise to image, with
//! optional affinity tracing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::vocab::Token;
use crate::data::{ConditionInput, Image, TokenId};
use crate::error::{Error, Result};
use crate::layout::PromptSpanTable;
use crate::model::patch::{from_signed, unpatchify};
use crate::model::{Model, ModelInput, RoutingOptions};
use crate::numerics::Tensor;
use crate::pgm::GrayImage;
use crate::routing::{AffinityMatrix, RoutingAssignment};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub conditions: Vec<ConditionInput>,
    pub prompt: Vec<TokenId>,
    pub spans: PromptSpanTable,
    pub steps: usize,
    pub seed: u64,
    pub routing: RoutingOptions,
    /// Record affinities every `n`-th step; `None` disables tracing.
    pub trace_every: Option<usize>,
}

impl SampleRequest {
    pub fn new(conditions: Vec<ConditionInput>, prompt: Vec<TokenId>, spans: PromptSpanTable) -> Self {
        Self {
            conditions,
            prompt,
            spans,
            steps: 20,
            seed: 0,
            routing: RoutingOptions::default(),
            trace_every: None,
        }
    }

    /// Each span must cover exactly its condition's prompt, up to `a`/`another`
    /// in the first position.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.trace_every == Some(0) {
            return Err(Error::invalid("trace interval must be at least 1"));
        }
        let c = self.conditions.len();
        if c == 0 {
            return Ok(());
        }
        if self.spans.len() != c {
            return Err(Error::invalid(format!("{} spans for {c} conditions", self.spans.len())));
        }
        self.spans.validate(self.prompt.len())?;
        let det = |t: TokenId| t == Token::A.id() || t == Token::Another.id();
        for (k, (span, cond)) in self.spans.iter().zip(&self.conditions).enumerate() {
            let mention = &self.prompt[span.range()];
            let matches = mention.len() == cond.prompt.len()
                && mention
                    .iter()
                    .zip(&cond.prompt)
                    .enumerate()
                    .all(|(z, (&a, &b))| a == b || (z == 0 && det(a) && det(b)));
            if !matches {
                return Err(Error::invalid(format!("span {k} does not match condition {k}'s prompt")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub t: f32,
    pub layer: usize,
    pub affinity: AffinityMatrix,
    pub assignment: RoutingAssignment,
}

/// Affinity snapshots over the denoising trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffinityTrace {
    /// Noise tokens per grid edge.
    pub grid: usize,
    pub entries: Vec<TraceEntry>,
}

/// Initial noise in patch-token units.
pub fn initial_noise(model: &Model, seed: u64) -> Tensor {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cfg.n() * cfg.patch_dim()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(cfg.n(), cfg.patch_dim(), data).expect("sized")
}

/// Integrates `dx/dt = v` from `t = 1` to `t = 0` in `steps` Euler steps.
pub fn sample(model: &Model, req: &SampleRequest) -> Result<(Image, Option<AffinityTrace>)> {
    req.validate()?;
    let cfg = &model.config;
    let mut x = initial_noise(model, req.seed);
    let mut trace = req.trace_every.map(|_| AffinityTrace {
        grid: cfg.grid(),
        entries: Vec::new(),
    });
    let dt = 1.0 / req.steps as f32;
    for s in 0..req.steps {
        let t = 1.0 - s as f32 * dt;
        let record = req.trace_every.is_some_and(|every| s % every == 0);
        let opts = RoutingOptions {
            record,
            ..req.routing
        };
        let input = ModelInput {
            conditions: &req.conditions,
            prompt: &req.prompt,
            spans: &req.spans,
            x_t: &x,
            t,
        };
        let (v, traces) = model.predict(&input, &opts)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite velocity at step {s}")));
        }
        if let Some(tr) = trace.as_mut() {
            tr.entries.extend(traces.into_iter().map(|lt| TraceEntry {
                step: s,
                t,
                layer: lt.layer,
                affinity: lt.affinity,
                assignment: lt.assignment,
            }));
        }
        x.data_mut().iter_mut().zip(v.data()).for_each(|(xi, &vi)| *xi -= dt * vi);
    }
    let image = unpatchify(&from_signed(&x), cfg.image_edge, cfg.image_edge, cfg.patch)?;
    Ok((image, trace))
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    step: usize,
    t: f32,
    layer: usize,
    assignment: RoutingAssignment,
    affinity: serde_json::Value,
}

/// One heatmap per (step, layer, condition) where pixel `(y, x)` is
/// `255·S*[token(y, x), k]`, plus `trace.json` with every assignment.
pub fn export_trace(trace: &AffinityTrace, dir: &Path) -> Result<Vec<PathBuf>> {
    if trace.entries.is_empty() {
        return Err(Error::invalid("trace is empty"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut records = Vec::with_capacity(trace.entries.len());
    for e in &trace.entries {
        for k in 0..e.affinity.conditions() {
            let img = GrayImage::from_unit(trace.grid, trace.grid, &e.affinity.column(k))?;
            let path = dir.join(format!("step{:03}_layer{}_cond{k}.pgm", e.step, e.layer));
            img.save(&path)?;
            files.push(path);
        }
        records.push(TraceRecord {
            step: e.step,
            t: e.t,
            layer: e.layer,
            assignment: e.assignment.clone(),
            affinity: e.affinity.to_json_rows(),
        });
    }
    let path = dir.join("trace.json");
    let text = serde_json::to_string_pretty(&records)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Category, Color, Extents, SubjectSpec, Texture};
    use crate::data::scenes::make_test_case;
    use crate::data::Scenario;
    use crate::model::ModelConfig;

    fn trained_like(seed: u64) -> Model {
        let mut m = Model::new(ModelConfig::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            m.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        m
    }

    fn request(c: usize) -> SampleRequest {
        let colors = [Color::Red, Color::Blue, Color::Green];
        let specs: Vec<SubjectSpec> = (0..c)
            .map(|k| SubjectSpec {
                category: Category::Ball,
                color: colors[k],
                texture: Texture::Solid,
                seed: k as u64,
            })
            .collect();
        let case = make_test_case(Scenario::Single, specs, Extents::default());
        SampleRequest::new(case.conditions, case.prompt, case.spans)
    }

    #[test]
    fn one_step_is_one_euler_step() {
        let model = trained_like(1);
        let mut req = request(2);
        req.steps = 1;
        let (img, _) = sample(&model, &req).unwrap();
        let x1 = initial_noise(&model, req.seed);
        let input = ModelInput {
            conditions: &req.conditions,
            prompt: &req.prompt,
            spans: &req.spans,
            x_t: &x1,
            t: 1.0,
        };
        let (v, _) = model.predict(&input, &req.routing).unwrap();
        let x0: Vec<f32> = x1.data().iter().zip(v.data()).map(|(a, b)| a - b).collect();
        let x0 = Tensor::matrix(x1.rows(), x1.cols(), x0).unwrap();
        assert_eq!(img, unpatchify(&from_signed(&x0), 32, 32, 4).unwrap());
    }

    #[test]
    fn same_seed_same_bytes_and_range() {
        let model = trained_like(2);
        let mut req = request(3);
        req.steps = 4;
        let (a, _) = sample(&model, &req).unwrap();
        let (b, _) = sample(&model, &req).unwrap();
        assert_eq!(a.to_rgb8(), b.to_rgb8());
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        req.seed = 1;
        assert_ne!(sample(&model, &req).unwrap().0.to_rgb8(), a.to_rgb8());
    }

    #[test]
    fn trace_counts_and_files() {
        let model = trained_like(3);
        let mut req = request(3);
        req.steps = 3;
        req.trace_every = Some(1);
        let (_, trace) = sample(&model, &req).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.entries.len(), 3 * model.config.layers);
        let dir = tempfile::tempdir().unwrap();
        let files = export_trace(&trace, dir.path()).unwrap();
        assert_eq!(files.len(), 3 * model.config.layers * 3);
        assert!(dir.path().join("trace.json").exists());
        let first = GrayImage::load(&files[0]).unwrap();
        assert_eq!((first.width, first.height), (8, 8));
        assert!(export_trace(&AffinityTrace::default(), dir.path()).is_err());
    }

    #[test]
    fn mismatched_spans_rejected() {
        let model = trained_like(4);
        let mut req = request(2);
        req.spans = req.spans.swapped(0, 1);
        assert!(sample(&model, &req).is_err());
        let mut req = request(2);
        req.steps = 0;
        assert!(sample(&model, &req).is_err());
    }

    #[test]
    fn zero_conditions_sample_without_trace_entries() {
        let model = trained_like(5);
        let mut req = request(0);
        req.prompt = crate::data::tokenize("a red solid ball").unwrap();
        req.steps = 2;
        req.trace_every = Some(1);
        let (_, trace) = sample(&model, &req).unwrap();
        assert!(trace.unwrap().entries.is_empty());
    }
}

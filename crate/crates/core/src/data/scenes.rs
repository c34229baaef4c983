//! Free-layout multi-subject scenes joined by `and`, used to teach the base
//! model composition and to pose held-out evaluation cases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diptych::{another_prompt, random_specs, render_condition, subject_prompt, ConditionInput, Corpus, Extents};
use super::render::{draw_subject, random_background, Image, Placement, SubjectSpec};
use super::vocab::{find_mentions, Token, TokenId};
use crate::error::{Error, Result};
use crate::layout::{PromptSpan, PromptSpanTable};

/// Span table locating each condition's prompt inside `prompt`.
pub fn find_mentions_spans(prompt: &[TokenId], conditions: &[ConditionInput]) -> Result<PromptSpanTable> {
    let prompts: Vec<Vec<TokenId>> = conditions.iter().map(|c| c.prompt.clone()).collect();
    let spans = find_mentions(prompt, &prompts)?
        .into_iter()
        .map(|(start, len)| PromptSpan::new(start, len))
        .collect();
    PromptSpanTable::new(spans, prompt.len())
}

/// Per-subject prompts for a scene: repeated categories take `another`.
pub fn mention_prompts(specs: &[SubjectSpec]) -> Vec<Vec<TokenId>> {
    specs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            if specs[..k].iter().any(|p| p.category == s.category) {
                another_prompt(s)
            } else {
                subject_prompt(s)
            }
        })
        .collect()
}

/// `p₀ and p₁ and …` with one span per subject.
pub fn scene_prompt(specs: &[SubjectSpec]) -> (Vec<TokenId>, PromptSpanTable) {
    let mut prompt = Vec::new();
    let mut spans = Vec::new();
    for (k, p) in mention_prompts(specs).into_iter().enumerate() {
        if k > 0 {
            prompt.push(Token::And.id());
        }
        spans.push(PromptSpan::new(prompt.len(), p.len()));
        prompt.extend(p);
    }
    let m = prompt.len();
    let table = if specs.is_empty() {
        PromptSpanTable::default()
    } else {
        PromptSpanTable::new(spans, m).expect("spans tile the prompt")
    };
    (prompt, table)
}

/// Renders subjects side by side in random order on a random background.
pub fn compose_scene(specs: &[SubjectSpec], edge: usize, rng: &mut impl Rng) -> Image {
    let mut img = random_background(edge, edge, rng);
    let e = edge as f32;
    let k = specs.len().max(1);
    let mut slots: Vec<usize> = (0..specs.len()).collect();
    slots.shuffle(rng);
    let (lo, hi) = match k {
        1 => (0.4, 0.7),
        2 => (0.36, 0.48),
        _ => (0.27, 1.0 / k as f32),
    };
    let slot_w = e / k as f32;
    for (spec, &slot) in specs.iter().zip(&slots) {
        let size = e * rng.gen_range(lo..hi);
        let margin = size * 0.5;
        let x0 = slot as f32 * slot_w;
        let cx = if slot_w > size {
            rng.gen_range(x0 + margin..=x0 + slot_w - margin)
        } else {
            x0 + slot_w * 0.5
        };
        let placement = Placement {
            cx,
            cy: rng.gen_range(margin..=e - margin),
            size,
            flip: rng.gen_bool(0.5),
        };
        draw_subject(&mut img, spec, &placement);
    }
    img.quantized()
}

/// Text-to-image example with no condition inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub specs: Vec<SubjectSpec>,
    pub image: Image,
    pub prompt: Vec<TokenId>,
}

/// One, two or three corpus subjects (probabilities 0.3 / 0.5 / 0.2).
pub fn pretrain_scene(corpus: &Corpus, rng: &mut impl Rng) -> Result<Scene> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let u: f32 = rng.gen();
    let count = if u < 0.3 {
        1
    } else if u < 0.8 {
        2
    } else {
        3
    };
    let mut specs: Vec<SubjectSpec> = Vec::with_capacity(count);
    while specs.len() < count {
        let s = corpus.subjects[rng.gen_range(0..corpus.len())];
        if !specs.contains(&s) {
            specs.push(s);
        }
    }
    if count == 1 {
        let r = rng.gen_range(0..corpus.targets[0].len());
        let i = corpus.subjects.iter().position(|s| *s == specs[0]).expect("drawn from corpus");
        return Ok(Scene {
            image: corpus.targets[i][r].clone(),
            prompt: subject_prompt(&specs[0]),
            specs,
        });
    }
    let image = compose_scene(&specs, corpus.extents.image_edge, rng);
    let (prompt, _) = scene_prompt(&specs);
    Ok(Scene { specs, image, prompt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "c1")]
    Single,
    #[serde(rename = "c2-random")]
    RandomPair,
    #[serde(rename = "c2-same")]
    SameCategoryPair,
    #[serde(rename = "c3")]
    Triple,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Single,
        Scenario::RandomPair,
        Scenario::SameCategoryPair,
        Scenario::Triple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Single => "c1",
            Scenario::RandomPair => "c2-random",
            Scenario::SameCategoryPair => "c2-same",
            Scenario::Triple => "c3",
        }
    }

    pub fn condition_count(self) -> usize {
        match self {
            Scenario::Single => 1,
            Scenario::RandomPair | Scenario::SameCategoryPair => 2,
            Scenario::Triple => 3,
        }
    }
}

/// Held-out customization request with known ground-truth attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub scenario: Scenario,
    pub specs: Vec<SubjectSpec>,
    pub conditions: Vec<ConditionInput>,
    pub prompt: Vec<TokenId>,
    pub spans: PromptSpanTable,
}

/// Subjects in a test case carry distinct colors so color readout is unambiguous.
fn draw_case_specs(scenario: Scenario, rng: &mut impl Rng) -> Vec<SubjectSpec> {
    loop {
        let mut specs = random_specs(scenario.condition_count(), rng);
        match scenario {
            Scenario::SameCategoryPair => specs[1].category = specs[0].category,
            Scenario::RandomPair
                if specs[1].category == specs[0].category => {
                    continue;
                }
            _ => {}
        }
        let distinct_colors = specs
            .iter()
            .enumerate()
            .all(|(i, s)| specs[..i].iter().all(|p| p.color != s.color));
        if distinct_colors {
            return specs;
        }
    }
}

pub fn make_test_case(scenario: Scenario, specs: Vec<SubjectSpec>, extents: Extents) -> TestCase {
    let (prompt, spans) = scene_prompt(&specs);
    let conditions = specs
        .iter()
        .zip(mention_prompts(&specs))
        .map(|(s, p)| ConditionInput {
            image: render_condition(s, extents.cond_edge),
            prompt: p,
        })
        .collect();
    TestCase {
        scenario,
        specs,
        conditions,
        prompt,
        spans,
    }
}

/// `per_scenario` cases for every scenario, from subjects outside the corpus.
pub fn generate_test_cases(per_scenario: usize, seed: u64, extents: Extents) -> Vec<TestCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_ca5e);
    let mut out = Vec::with_capacity(per_scenario * Scenario::ALL.len());
    for scenario in Scenario::ALL {
        for _ in 0..per_scenario {
            let specs = draw_case_specs(scenario, &mut rng);
            out.push(make_test_case(scenario, specs, extents));
        }
    }
    out
}

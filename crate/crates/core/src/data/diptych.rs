//! Single-subject samples, diptych pairing and the staged sampling schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{draw_subject, random_background, Image, Placement, SubjectSpec, CONDITION_BACKGROUND};
use super::vocab::{Token, TokenId};
use crate::error::{Error, Result};
use crate::layout::{PromptSpan, PromptSpanTable};

/// Image extents shared by the corpus and the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    pub image_edge: usize,
    pub cond_edge: usize,
}

impl Default for Extents {
    fn default() -> Self {
        Self {
            image_edge: 32,
            cond_edge: 16,
        }
    }
}

/// `[A, color, texture, category]`.
pub fn subject_prompt(spec: &SubjectSpec) -> Vec<TokenId> {
    vec![
        Token::A.id(),
        Token::Color(spec.color).id(),
        Token::Texture(spec.texture).id(),
        Token::Category(spec.category).id(),
    ]
}

/// Same prompt with the leading determiner replaced by `another`.
pub fn another_prompt(spec: &SubjectSpec) -> Vec<TokenId> {
    let mut p = subject_prompt(spec);
    p[0] = Token::Another.id();
    p
}

/// Centered condition render on the plain background.
pub fn render_condition(spec: &SubjectSpec, edge: usize) -> Image {
    let mut img = Image::filled(edge, edge, CONDITION_BACKGROUND);
    let e = edge as f32;
    draw_subject(
        &mut img,
        spec,
        &Placement {
            cx: e * 0.5,
            cy: e * 0.5,
            size: e * 0.7,
            flip: false,
        },
    );
    img.quantized()
}

/// Target render `index` of `spec`: random pose, scale and background.
pub fn render_target(spec: &SubjectSpec, edge: usize, index: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(index + 1));
    let mut img = random_background(edge, edge, &mut rng);
    let e = edge as f32;
    let size = e * rng.gen_range(0.4..0.7);
    let margin = size * 0.5;
    let placement = Placement {
        cx: rng.gen_range(margin..=e - margin),
        cy: rng.gen_range(margin..=e - margin),
        size,
        flip: rng.gen_bool(0.5),
    };
    draw_subject(&mut img, spec, &placement);
    img.quantized()
}

/// One subject seen twice: plain condition view and a re-posed target view.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleSample {
    pub spec: SubjectSpec,
    pub condition: Image,
    pub target: Image,
    pub condition_prompt: Vec<TokenId>,
    pub target_prompt: Vec<TokenId>,
}

/// Renders the condition view and target view `index` of `spec`.
pub fn render_subject(spec: &SubjectSpec, extents: Extents, index: u64) -> SingleSample {
    let prompt = subject_prompt(spec);
    SingleSample {
        spec: *spec,
        condition: render_condition(spec, extents.cond_edge),
        target: render_target(spec, extents.image_edge, index),
        condition_prompt: prompt.clone(),
        target_prompt: prompt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Single,
    Random,
    SameCategory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub image: Image,
    pub prompt: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub conditions: Vec<ConditionInput>,
    pub target: Image,
    pub target_prompt: Vec<TokenId>,
    pub spans: PromptSpanTable,
    pub pairing: Pairing,
    pub specs: Vec<SubjectSpec>,
}

impl TrainingSample {
    pub fn c(&self) -> usize {
        self.conditions.len()
    }
}

impl From<SingleSample> for TrainingSample {
    fn from(s: SingleSample) -> Self {
        let m = s.target_prompt.len();
        TrainingSample {
            conditions: vec![ConditionInput {
                image: s.condition,
                prompt: s.condition_prompt,
            }],
            target: s.target,
            target_prompt: s.target_prompt,
            spans: PromptSpanTable::new(vec![PromptSpan::new(0, m)], m).expect("single span"),
            pairing: Pairing::Single,
            specs: vec![s.spec],
        }
    }
}

/// Side-by-side pairing of two distinct subjects under the two-column template
/// `[LEFT, prompt_a, RIGHT, prompt_b]`.
pub fn make_diptych(a: &SingleSample, b: &SingleSample) -> Result<TrainingSample> {
    if a.spec == b.spec {
        return Err(Error::invalid("diptych needs two distinct subjects"));
    }
    let same = a.spec.category == b.spec.category;
    let prompt_b = if same { another_prompt(&b.spec) } else { b.condition_prompt.clone() };
    let mut target_prompt = vec![Token::Left.id()];
    target_prompt.extend_from_slice(&a.condition_prompt);
    target_prompt.push(Token::Right.id());
    target_prompt.extend_from_slice(&prompt_b);
    let la = a.condition_prompt.len();
    let spans = PromptSpanTable::new(
        vec![PromptSpan::new(1, la), PromptSpan::new(la + 2, prompt_b.len())],
        target_prompt.len(),
    )?;
    let wide = a.target.hconcat(&b.target)?;
    let target = wide.downscale(wide.width / a.target.height.max(1), 1)?.quantized();
    Ok(TrainingSample {
        conditions: vec![
            ConditionInput {
                image: a.condition.clone(),
                prompt: a.condition_prompt.clone(),
            },
            ConditionInput {
                image: b.condition.clone(),
                prompt: prompt_b,
            },
        ],
        target,
        target_prompt,
        spans,
        pairing: if same { Pairing::SameCategory } else { Pairing::Random },
        specs: vec![a.spec, b.spec],
    })
}

/// Rendered single-subject corpus: every subject with its target views.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub extents: Extents,
    pub subjects: Vec<SubjectSpec>,
    pub conditions: Vec<Image>,
    pub targets: Vec<Vec<Image>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn single(&self, subject: usize, render: usize) -> SingleSample {
        let spec = self.subjects[subject];
        let prompt = subject_prompt(&spec);
        SingleSample {
            spec,
            condition: self.conditions[subject].clone(),
            target: self.targets[subject][render].clone(),
            condition_prompt: prompt.clone(),
            target_prompt: prompt,
        }
    }

    fn random_single(&self, rng: &mut impl Rng) -> SingleSample {
        let s = rng.gen_range(0..self.len());
        let r = rng.gen_range(0..self.targets[s].len());
        self.single(s, r)
    }
}

/// Draws `count` subject specs from a master seed.
pub fn random_specs(count: usize, rng: &mut impl Rng) -> Vec<SubjectSpec> {
    use super::vocab::{Category, Color, Texture};
    (0..count)
        .map(|_| SubjectSpec {
            category: *Category::ALL.choose(rng).expect("nonempty"),
            color: *Color::ALL.choose(rng).expect("nonempty"),
            texture: *Texture::ALL.choose(rng).expect("nonempty"),
            seed: rng.gen(),
        })
        .collect()
}

/// Byte-reproducible corpus of `subjects × renders` samples.
pub fn generate_corpus(subjects: usize, renders: usize, seed: u64, extents: Extents) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = random_specs(subjects, &mut rng);
    let conditions = specs.iter().map(|s| render_condition(s, extents.cond_edge)).collect();
    let targets = specs
        .iter()
        .map(|s| (0..renders as u64).map(|r| render_target(s, extents.image_edge, r)).collect())
        .collect();
    Corpus {
        extents,
        subjects: specs,
        conditions,
        targets,
    }
}

/// Curriculum stage: 1 singles, 2 mostly random diptychs, 3 same-category diptychs.
pub fn curriculum_batch(stage: u8, corpus: &Corpus, rng: &mut impl Rng, diptych: bool) -> Result<TrainingSample> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if !diptych {
        return match stage {
            1..=3 => Ok(corpus.random_single(rng).into()),
            _ => Err(Error::invalid(format!("stage {stage} is not 1, 2 or 3"))),
        };
    }
    match stage {
        1 => Ok(corpus.random_single(rng).into()),
        2 => {
            if rng.gen_bool(0.8) {
                let a = corpus.random_single(rng);
                loop {
                    let b = corpus.random_single(rng);
                    if b.spec != a.spec {
                        return make_diptych(&a, &b);
                    }
                }
            } else {
                Ok(corpus.random_single(rng).into())
            }
        }
        3 => {
            let peers_of = |s: usize| -> Vec<usize> {
                let spec = corpus.subjects[s];
                (0..corpus.len())
                    .filter(|&i| corpus.subjects[i].category == spec.category && corpus.subjects[i] != spec)
                    .collect()
            };
            let candidates: Vec<usize> = (0..corpus.len()).filter(|&s| !peers_of(s).is_empty()).collect();
            let &s = candidates
                .choose(rng)
                .ok_or_else(|| Error::Data("corpus has no two distinct subjects of one category".into()))?;
            let a = corpus.single(s, rng.gen_range(0..corpus.targets[s].len()));
            let &p = peers_of(s).choose(rng).expect("candidate has a peer");
            let r = rng.gen_range(0..corpus.targets[p].len());
            make_diptych(&a, &corpus.single(p, r))
        }
        _ => Err(Error::invalid(format!("stage {stage} is not 1, 2 or 3"))),
    }
}

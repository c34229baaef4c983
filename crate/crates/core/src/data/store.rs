//! On-disk dataset: `dataset.json`, `train/<subject>_<render>/` and `test/<case>/`,
//! each sample directory holding `cond_k.png`, `target.png` and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::diptych::{generate_corpus, ConditionInput, Corpus, Extents, Pairing};
use super::render::{Image, SubjectSpec};
use super::scenes::{generate_test_cases, Scenario, TestCase};
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::layout::PromptSpanTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub subjects: usize,
    pub renders: usize,
    pub test_per_scenario: usize,
    pub extents: Extents,
}

impl DatasetInfo {
    pub fn new(subjects: usize, seed: u64) -> Self {
        Self {
            seed,
            subjects,
            renders: 4,
            test_per_scenario: 32,
            extents: Extents::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    pairing: Pairing,
    specs: Vec<SubjectSpec>,
    condition_prompts: Vec<Vec<TokenId>>,
    target_prompt: Vec<TokenId>,
    spans: PromptSpanTable,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    scenario: Option<Scenario>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn train_dir(root: &Path, subject: usize, render: usize) -> PathBuf {
    root.join("train").join(format!("{subject:05}_{render}"))
}

fn test_dir(root: &Path, case: usize) -> PathBuf {
    root.join("test").join(format!("{case:04}"))
}

/// Renders the corpus and held-out test cases and writes them under `root`.
pub fn build_dataset(root: &Path, info: &DatasetInfo) -> Result<Corpus> {
    let corpus = generate_corpus(info.subjects, info.renders, info.seed, info.extents);
    mkdir(root)?;
    write_json(&root.join("dataset.json"), info)?;
    for (s, spec) in corpus.subjects.iter().enumerate() {
        for r in 0..info.renders {
            let dir = train_dir(root, s, r);
            mkdir(&dir)?;
            let single = corpus.single(s, r);
            single.condition.save_png(dir.join("cond_0.png"))?;
            single.target.save_png(dir.join("target.png"))?;
            let m = single.target_prompt.len();
            write_json(
                &dir.join("meta.json"),
                &SampleMeta {
                    pairing: Pairing::Single,
                    specs: vec![*spec],
                    condition_prompts: vec![single.condition_prompt],
                    target_prompt: single.target_prompt,
                    spans: PromptSpanTable::new(vec![crate::layout::PromptSpan::new(0, m)], m)?,
                    scenario: None,
                },
            )?;
        }
    }
    let cases = generate_test_cases(info.test_per_scenario, info.seed, info.extents);
    for (i, case) in cases.iter().enumerate() {
        let dir = test_dir(root, i);
        mkdir(&dir)?;
        for (k, cond) in case.conditions.iter().enumerate() {
            cond.image.save_png(dir.join(format!("cond_{k}.png")))?;
        }
        write_json(
            &dir.join("meta.json"),
            &SampleMeta {
                pairing: match case.scenario.condition_count() {
                    1 => Pairing::Single,
                    _ if case.scenario == Scenario::SameCategoryPair => Pairing::SameCategory,
                    _ => Pairing::Random,
                },
                specs: case.specs.clone(),
                condition_prompts: case.conditions.iter().map(|c| c.prompt.clone()).collect(),
                target_prompt: case.prompt.clone(),
                spans: case.spans.clone(),
                scenario: Some(case.scenario),
            },
        )?;
    }
    Ok(corpus)
}

pub fn load_info(root: &Path) -> Result<DatasetInfo> {
    let path = root.join("dataset.json");
    if !path.exists() {
        return Err(Error::Data(format!("{} is not a dataset (no dataset.json)", root.display())));
    }
    read_json(&path)
}

fn load_image(path: &Path, edge: usize) -> Result<Image> {
    let img = Image::load_png(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if img.width != edge || img.height != edge {
        return Err(Error::Data(format!(
            "{} is {}x{}, expected {edge}x{edge}",
            path.display(),
            img.width,
            img.height
        )));
    }
    Ok(img)
}

/// Reads the training corpus written by [`build_dataset`].
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let info = load_info(root)?;
    let mut corpus = Corpus {
        extents: info.extents,
        subjects: Vec::with_capacity(info.subjects),
        conditions: Vec::with_capacity(info.subjects),
        targets: Vec::with_capacity(info.subjects),
    };
    for s in 0..info.subjects {
        let mut targets = Vec::with_capacity(info.renders);
        for r in 0..info.renders {
            let dir = train_dir(root, s, r);
            if r == 0 {
                let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
                let spec = *meta
                    .specs
                    .first()
                    .ok_or_else(|| Error::Data(format!("{}: no subject spec", dir.display())))?;
                corpus.subjects.push(spec);
                corpus.conditions.push(load_image(&dir.join("cond_0.png"), info.extents.cond_edge)?);
            }
            targets.push(load_image(&dir.join("target.png"), info.extents.image_edge)?);
        }
        corpus.targets.push(targets);
    }
    Ok(corpus)
}

/// Reads the held-out test cases written by [`build_dataset`].
pub fn load_test_cases(root: &Path) -> Result<Vec<TestCase>> {
    let info = load_info(root)?;
    let count = info.test_per_scenario * Scenario::ALL.len();
    (0..count)
        .map(|i| {
            let dir = test_dir(root, i);
            let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
            let scenario = meta
                .scenario
                .ok_or_else(|| Error::Data(format!("{}: missing scenario", dir.display())))?;
            meta.spans.validate(meta.target_prompt.len())?;
            let conditions = meta
                .condition_prompts
                .into_iter()
                .enumerate()
                .map(|(k, prompt)| {
                    Ok(ConditionInput {
                        image: load_image(&dir.join(format!("cond_{k}.png")), info.extents.cond_edge)?,
                        prompt,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TestCase {
                scenario,
                specs: meta.specs,
                conditions,
                prompt: meta.target_prompt,
                spans: meta.spans,
            })
        })
        .collect()
}

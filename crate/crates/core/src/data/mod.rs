//! Synthetic subject domain: vocabulary, rendering, pairing and storage.

pub mod diptych;
pub mod render;
pub mod scenes;
pub mod store;
pub mod vocab;

pub use diptych::{
    curriculum_batch, generate_corpus, make_diptych, render_subject, ConditionInput, Corpus, Extents, Pairing,
    SingleSample, TrainingSample,
};
pub use render::{Image, SubjectSpec};
pub use scenes::{find_mentions_spans, generate_test_cases, pretrain_scene, Scenario, Scene, TestCase};
pub use store::{build_dataset, load_corpus, load_test_cases, DatasetInfo};
pub use vocab::{detokenize, find_mentions, tokenize, Category, Color, Texture, Token, TokenId};

//! Index bookkeeping for the composite sequence
//! `[CI⁰; CT⁰; …; CIᶜ⁻¹; CTᶜ⁻¹; T; X]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment sizes of one composite sequence. Every condition block has the
/// same image/text token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Number of conditions.
    pub c: usize,
    /// Image tokens per condition.
    pub n_prime: usize,
    /// Text tokens per condition.
    pub m_prime: usize,
    /// Prompt tokens.
    pub m: usize,
    /// Noise (target image) tokens.
    pub n: usize,
}

impl SequenceLayout {
    pub fn new(c: usize, n_prime: usize, m_prime: usize, m: usize, n: usize) -> Self {
        Self {
            c,
            n_prime,
            m_prime,
            m,
            n,
        }
    }

    /// Tokens per condition block, `m′ + n′`.
    pub fn l_prime(&self) -> usize {
        self.m_prime + self.n_prime
    }

    /// Prompt plus noise tokens, `m + n`.
    pub fn l(&self) -> usize {
        self.m + self.n
    }

    /// Full sequence length `c·l′ + l`.
    pub fn total(&self) -> usize {
        self.condition_tokens() + self.l()
    }

    /// Length of the whole condition region, `c·l′`.
    pub fn condition_tokens(&self) -> usize {
        self.c * self.l_prime()
    }

    pub fn condition_block(&self, k: usize) -> std::ops::Range<usize> {
        k * self.l_prime()..(k + 1) * self.l_prime()
    }

    pub fn condition_image(&self, k: usize) -> std::ops::Range<usize> {
        let s = k * self.l_prime();
        s..s + self.n_prime
    }

    pub fn condition_text(&self, k: usize) -> std::ops::Range<usize> {
        let s = k * self.l_prime() + self.n_prime;
        s..s + self.m_prime
    }

    pub fn prompt(&self) -> std::ops::Range<usize> {
        let s = self.condition_tokens();
        s..s + self.m
    }

    pub fn noise(&self) -> std::ops::Range<usize> {
        let s = self.condition_tokens() + self.m;
        s..s + self.n
    }

    /// Segment of sequence position `index`.
    pub fn classify(&self, index: usize) -> Result<SegmentKind> {
        let cond = self.condition_tokens();
        if index < cond {
            let k = index / self.l_prime();
            let within = index % self.l_prime();
            return Ok(if within < self.n_prime {
                SegmentKind::ConditionImage(k)
            } else {
                SegmentKind::ConditionText(k)
            });
        }
        if index < cond + self.m {
            return Ok(SegmentKind::Prompt);
        }
        if index < self.total() {
            return Ok(SegmentKind::Noise);
        }
        Err(Error::invalid(format!(
            "index {index} outside sequence of length {}",
            self.total()
        )))
    }

    /// Condition that owns condition-region column `j`, i.e. `⌊j / l′⌋`.
    pub fn condition_of_column(&self, j: usize) -> Result<usize> {
        if j >= self.condition_tokens() {
            return Err(Error::invalid(format!(
                "column {j} outside condition region of length {}",
                self.condition_tokens()
            )));
        }
        Ok(j / self.l_prime())
    }

    /// Segment label of every position, in order.
    pub fn labels(&self) -> Vec<SegmentKind> {
        (0..self.total())
            .map(|i| self.classify(i).expect("index in range"))
            .collect()
    }
}

/// Which segment a sequence position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    ConditionImage(usize),
    ConditionText(usize),
    Prompt,
    Noise,
}

impl SegmentKind {
    pub fn condition(self) -> Option<usize> {
        match self {
            SegmentKind::ConditionImage(k) | SegmentKind::ConditionText(k) => Some(k),
            _ => None,
        }
    }

    /// Dense index used for the learned segment embedding.
    pub fn type_index(self) -> usize {
        match self {
            SegmentKind::ConditionImage(_) => 0,
            SegmentKind::ConditionText(_) => 1,
            SegmentKind::Prompt => 2,
            SegmentKind::Noise => 3,
        }
    }
}

/// Start and length of one condition's mention inside the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpan {
    pub start: usize,
    pub len: usize,
}

impl PromptSpan {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// One prompt span per condition, in condition order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSpanTable {
    spans: Vec<PromptSpan>,
}

impl PromptSpanTable {
    /// Validates spans against a prompt of `m` tokens: non-empty, in bounds,
    /// pairwise disjoint.
    pub fn new(spans: Vec<PromptSpan>, m: usize) -> Result<Self> {
        let table = Self { spans };
        table.validate(m)?;
        Ok(table)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        for (k, s) in self.spans.iter().enumerate() {
            if s.len == 0 {
                return Err(Error::invalid(format!("span {k} is empty")));
            }
            if s.end() > m {
                return Err(Error::invalid(format!(
                    "span {k} ({}, {}) exceeds prompt length {m}",
                    s.start, s.len
                )));
            }
        }
        for (a, sa) in self.spans.iter().enumerate() {
            for (b, sb) in self.spans.iter().enumerate().skip(a + 1) {
                if sa.start < sb.end() && sb.start < sa.end() {
                    return Err(Error::invalid(format!("spans {a} and {b} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn get(&self, k: usize) -> PromptSpan {
        self.spans[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptSpan> {
        self.spans.iter()
    }

    /// Same spans with conditions `a` and `b` exchanged.
    pub fn swapped(&self, a: usize, b: usize) -> Self {
        let mut spans = self.spans.clone();
        spans.swap(a, b);
        Self { spans }
    }

    pub fn as_slice(&self) -> &[PromptSpan] {
        &self.spans
    }
}

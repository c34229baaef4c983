//! Closed synthetic vocabulary: structural words plus every attribute value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    Pink,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Cyan,
        Color::Blue,
        Color::Purple,
        Color::Pink,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Orange => [1.00, 0.50, 0.00],
            Color::Yellow => [0.95, 0.90, 0.10],
            Color::Green => [0.10, 0.80, 0.20],
            Color::Cyan => [0.00, 0.85, 0.90],
            Color::Blue => [0.15, 0.30, 1.00],
            Color::Purple => [0.60, 0.20, 0.90],
            Color::Pink => [1.00, 0.30, 0.70],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Striped, Texture::Dotted];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Ball,
    Box,
    Cup,
    Hat,
    Star,
    Fish,
    Tree,
    Kite,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Ball,
        Category::Box,
        Category::Cup,
        Category::Hat,
        Category::Star,
        Category::Fish,
        Category::Tree,
        Category::Kite,
    ];
}

/// One vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    A,
    Another,
    Left,
    Right,
    And,
    Color(Color),
    Texture(Texture),
    Category(Category),
}

const STRUCTURAL: [Token; 5] = [Token::A, Token::Another, Token::Left, Token::Right, Token::And];

impl Token {
    pub fn all() -> Vec<Token> {
        let mut out = STRUCTURAL.to_vec();
        out.extend(Color::ALL.iter().map(|&c| Token::Color(c)));
        out.extend(Texture::ALL.iter().map(|&t| Token::Texture(t)));
        out.extend(Category::ALL.iter().map(|&c| Token::Category(c)));
        out
    }

    pub fn id(self) -> TokenId {
        let base = STRUCTURAL.len() as u32;
        match self {
            Token::A => 0,
            Token::Another => 1,
            Token::Left => 2,
            Token::Right => 3,
            Token::And => 4,
            Token::Color(c) => base + c as u32,
            Token::Texture(t) => base + Color::ALL.len() as u32 + t as u32,
            Token::Category(c) => {
                base + (Color::ALL.len() + Texture::ALL.len()) as u32 + c as u32
            }
        }
    }

    pub fn from_id(id: TokenId) -> Result<Token> {
        Token::all()
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("token id {id} outside vocabulary")))
    }

    pub fn word(self) -> String {
        let json = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        match self {
            Token::A => "a".into(),
            Token::Another => "another".into(),
            Token::Left => "left".into(),
            Token::Right => "right".into(),
            Token::And => "and".into(),
            Token::Color(c) => json(serde_json::to_value(c).unwrap()),
            Token::Texture(t) => json(serde_json::to_value(t).unwrap()),
            Token::Category(c) => json(serde_json::to_value(c).unwrap()),
        }
    }
}

/// Number of entries in the vocabulary.
pub fn vocab_size() -> usize {
    Token::all().len()
}

/// Whitespace tokenizer over the closed vocabulary (case-insensitive).
pub fn tokenize(text: &str) -> Result<Vec<TokenId>> {
    let all = Token::all();
    text.split_whitespace()
        .map(|w| {
            let w = w.to_ascii_lowercase();
            all.iter()
                .find(|t| t.word() == w)
                .map(|t| t.id())
                .ok_or_else(|| Error::invalid(format!("unknown word '{w}'")))
        })
        .collect()
}

pub fn detokenize(ids: &[TokenId]) -> Result<String> {
    let words = ids
        .iter()
        .map(|&id| Token::from_id(id).map(Token::word))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// Locates each condition prompt inside the target prompt, tolerating an
/// `a` ↔ `another` swap at the first position. Mentions are matched left to
/// right and must not overlap.
pub fn find_mentions(target: &[TokenId], conditions: &[Vec<TokenId>]) -> Result<Vec<(usize, usize)>> {
    let a = Token::A.id();
    let another = Token::Another.id();
    let det = |t: TokenId| t == a || t == another;
    let same = |x: TokenId, y: TokenId, first: bool| x == y || (first && det(x) && det(y));
    let mut taken = vec![false; target.len()];
    let mut out = Vec::with_capacity(conditions.len());
    for (k, cond) in conditions.iter().enumerate() {
        if cond.is_empty() {
            return Err(Error::invalid(format!("condition {k} has an empty prompt")));
        }
        let found = (0..=target.len().saturating_sub(cond.len())).find(|&s| {
            s + cond.len() <= target.len()
                && (s..s + cond.len()).all(|p| !taken[p])
                && cond
                    .iter()
                    .enumerate()
                    .all(|(z, &t)| same(target[s + z], t, z == 0))
        });
        match found {
            Some(s) => {
                taken[s..s + cond.len()].iter_mut().for_each(|t| *t = true);
                out.push((s, cond.len()));
            }
            None => {
                return Err(Error::invalid(format!(
                    "condition {k} prompt is not mentioned in the target prompt"
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_invertible() {
        let all = Token::all();
        for (i, t) in all.iter().enumerate() {
            assert_eq!(t.id() as usize, i);
            assert_eq!(Token::from_id(t.id()).unwrap(), *t);
        }
        assert_eq!(vocab_size(), 24);
        assert!(Token::from_id(24).is_err());
    }

    #[test]
    fn tokenize_round_trip() {
        let ids = tokenize("A red Striped ball and another blue solid ball").unwrap();
        assert_eq!(detokenize(&ids).unwrap(), "a red striped ball and another blue solid ball");
        assert!(tokenize("a mauve ball").is_err());
    }

    #[test]
    fn mentions_with_another() {
        let target = tokenize("a red solid ball and another blue solid ball").unwrap();
        let c0 = tokenize("a red solid ball").unwrap();
        let c1 = tokenize("a blue solid ball").unwrap();
        assert_eq!(find_mentions(&target, &[c0.clone(), c1]).unwrap(), vec![(0, 4), (5, 4)]);
        let missing = tokenize("a green solid ball").unwrap();
        assert!(find_mentions(&target, &[c0, missing]).is_err());
    }
}

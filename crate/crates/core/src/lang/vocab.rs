use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::cot::CoTPlan;
use super::grammar::{closed_word_set, normalize_text};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

/// Token table over the grammar's closed word set. Ids 0..3 are specials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build() -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(closed_word_set())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Token ids for the language encoder. `truncated` is set when input was cut
/// on the right to fit `t_max`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn finish(mut ids: Vec<u32>, t_max: usize) -> TokenSequence {
    let truncated = ids.len() > t_max;
    if truncated {
        log::warn!("token sequence of {} truncated to {}", ids.len(), t_max);
        ids.truncate(t_max);
    }
    if ids.is_empty() {
        ids.push(PAD);
    }
    TokenSequence { ids, truncated }
}

fn words(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    normalize_text(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(|w| vocab.id(w))
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary, t_max: usize) -> TokenSequence {
    finish(words(text, vocab), t_max)
}

/// `raw <sep> step1 <sep> step2 ...`
pub fn tokenize_with_plan(raw: &str, plan: &CoTPlan, vocab: &Vocabulary, t_max: usize) -> TokenSequence {
    let mut ids = words(raw, vocab);
    for step in &plan.steps {
        ids.push(SEP);
        ids.extend(words(step, vocab));
    }
    finish(ids, t_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::cot::{decompose_rule_based, Instruction};

    #[test]
    fn construction_is_deterministic() {
        let a = Vocabulary::build();
        let b = Vocabulary::build();
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.word(PAD), Some("<pad>"));
        assert_eq!(
            a.id("ball"),
            a.tokens().iter().position(|t| t == "ball").unwrap() as u32
        );
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build();
        assert_eq!(tokenize("", &v, 64).ids, vec![PAD]);
        let seq = tokenize("Grasp the bowl", &v, 64);
        assert_eq!(seq.ids, vec![v.id("grasp"), v.id("the"), v.id("bowl")]);
        assert!(!seq.truncated);
        assert_eq!(tokenize("zebra", &v, 64).ids, vec![UNK]);

        let long = "ball ".repeat(70);
        let cut = tokenize(&long, &v, 64);
        assert_eq!(cut.len(), 64);
        assert!(cut.truncated);
    }

    #[test]
    fn every_grammar_word_is_known() {
        let v = Vocabulary::build();
        let instr = Instruction::parse("put the chocolate pudding in the basket and the cream cheese on the tray");
        let plan = decompose_rule_based(&instr);
        let seq = tokenize_with_plan(&instr.raw, &plan, &v, 64);
        assert!(!seq.ids.contains(&UNK));
        assert!(!seq.truncated);
        assert_eq!(seq.ids.iter().filter(|&&i| i == SEP).count(), plan.steps.len());
        assert!(seq.ids.iter().all(|&i| (i as usize) < v.len()));
    }
}

//! Instruction handling: closed task grammar, tokenization, step plans.

pub mod cot;
pub mod external;
pub mod grammar;
pub mod vocab;

pub use cot::{decompose_rule_based, format_llm_prompt, parse_steps, CoTPlan, Instruction};
pub use external::{decompose_external, ExternalConfig};
pub use grammar::{Slots, Template};
pub use vocab::{tokenize, tokenize_with_plan, TokenSequence, Vocabulary, PAD, SEP, UNK};

//! Whitespace word-level tokenizer over the closed generator vocabulary.

use std::collections::HashMap;

use crate::error::{CoreError, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const REFUSE_ID: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<refuse>"];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Specials take ids 0..4; vocabulary words follow in the given order.
    pub fn from_vocab(vocab: &[String]) -> Result<Tokenizer> {
        let mut words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        words.extend(vocab.iter().cloned());
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(CoreError::config(format!("duplicate vocabulary token {w}")));
            }
        }
        Ok(Tokenizer { words, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|tok| {
                self.index.get(tok).copied().ok_or_else(|| {
                    CoreError::contract(format!("token {tok:?} not in the closed vocabulary"))
                })
            })
            .collect()
    }

    /// Render generated ids as text; specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < SPECIAL_TOKENS.len() as u32 {
                continue;
            }
            if let Some(w) = self.words.get(id as usize) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(w);
            }
        }
        out
    }
}

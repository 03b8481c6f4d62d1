use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, Sentence};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Dense word-form index. 0 is padding, 1 is the unknown word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    forms: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(forms: Vec<String>) -> Self {
        let index = forms
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Vocab { forms, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.forms
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, form: &str) -> Option<usize> {
        self.index.get(form).copied()
    }

    pub fn lookup(&self, form: &str) -> usize {
        self.get(form).unwrap_or(UNK)
    }

    pub fn form(&self, index: usize) -> Option<&str> {
        self.forms.get(index).map(String::as_str)
    }

    pub fn encode(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.tokens.iter().map(|t| self.lookup(&t.form)).collect()
    }
}

/// Forms seen at least `min_count` times, most frequent first, ties broken
/// lexicographically.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Vocab {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in corpus.sentences.iter().flat_map(|s| &s.tokens) {
        *counts.entry(t.form.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut forms = vec!["<pad>".to_string(), "<unk>".to_string()];
    forms.extend(kept.into_iter().map(|(f, _)| f.to_string()));
    Vocab::from(forms)
}

use super::Sentence;
use crate::error::{Error, Result};

/// Three `s x s` relation matrices of one sentence, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySet {
    pub size: usize,
    /// `[i][j] = 1` iff token i+1 is the head of token j+1.
    pub head_to_dep: Vec<f64>,
    pub dep_to_head: Vec<f64>,
    pub self_loop: Vec<f64>,
}

impl AdjacencySet {
    /// From 1-based heads (0 = root). Root attachments produce no edge.
    pub fn from_heads(heads: &[usize]) -> std::result::Result<Self, String> {
        let s = heads.len();
        let mut head_to_dep = vec![0.0; s * s];
        let mut dep_to_head = vec![0.0; s * s];
        let mut self_loop = vec![0.0; s * s];
        for (j, &h) in heads.iter().enumerate() {
            self_loop[j * s + j] = 1.0;
            if h == 0 {
                continue;
            }
            if h > s {
                return Err(format!("token {} has head {h} outside 0..={s}", j + 1));
            }
            head_to_dep[(h - 1) * s + j] = 1.0;
            dep_to_head[j * s + (h - 1)] = 1.0;
        }
        Ok(AdjacencySet {
            size: s,
            head_to_dep,
            dep_to_head,
            self_loop,
        })
    }

    /// Sentence with no dependency edges: only self-loops.
    pub fn edgeless(size: usize) -> Self {
        AdjacencySet::from_heads(&vec![0; size]).expect("root-only heads are in range")
    }

    /// The three matrices in fixed order: head→dep, dep→head, self.
    pub fn relations(&self) -> [&[f64]; 3] {
        [&self.head_to_dep, &self.dep_to_head, &self.self_loop]
    }

    /// Reorder tokens so that new token `k` is old token `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let s = self.size;
        let p = |m: &[f64]| {
            let mut out = vec![0.0; s * s];
            for i in 0..s {
                for j in 0..s {
                    out[i * s + j] = m[perm[i] * s + perm[j]];
                }
            }
            out
        };
        AdjacencySet {
            size: s,
            head_to_dep: p(&self.head_to_dep),
            dep_to_head: p(&self.dep_to_head),
            self_loop: p(&self.self_loop),
        }
    }
}

pub fn build_adjacency(sentence: &Sentence) -> Result<AdjacencySet> {
    AdjacencySet::from_heads(&sentence.heads()).map_err(|message| Error::Structure {
        sentence: sentence.source_id.clone(),
        message,
    })
}

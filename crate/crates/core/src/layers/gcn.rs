use crate::corpus::AdjacencySet;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Graph convolution over the three dependency relations of a sentence.
///
/// For token j: `relu(Σ_r W_r · (Xᵀ A_r)[:, j] + b)`, where the relations
/// are head→dependent, dependent→head and the self-loop. Each relation has
/// its own `o x v` weight; the bias is shared and the activation is applied
/// once, after the relation channels are summed.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    /// Weights in relation order: head→dep, dep→head, self.
    pub weights: [ParamId; 3],
    /// `o x 1`.
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        let weights = ["w_head_to_dep", "w_dep_to_head", "w_self"].map(|name| {
            super::weight(store, rng, format!("{prefix}.{name}"), &[out_dim, in_dim], in_dim, out_dim)
        });
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim, 1]));
        GcnLayer {
            weights,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        3 * out_dim * in_dim + out_dim
    }

    /// `x` is `s x v`; the result is `s x o`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, adj: &AdjacencySet) -> Result<Var> {
        let (s, v) = g.shape(x);
        if v != self.in_dim {
            return Err(Error::dim("gcn input", &[s, v], &[self.out_dim, self.in_dim]));
        }
        if adj.size != s {
            return Err(Error::dim("gcn adjacency", &[s, v], &[adj.size, adj.size]));
        }
        let mut total: Option<Var> = None;
        for (rel, &w) in adj.relations().iter().zip(&self.weights) {
            // row j of (A^T X) aggregates the tokens related to j
            let mut a_t = vec![0.0; s * s];
            for i in 0..s {
                for j in 0..s {
                    a_t[j * s + i] = rel[i * s + j];
                }
            }
            let a_t = g.constant(s, s, a_t)?;
            let agg = g.matmul(a_t, x)?;
            let w = g.param(store, w);
            let w_t = g.transpose(w);
            let pre = g.matmul(agg, w_t)?;
            total = Some(match total {
                Some(t) => g.add(t, pre)?,
                None => pre,
            });
        }
        let b = g.param(store, self.bias);
        let b_row = g.transpose(b);
        let total = total.expect("three relations");
        let pre = g.add(total, b_row)?;
        Ok(g.relu(pre))
    }
}

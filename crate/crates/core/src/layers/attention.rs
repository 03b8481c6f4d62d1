use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Var};

/// Multi-head scaled dot-product self-attention without positional
/// encoding. Heads of width `d_h = n / h` are concatenated and projected
/// back to `n` by `w_o`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    /// Per head: `[w_q, w_k, w_v]`, each `n x d_h`.
    pub heads: Vec<[ParamId; 3]>,
    /// `(h * d_h) x n`.
    pub w_o: ParamId,
    pub width: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    /// `width` must be divisible by `heads`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "attention width {width} not divisible by {heads} heads");
        let head_dim = width / heads;
        let heads = (0..heads)
            .map(|h| {
                ["w_q", "w_k", "w_v"].map(|name| {
                    super::weight(
                        store,
                        rng,
                        format!("{prefix}.head{h}.{name}"),
                        &[width, head_dim],
                        width,
                        head_dim,
                    )
                })
            })
            .collect();
        let w_o = super::weight(store, rng, format!("{prefix}.w_o"), &[width, width], width, width);
        MultiHeadAttention {
            heads,
            w_o,
            width,
            head_dim,
        }
    }

    pub fn param_count(width: usize) -> usize {
        // h heads x 3 projections of n x n/h, plus the n x n output map
        3 * width * width + width * width
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        self.forward_with_weights(g, store, x, mask).map(|(out, _)| out)
    }

    /// Output together with each head's `s x s` attention matrix. Keys whose
    /// mask entry is false receive zero weight.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        let (s, n) = g.shape(x);
        if n != self.width {
            return Err(Error::dim("attention input", &[s, n], &[s, self.width]));
        }
        if mask.len() != s {
            return Err(Error::dim("attention mask", &[s, n], &[mask.len()]));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for [wq, wk, wv] in &self.heads {
            let wq = g.param(store, *wq);
            let wk = g.param(store, *wk);
            let wv = g.param(store, *wv);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let k_t = g.transpose(k);
            let scores = g.matmul(q, k_t)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax_rows(scores, Some(mask))?;
            outputs.push(g.matmul(attn, v)?);
            weights.push(attn);
        }
        let joined = g.concat_cols(&outputs)?;
        let wo = g.param(store, self.w_o);
        Ok((g.matmul(joined, wo)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::test_util::{input_param, permute_rows, random_input};
    use crate::tensor::{grad_check, GradCheckOptions};

    #[test]
    fn singleton_sequence() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 4, 2);
        let mut g = Graph::new();
        let x = random_input(&mut g, &mut rng, 1, 4);
        let (out, weights) = attn.forward_with_weights(&mut g, &store, x, &[true]).unwrap();
        for w in &weights {
            assert_eq!(g.value(*w), &[1.0]);
        }
        // with unit weights the output is concat_h(x W_v^h) W_o
        let mut parts = Vec::new();
        for [_, _, wv] in &attn.heads {
            let wv = g.param(&store, *wv);
            parts.push(g.matmul(x, wv).unwrap());
        }
        let joined = g.concat_cols(&parts).unwrap();
        let wo = g.param(&store, attn.w_o);
        let expected = g.matmul(joined, wo).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(expected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 4, 2);
        for [wq, wk, _] in &attn.heads {
            store.get_mut(*wq).value.values_mut().fill(0.0);
            store.get_mut(*wk).value.values_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = random_input(&mut g, &mut rng, 2, 4);
        let (out, weights) = attn.forward_with_weights(&mut g, &store, x, &[true, true]).unwrap();
        for w in &weights {
            assert_eq!(g.value(*w), &[0.5; 4]);
        }
        let v = g.value(out);
        for c in 0..4 {
            assert!((v[c] - v[4 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one_over_admitted_keys() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let mut store = ParamStore::new();
            let s = rng.range(1, 7);
            let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 6, 3);
            let mut mask: Vec<bool> = (0..s).map(|_| rng.bernoulli(0.7)).collect();
            mask[rng.below(s)] = true;
            let mut g = Graph::new();
            let values = (0..s * 6).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let x = g.constant(s, 6, values).unwrap();
            let (_, weights) = attn.forward_with_weights(&mut g, &store, x, &mask).unwrap();
            for w in weights {
                let wv = g.value(w);
                for r in 0..s {
                    let row = &wv[r * s..(r + 1) * s];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for (j, &m) in mask.iter().enumerate() {
                        if !m {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(4);
        for _ in 0..10 {
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 4, 2);
            let s = 5;
            let mut perm: Vec<usize> = (0..s).collect();
            rng.shuffle(&mut perm);
            let mut g = Graph::new();
            let x = random_input(&mut g, &mut rng, s, 4);
            let out = attn.forward(&mut g, &store, x, &[true; 5]).unwrap();
            let xp = permute_rows(g.value(x), 4, &perm);
            let xp = g.constant(s, 4, xp).unwrap();
            let outp = attn.forward(&mut g, &store, xp, &[true; 5]).unwrap();
            let expected = permute_rows(g.value(out), 4, &perm);
            for (a, b) in g.value(outp).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch() {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, &mut Rng::new(0), "attn", 4, 2);
        let mut g = Graph::new();
        let x = g.zeros(2, 3);
        assert!(attn.forward(&mut g, &store, x, &[true, true]).is_err());
        let x = g.zeros(2, 4);
        assert!(attn.forward(&mut g, &store, x, &[true]).is_err());
    }

    #[test]
    fn passes_grad_check() {
        let mut rng = Rng::new(5);
        for _ in 0..4 {
            let s = rng.range(1, 6);
            let heads = rng.range(1, 3);
            let width = heads * rng.range(1, 3);
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", width, heads);
            let xid = input_param(&mut store, &mut rng, "x", s, width);
            let mut mask: Vec<bool> = (0..s).map(|_| rng.bernoulli(0.7)).collect();
            mask[0] = true;
            let target: Vec<f64> = (0..s * width).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let report = grad_check(&mut store, &[], GradCheckOptions::default(), |g, st| {
                let x = g.param(st, xid);
                let out = attn.forward(g, st, x, &mask)?;
                let t = g.constant(s, width, target.clone())?;
                let prod = g.mul(out, t)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}

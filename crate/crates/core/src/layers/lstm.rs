use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// One LSTM direction. Gate pre-activations are `x W_x + h_prev W_h + b`,
/// laid out as `[input | forget | output | candidate]` blocks of width `u`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    /// `n x 4u`.
    pub w_x: ParamId,
    /// `u x 4u`.
    pub w_h: ParamId,
    /// `1 x 4u`; the forget block starts at +1.
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        let u4 = 4 * hidden;
        let w_x = super::weight(store, rng, format!("{prefix}.w_x"), &[input, u4], input + hidden, u4);
        let w_h = super::weight(store, rng, format!("{prefix}.w_h"), &[hidden, u4], input + hidden, u4);
        let mut b = Tensor::zeros(&[1, u4]);
        b.values_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{prefix}.bias"), b);
        LstmCell {
            w_x,
            w_h,
            bias,
            hidden,
        }
    }

    /// Hidden states for the positions visited in `order`. Positions with a
    /// false mask are skipped: the state carries over and their output row
    /// is a zero constant.
    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool], order: impl Iterator<Item = usize>) -> Result<Vec<Var>> {
        let (s, _) = g.shape(x);
        let u = self.hidden;
        let w_x = g.param(store, self.w_x);
        let w_h = g.param(store, self.w_h);
        let b = g.param(store, self.bias);
        let projected = g.matmul(x, w_x)?;
        let projected = g.add(projected, b)?;
        let mut h = g.zeros(1, u);
        let mut c = g.zeros(1, u);
        let mut out: Vec<Option<Var>> = vec![None; s];
        for t in order {
            if !mask[t] {
                continue;
            }
            let xt = g.gather_rows(projected, &[t])?;
            let rec = g.matmul(h, w_h)?;
            let z = g.add(xt, rec)?;
            let i = g.slice_cols(z, 0, u)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(z, u, u)?;
            let f = g.sigmoid(f);
            let o = g.slice_cols(z, 2 * u, u)?;
            let o = g.sigmoid(o);
            let cand = g.slice_cols(z, 3 * u, u)?;
            let cand = g.tanh(cand);
            let kept = g.mul(f, c)?;
            let fresh = g.mul(i, cand)?;
            c = g.add(kept, fresh)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(|v| v.unwrap_or_else(|| g.zeros(1, u))).collect())
    }
}

/// Left-to-right and right-to-left LSTMs, outputs concatenated per token.
#[derive(Debug, Clone)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstmLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        BiLstmLayer {
            forward: LstmCell::new(store, rng, &format!("{prefix}.fwd"), input, hidden),
            backward: LstmCell::new(store, rng, &format!("{prefix}.bwd"), input, hidden),
            input,
            hidden,
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        2 * ((input + hidden) * 4 * hidden + 4 * hidden)
    }

    /// `x` is `s x n`; the result is `s x 2u` with zero rows where `mask`
    /// is false.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        let (s, n) = g.shape(x);
        if n != self.input {
            return Err(Error::dim("bilstm input", &[s, n], &[s, self.input]));
        }
        if mask.len() != s {
            return Err(Error::dim("bilstm mask", &[s, n], &[mask.len()]));
        }
        let fwd = self.forward.run(g, store, x, mask, 0..s)?;
        let bwd = self.backward.run(g, store, x, mask, (0..s).rev())?;
        let fwd = g.concat_rows(&fwd)?;
        let bwd = g.concat_rows(&bwd)?;
        g.concat_cols(&[fwd, bwd])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::test_util::{input_param, random_input};
    use crate::tensor::{grad_check, GradCheckOptions};

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let layer = BiLstmLayer::new(&mut store, &mut rng, "lstm", 3, 2);
        for p in store.iter_mut() {
            p.value.values_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = random_input(&mut g, &mut rng, 4, 3);
        let y = layer.forward(&mut g, &store, x, &[true; 4]).unwrap();
        assert_eq!(g.shape(y), (4, 4));
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sees_the_same_input_both_ways() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let layer = BiLstmLayer::new(&mut store, &mut rng, "lstm", 3, 2);
        let bwd_ids = [layer.backward.w_x, layer.backward.w_h, layer.backward.bias];
        let fwd_ids = [layer.forward.w_x, layer.forward.w_h, layer.forward.bias];
        for (b, f) in bwd_ids.iter().zip(fwd_ids) {
            let v = store.get(f).value.clone();
            store.get_mut(*b).value = v;
        }
        let mut g = Graph::new();
        let x = random_input(&mut g, &mut rng, 1, 3);
        let y = layer.forward(&mut g, &store, x, &[true]).unwrap();
        assert_eq!(g.shape(y), (1, 4));
        let v = g.value(y);
        assert_eq!(&v[..2], &v[2..]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let layer = BiLstmLayer::new(&mut store, &mut Rng::new(0), "lstm", 2, 3);
        let b = store.get(layer.forward.bias).value.values();
        assert_eq!(b, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_rows_are_zero_and_get_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let layer = BiLstmLayer::new(&mut store, &mut rng, "lstm", 3, 2);
        let xid = input_param(&mut store, &mut rng, "x", 5, 3);
        let mask = [true, false, true, true, false];
        let mut g = Graph::new();
        let x = g.param(&store, xid);
        let y = layer.forward(&mut g, &store, x, &mask).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let (yv, dx) = (g.value(y).to_vec(), g.grad(x));
        for (t, &m) in mask.iter().enumerate() {
            if !m {
                assert!(yv[t * 4..(t + 1) * 4].iter().all(|&v| v == 0.0));
                assert!(dx[t * 3..(t + 1) * 3].iter().all(|&d| d == 0.0));
            }
        }

        // masked rows are skipped, so the state flows as if they were absent
        let mut g = Graph::new();
        let x = g.param(&store, xid);
        let kept = g.gather_rows(x, &[0, 2, 3]).unwrap();
        let short = layer.forward(&mut g, &store, kept, &[true; 3]).unwrap();
        let sv = g.value(short);
        for (k, t) in [0, 2, 3].iter().enumerate() {
            assert_eq!(&sv[k * 4..(k + 1) * 4], &yv[t * 4..(t + 1) * 4]);
        }
    }

    #[test]
    fn width_mismatch() {
        let mut store = ParamStore::new();
        let layer = BiLstmLayer::new(&mut store, &mut Rng::new(0), "lstm", 3, 2);
        let mut g = Graph::new();
        let x = g.zeros(2, 4);
        assert!(layer.forward(&mut g, &store, x, &[true; 2]).is_err());
    }

    #[test]
    fn passes_grad_check_over_five_steps() {
        let mut rng = Rng::new(4);
        for _ in 0..3 {
            let n = rng.range(1, 5);
            let u = rng.range(1, 4);
            let mut store = ParamStore::new();
            let layer = BiLstmLayer::new(&mut store, &mut rng, "lstm", n, u);
            let xid = input_param(&mut store, &mut rng, "x", 5, n);
            let target: Vec<f64> = (0..5 * 2 * u).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mask = [true, true, false, true, true];
            let report = grad_check(&mut store, &[], GradCheckOptions::default(), |g, st| {
                let x = g.param(st, xid);
                let y = layer.forward(g, st, x, &mask)?;
                let t = g.constant(5, 2 * u, target.clone())?;
                let p = g.mul(y, t)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, NormBuffers, ParamId, ParamStore, Rng, Tensor, Var};

/// Same-length 1-D convolution; kernel stored as `[width, c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize, c_in: usize, c_out: usize) -> Self {
        let kernel = super::weight(
            store,
            rng,
            format!("{prefix}.kernel"),
            &[width, c_in, c_out],
            width * c_in,
            width * c_out,
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, c_out]));
        Conv1d {
            kernel,
            bias,
            width,
            c_in,
            c_out,
        }
    }

    pub fn param_count(width: usize, c_in: usize, c_out: usize) -> usize {
        width * c_in * c_out + c_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        g.conv1d(x, k, b, self.width)
    }
}

/// Two-channel convolutional front-end: channel A stacks two width-3
/// convolutions, channel B is one width-2 convolution. Both use relu; the
/// channels are concatenated and batch-normalised over valid tokens.
#[derive(Debug, Clone)]
pub struct CnnFrontEnd {
    pub channel_a: [Conv1d; 2],
    pub channel_b: Conv1d,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: NormBuffers,
    pub input: usize,
    pub filters_a: usize,
    pub filters_b: usize,
}

pub const WIDTH_A: usize = 3;
pub const WIDTH_B: usize = 2;

impl CnnFrontEnd {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, filters_a: usize, filters_b: usize) -> Self {
        let channel_a = [
            Conv1d::new(store, rng, &format!("{prefix}.a0"), WIDTH_A, input, filters_a),
            Conv1d::new(store, rng, &format!("{prefix}.a1"), WIDTH_A, filters_a, filters_a),
        ];
        let channel_b = Conv1d::new(store, rng, &format!("{prefix}.b0"), WIDTH_B, input, filters_b);
        let width = filters_a + filters_b;
        let gamma = store.add(format!("{prefix}.norm.gamma"), Tensor::full(&[1, width], 1.0));
        let beta = store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[1, width]));
        let running = NormBuffers {
            mean: store.add_buffer(format!("{prefix}.norm.running_mean"), Tensor::zeros(&[1, width])),
            var: store.add_buffer(format!("{prefix}.norm.running_var"), Tensor::full(&[1, width], 1.0)),
        };
        CnnFrontEnd {
            channel_a,
            channel_b,
            gamma,
            beta,
            running,
            input,
            filters_a,
            filters_b,
        }
    }

    pub fn output_width(&self) -> usize {
        self.filters_a + self.filters_b
    }

    /// Trainable scalars (running statistics excluded).
    pub fn param_count(input: usize, filters_a: usize, filters_b: usize) -> usize {
        Conv1d::param_count(WIDTH_A, input, filters_a)
            + Conv1d::param_count(WIDTH_A, filters_a, filters_a)
            + Conv1d::param_count(WIDTH_B, input, filters_b)
            + 2 * (filters_a + filters_b)
    }

    /// In training mode the batch statistics are recorded on the graph for
    /// a later running-statistics update.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool], mode: Mode) -> Result<Var> {
        Ok(self.forward_batch(g, store, &[x], &[mask], mode)?.remove(0))
    }

    /// Convolutions run per sentence; normalisation statistics are taken
    /// over the valid tokens of the whole batch.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: &[Var],
        masks: &[&[bool]],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        if xs.len() != masks.len() || xs.is_empty() {
            return Err(Error::dim("cnn batch", &[xs.len()], &[masks.len()]));
        }
        let mut joined = Vec::with_capacity(xs.len());
        let mut lengths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (s, v) = g.shape(x);
            if v != self.input {
                return Err(Error::dim("cnn input", &[s, v], &[s, self.input]));
            }
            let a = self.channel_a[0].forward(g, store, x)?;
            let a = g.relu(a);
            let a = self.channel_a[1].forward(g, store, a)?;
            let a = g.relu(a);
            let b = self.channel_b.forward(g, store, x)?;
            let b = g.relu(b);
            joined.push(g.concat_cols(&[a, b])?);
            lengths.push(s);
        }
        let all = g.concat_rows(&joined)?;
        let mask: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (out, stats) = g.batch_norm(
            all,
            gamma,
            beta,
            &mask,
            store.get(self.running.mean).value.values(),
            store.get(self.running.var).value.values(),
            mode,
        )?;
        if let Some(stats) = stats {
            g.record_norm_stats(self.running, stats);
        }
        if xs.len() == 1 {
            return Ok(vec![out]);
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(xs.len());
        for s in lengths {
            let rows: Vec<usize> = (start..start + s).collect();
            parts.push(g.gather_rows(out, &rows)?);
            start += s;
        }
        Ok(parts)
    }
}

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Var};

#[derive(Debug, Clone)]
pub struct HighwayLayer {
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_tr: ParamId,
    pub b_tr: ParamId,
}

/// `J` stacked highway layers: `y = Tr ⊙ H + (1 - Tr) ⊙ x` with
/// `H = relu(x W_h + b_h)` and `Tr = sigmoid(x W_tr + b_tr)`. A negative
/// `b_tr` biases every layer toward carrying its input through.
#[derive(Debug, Clone)]
pub struct HighwayBlock {
    pub layers: Vec<HighwayLayer>,
    pub width: usize,
}

impl HighwayBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize, depth: usize, transform_bias: f64) -> Self {
        let layers = (0..depth)
            .map(|j| HighwayLayer {
                w_h: super::weight(store, rng, format!("{prefix}.{j}.w_h"), &[width, width], width, width),
                b_h: super::constant(store, format!("{prefix}.{j}.b_h"), &[1, width], 0.0),
                w_tr: super::weight(store, rng, format!("{prefix}.{j}.w_tr"), &[width, width], width, width),
                b_tr: super::constant(store, format!("{prefix}.{j}.b_tr"), &[1, width], transform_bias),
            })
            .collect();
        HighwayBlock { layers, width }
    }

    pub fn param_count(width: usize, depth: usize) -> usize {
        depth * 2 * (width * width + width)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (s, n) = g.shape(x);
        if n != self.width {
            return Err(Error::dim("highway input", &[s, n], &[s, self.width]));
        }
        let mut y = x;
        for layer in &self.layers {
            let w_h = g.param(store, layer.w_h);
            let b_h = g.param(store, layer.b_h);
            let w_tr = g.param(store, layer.w_tr);
            let b_tr = g.param(store, layer.b_tr);
            let h = g.matmul(y, w_h)?;
            let h = g.add(h, b_h)?;
            let h = g.relu(h);
            let tr = g.matmul(y, w_tr)?;
            let tr = g.add(tr, b_tr)?;
            let tr = g.sigmoid(tr);
            let carry = g.one_minus(tr);
            let transformed = g.mul(tr, h)?;
            let kept = g.mul(carry, y)?;
            y = g.add(transformed, kept)?;
        }
        Ok(y)
    }
}

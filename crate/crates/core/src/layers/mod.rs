//! Parameterised building blocks. Each layer owns [`ParamId`] handles into a
//! shared [`ParamStore`] and appends its forward computation to a [`Graph`].
//!
//! Parameter names are hierarchical (`gcn.w_self`, `attn.head2.w_q`, ...) and
//! are the keys of the checkpoint format.

mod attention;
mod cnn;
mod gcn;
mod highway;
mod lstm;

pub use attention::MultiHeadAttention;
pub use cnn::{CnnFrontEnd, Conv1d};
pub use gcn::GcnLayer;
pub use highway::{HighwayBlock, HighwayLayer};
pub use lstm::{BiLstmLayer, LstmCell};

use std::collections::HashMap;

use crate::tensor::{BatchStats, NormBuffers, ParamId, ParamStore, Rng, Tensor};

pub const NORM_MOMENTUM: f64 = 0.9;

/// Glorot-uniform weight registered under `name`.
pub(crate) fn weight(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: String,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ParamId {
    store.add(name, Tensor::glorot(shape, fan_in, fan_out, rng))
}

pub(crate) fn constant(store: &mut ParamStore, name: String, shape: &[usize], value: f64) -> ParamId {
    store.add(name, Tensor::full(shape, value))
}

/// Fold the batch statistics observed over one optimiser step into the
/// running buffers: observations of the same layer are pooled, then
/// `running = momentum * running + (1 - momentum) * pooled`.
pub fn update_running_stats(store: &mut ParamStore, observed: &[(NormBuffers, BatchStats)], momentum: f64) {
    let mut pooled: Vec<(NormBuffers, usize, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut slot: HashMap<NormBuffers, usize> = HashMap::new();
    for (key, stats) in observed {
        let i = *slot.entry(*key).or_insert_with(|| {
            pooled.push((*key, 0, vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()]));
            pooled.len() - 1
        });
        let (_, count, sum, sum_sq) = &mut pooled[i];
        *count += stats.count;
        let n = stats.count as f64;
        for c in 0..stats.mean.len() {
            sum[c] += n * stats.mean[c];
            sum_sq[c] += n * (stats.var[c] + stats.mean[c] * stats.mean[c]);
        }
    }
    for (key, count, sum, sum_sq) in pooled {
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        for (buf, fresh) in [(key.mean, mean), (key.var, var)] {
            let values = store.get_mut(buf).value.values_mut();
            for (r, f) in values.iter_mut().zip(fresh) {
                *r = momentum * *r + (1.0 - momentum) * f;
            }
        }
    }
}

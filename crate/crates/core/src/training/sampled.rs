//! Sampled softmax: a loss over the true class and a few sampled false
//! classes, touching only their weight rows.

use crate::error::{Error, Result};
use crate::graph::{Endpoint, GraphBuilder};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone)]
pub struct SampledSoftmax {
    /// Mean cross-entropy over the batch.
    pub loss: Endpoint,
    /// `[batch, S+1]` class ids; column 0 is the true class.
    pub candidates: Endpoint,
    /// `[batch·(S+1), dim]` weight rows read by the step.
    pub rows: Endpoint,
    /// `[batch, S+1]`
    pub logits: Endpoint,
}

#[derive(Debug, Clone)]
pub struct FullSoftmax {
    pub loss: Endpoint,
    /// `[batch, vocab]`
    pub logits: Endpoint,
}

/// Multiply-add work and weight bytes read by one softmax layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxCost {
    pub flops: u64,
    pub weight_bytes: u64,
}

impl SoftmaxCost {
    /// Cost of producing `logits` of shape `[batch, classes]` from
    /// `dim`-wide hidden vectors, reading `rows` weight rows.
    pub fn new(batch: usize, classes: usize, dim: usize, rows: usize, elem_bytes: usize) -> Self {
        SoftmaxCost {
            flops: 2 * (batch * classes * dim) as u64,
            weight_bytes: (rows * dim * elem_bytes) as u64,
        }
    }

    /// Cost of the full layer, from the weight matrix and hidden batch
    /// actually used.
    pub fn of_full(weights: &Tensor, hidden: &Tensor) -> Self {
        let (vocab, dim) = (weights.dims()[0], weights.dims()[1]);
        SoftmaxCost::new(hidden.dims()[0], vocab, dim, vocab, weights.dtype().size_of())
    }

    /// Cost of the sampled layer, from the gathered rows and candidate ids
    /// it produced.
    pub fn of_sampled(rows: &Tensor, candidates: &Tensor) -> Self {
        let (batch, classes) = (candidates.dims()[0], candidates.dims()[1]);
        let (n, dim) = (rows.dims()[0], rows.dims()[1]);
        SoftmaxCost::new(batch, classes, dim, n, rows.dtype().size_of())
    }
}

/// One-hot `[batch, classes]` labels with the hot entry in column 0.
fn first_column(batch: usize, classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0; batch * classes];
    for r in 0..batch {
        v[r * classes] = 1.0;
    }
    crate::tensor::ops::cast(&Tensor::new([batch, classes], v)?, dtype)
}

/// `weights` is a `[vocab, dim]` variable handle, `hidden` a `[batch, dim]`
/// float tensor and `labels` i64 `[batch]`. The sampler draws
/// `num_sampled` distinct false classes per example, never the true one,
/// and changes draws every step.
pub fn build_sampled_softmax(
    b: &mut GraphBuilder,
    weights: &Endpoint,
    hidden: &Endpoint,
    labels: &Endpoint,
    batch: usize,
    dim: usize,
    vocab: usize,
    num_sampled: usize,
    dtype: DType,
    seed: i64,
) -> Result<SampledSoftmax> {
    let weights = weights.clone();
    let lookup = move |b: &mut GraphBuilder, ids: &Endpoint| {
        let table = b.read(&weights);
        b.gather(&table, ids)
    };
    build_sampled_softmax_with(b, &lookup, hidden, labels, batch, dim, vocab, num_sampled, dtype, seed)
}

/// As [`build_sampled_softmax`], with weight rows fetched by `lookup`,
/// which maps i64 class ids `[k]` to rows `[k, dim]`. Use it when the
/// weights are sharded.
pub fn build_sampled_softmax_with(
    b: &mut GraphBuilder,
    lookup: &dyn Fn(&mut GraphBuilder, &Endpoint) -> Endpoint,
    hidden: &Endpoint,
    labels: &Endpoint,
    batch: usize,
    dim: usize,
    vocab: usize,
    num_sampled: usize,
    dtype: DType,
    seed: i64,
) -> Result<SampledSoftmax> {
    if num_sampled >= vocab {
        return Err(Error::invalid(format!("num_sampled {num_sampled} must be below the vocabulary size {vocab}")));
    }
    let classes = num_sampled + 1;
    let candidates = Endpoint::new(
        b.op(
            "CandidateSampler",
            std::slice::from_ref(labels),
            vec![
                ("num_sampled", num_sampled.into()),
                ("range_max", vocab.into()),
                ("seed", seed.into()),
                ("per_step", true.into()),
            ],
        ),
        0,
    );
    let flat = b.reshape(&candidates, &[batch * classes]);
    let rows = lookup(b, &flat);
    let w3 = b.reshape(&rows, &[batch, classes, dim]);
    let h3 = b.reshape(hidden, &[batch, dim, 1]);
    let l3 = b.batch_matmul(&w3, &h3, false, false);
    let logits = b.reshape(&l3, &[batch, classes]);
    let target = b.constant(first_column(batch, classes, dtype)?);
    let xent = b.softmax_xent(&logits, &target);
    let loss = b.reduce_mean(&xent, None);
    Ok(SampledSoftmax {
        loss,
        candidates,
        rows,
        logits,
    })
}

/// The full layer for comparison: logits against every class.
/// `labels_one_hot` is `[batch, vocab]`.
pub fn build_full_softmax(b: &mut GraphBuilder, weights: &Endpoint, hidden: &Endpoint, labels_one_hot: &Endpoint) -> FullSoftmax {
    let table = b.read(weights);
    let logits = b.matmul_t(hidden, &table, false, true);
    let xent = b.softmax_xent(&logits, labels_one_hot);
    let loss = b.reduce_mean(&xent, None);
    FullSoftmax { loss, logits }
}

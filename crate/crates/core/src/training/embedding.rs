//! Embedding tables split across parameter-server shards.

use crate::error::{Error, Result};
use crate::graph::{Endpoint, GraphBuilder};
use crate::tensor::{ops, DType, Shape, Tensor};

#[derive(Debug, Clone)]
pub struct ShardedEmbedding {
    /// One variable handle per shard. Row `r` of the logical table is row
    /// `r / s` of shard `r mod s`.
    pub shards: Vec<Endpoint>,
    /// `[k, dim]` rows for the `k` looked-up indices.
    pub output: Endpoint,
    /// Assigns the initial table, when one was given.
    pub init: Option<String>,
    pub vocab: usize,
    pub dim: usize,
}

/// Rows held by shard `i` of `s` for a table of `vocab` rows.
pub fn shard_rows(vocab: usize, s: usize, i: usize) -> usize {
    if i >= vocab {
        0
    } else {
        (vocab - i).div_ceil(s)
    }
}

/// Splits a `[vocab, dim]` table into its shards.
pub fn split_table(table: &Tensor, s: usize) -> Result<Vec<Tensor>> {
    let vocab = table.dims().first().copied().ok_or_else(|| Error::invalid("table must have rank >= 1"))?;
    (0..s)
        .map(|i| {
            let idx: Vec<i64> = (i..vocab).step_by(s).map(|r| r as i64).collect();
            ops::gather_rows(table, &Tensor::vector(idx))
        })
        .collect()
}

/// Looks up `indices` (i64 `[k]`) in a `[vocab, dim]` table sharded
/// `s = shard_devices.len()` ways by index mod s. Each shard's gather runs
/// on the shard's device; the partition and stitch run wherever the
/// indices live. An empty device string leaves a shard unconstrained.
pub fn build_sharded_embedding(
    b: &mut GraphBuilder,
    name: &str,
    vocab: usize,
    dim: usize,
    dtype: DType,
    shard_devices: &[String],
    indices: &Endpoint,
    initial: Option<&Tensor>,
) -> Result<ShardedEmbedding> {
    let s = shard_devices.len();
    if s == 0 || vocab == 0 {
        return Err(Error::invalid("a sharded embedding needs at least one shard and one row"));
    }
    if let Some(t) = initial {
        if t.dims() != [vocab, dim] || t.dtype() != dtype {
            return Err(Error::invalid(format!(
                "initial table must be {dtype} [{vocab}, {dim}], got {} {}",
                t.dtype(),
                t.shape()
            )));
        }
    }
    let parts = initial.map(|t| split_table(t, s)).transpose()?;
    let shards: Vec<Endpoint> = shard_devices
        .iter()
        .enumerate()
        .map(|(i, dev)| {
            b.with_device(dev, |b| {
                b.variable(
                    &format!("{name}/shard_{i}"),
                    dtype,
                    Shape::new(vec![shard_rows(vocab, s, i), dim]),
                )
            })
        })
        .collect();

    let s_const = b.constant(Tensor::scalar(s as i64));
    let shard_of = b.binary("Mod", indices, &s_const);
    let local = b.binary("FloorDiv", indices, &s_const);
    let positions = b.unary("RangeLike", indices);
    let local_parts = b.dynamic_partition(&local, &shard_of, s);
    let pos_parts = b.dynamic_partition(&positions, &shard_of, s);
    let mut rows = Vec::with_capacity(s);
    for (i, dev) in shard_devices.iter().enumerate() {
        let r = b.with_device(dev, |b| {
            let table = b.read(&shards[i]);
            b.gather(&table, &local_parts[i])
        });
        rows.push(r);
    }
    let output = b.dynamic_stitch(&pos_parts, &rows);

    let init = match parts {
        Some(parts) => {
            let mut assigns = Vec::with_capacity(s);
            for (i, (t, dev)) in parts.into_iter().zip(shard_devices).enumerate() {
                let a = b.with_device(dev, |b| {
                    let v = b.constant(t);
                    b.assign(&shards[i], &v)
                });
                assigns.push(a.node);
            }
            Some(b.noop(&assigns))
        }
        None => None,
    };
    Ok(ShardedEmbedding {
        shards,
        output,
        init,
        vocab,
        dim,
    })
}

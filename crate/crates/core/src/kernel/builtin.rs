//! The standard CPU kernels.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{KernelFactory, OpContext, OpKernel, Value};
use crate::cancel::POLL;
use crate::error::{Error, Result};
use crate::graph::NodeDef;
use crate::persistence;
use crate::state::{QueueState, RefHandle, Resource, ResourceKind, VariableState};
use crate::tensor::ops::{self, BinaryOp, CompareOp};
use crate::tensor::{DType, Shape, Tensor};

type Reg<'a> = dyn FnMut(&str, Option<DType>, KernelFactory) + 'a;

fn boxed(f: impl Fn(&mut OpContext<'_>) -> Result<()> + Send + Sync + 'static) -> Result<Box<dyn OpKernel>> {
    Ok(Box::new(f))
}

fn factory(f: impl Fn(&NodeDef) -> Result<Box<dyn OpKernel>> + Send + Sync + 'static) -> KernelFactory {
    Arc::new(f)
}

/// A kernel with no attributes computing one output from its tensor inputs.
fn simple(reg: &mut Reg<'_>, op: &str, f: fn(&[&Tensor]) -> Result<Tensor>) {
    reg(
        op,
        None,
        factory(move |_| {
            boxed(move |ctx| {
                let ins: Vec<&Tensor> = ctx.inputs.iter().map(|v| v.tensor()).collect::<Result<_>>()?;
                let out = f(&ins)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
}

/// Seed for one invocation. Per-step ops count their own runs rather than
/// using the step id, which starts at a random offset in each session.
fn seed_for(seed: u64, runs: &AtomicU64, per_step: bool) -> u64 {
    if per_step {
        let n = runs.fetch_add(1, Ordering::Relaxed);
        seed ^ n.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    } else {
        seed
    }
}

/// Resolves a `shape` attr that may contain a single -1 against `n` elements.
fn resolve_shape(spec: &[i64], n: usize, op: &str) -> Result<Shape> {
    let mut dims = Vec::with_capacity(spec.len());
    let mut unknown = None;
    let mut known = 1usize;
    for (i, &d) in spec.iter().enumerate() {
        match d {
            -1 if unknown.is_none() => {
                unknown = Some(i);
                dims.push(0);
            }
            d if d >= 0 => {
                known *= d as usize;
                dims.push(d as usize);
            }
            _ => return Err(Error::invalid(format!("{op}: bad dimension {d} in shape attr"))),
        }
    }
    if let Some(i) = unknown {
        if known == 0 || n % known != 0 {
            return Err(Error::invalid(format!("{op}: cannot infer -1 for {n} elements")));
        }
        dims[i] = n / known;
    }
    Ok(Shape::new(dims))
}

fn to_usizes(v: &[i64], what: &str) -> Result<Vec<usize>> {
    v.iter()
        .map(|&x| usize::try_from(x).map_err(|_| Error::invalid(format!("{what} must be non-negative, got {x}"))))
        .collect()
}

fn variable_of(ctx: &OpContext<'_>, i: usize) -> Result<Arc<VariableState>> {
    ctx.handle(i)?.variable()
}

fn queue_of(ctx: &OpContext<'_>, i: usize) -> Result<Arc<QueueState>> {
    ctx.handle(i)?.queue()
}

/// Splits the leading axis of each component into per-element tuples.
fn unstack(components: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
    let n = components
        .first()
        .and_then(|t| t.dims().first().copied())
        .ok_or_else(|| Error::invalid("EnqueueMany needs rank >= 1 components"))?;
    for c in components {
        if c.dims().first() != Some(&n) {
            return Err(Error::invalid("EnqueueMany components differ in leading dimension"));
        }
    }
    (0..n)
        .map(|i| components.iter().map(|c| ops::row(c, i)).collect())
        .collect()
}

/// Stacks tuples componentwise; an empty batch needs the component shapes.
fn stack_tuples(items: &[Vec<Tensor>], n_components: usize) -> Result<Vec<Tensor>> {
    (0..n_components)
        .map(|c| {
            let col: Vec<Tensor> = items.iter().map(|t| t[c].clone()).collect();
            ops::stack(&col)
        })
        .collect()
}

/// Like `stack_tuples`, but components of rank ≥ 1 are concatenated along
/// axis 0, so their leading dimension may differ between tuples.
fn concat_tuples(items: &[Vec<Tensor>], n_components: usize) -> Result<Vec<Tensor>> {
    (0..n_components)
        .map(|c| {
            let col: Vec<Tensor> = items.iter().map(|t| t[c].clone()).collect();
            if col.iter().all(|t| t.rank() == 0) {
                ops::stack(&col)
            } else {
                ops::concat(&col, 0)
            }
        })
        .collect()
}

pub(super) fn register_all(reg: &mut Reg<'_>) {
    // sources and plumbing
    reg(
        "Const",
        None,
        factory(|n| {
            let v = n.attr_tensor("value")?.clone();
            boxed(move |ctx| {
                ctx.set(0, v.clone());
                Ok(())
            })
        }),
    );
    reg(
        "Placeholder",
        None,
        factory(|n| {
            let name = n.name.clone();
            boxed(move |_| Err(Error::invalid(format!("placeholder '{name}' must be fed"))))
        }),
    );
    reg(
        "_Feed",
        None,
        factory(|n| {
            let key = n.attr_str("key")?.to_string();
            let dtype = n.attr_dtype("dtype")?;
            boxed(move |ctx| {
                let t = ctx
                    .env
                    .feeds
                    .get(&key)
                    .ok_or_else(|| Error::invalid(format!("no value fed for '{key}'")))?;
                if t.dtype() != dtype {
                    return Err(Error::DTypeMismatch {
                        op: format!("feed {key}"),
                        expected: dtype,
                        got: t.dtype(),
                    });
                }
                ctx.set(0, t.clone());
                Ok(())
            })
        }),
    );
    for op in ["Identity", "StopGradient", "LoopCond", "Enter", "Exit", "NextIteration"] {
        reg(
            op,
            None,
            factory(|_| {
                boxed(|ctx| {
                    let v = ctx.inputs[0].clone();
                    ctx.outputs[0] = Some(v);
                    Ok(())
                })
            }),
        );
    }
    reg("NoOp", None, factory(|_| boxed(|_| Ok(()))));
    reg(
        "Delay",
        None,
        factory(|n| {
            let d = Duration::from_millis(n.attr_int("millis")?.max(0) as u64);
            boxed(move |ctx| {
                let until = Instant::now() + d;
                while Instant::now() < until {
                    ctx.env.cancel.check()?;
                    std::thread::sleep(POLL.min(until.saturating_duration_since(Instant::now())));
                }
                let v = ctx.inputs[0].clone();
                ctx.outputs[0] = Some(v);
                Ok(())
            })
        }),
    );

    // math
    for (op, b) in [
        ("Add", BinaryOp::Add),
        ("Sub", BinaryOp::Sub),
        ("Mul", BinaryOp::Mul),
        ("Div", BinaryOp::Div),
        ("Maximum", BinaryOp::Maximum),
        ("Minimum", BinaryOp::Minimum),
    ] {
        reg(
            op,
            None,
            factory(move |_| {
                boxed(move |ctx| {
                    let out = ops::binary(b, ctx.input(0)?, ctx.input(1)?)?;
                    ctx.set(0, out);
                    Ok(())
                })
            }),
        );
    }
    simple(reg, "Neg", |i| ops::neg(i[0]));
    simple(reg, "Square", |i| ops::square(i[0]));
    simple(reg, "Relu", |i| ops::relu(i[0]));
    simple(reg, "Exp", |i| ops::exp(i[0]));
    simple(reg, "ReluGrad", |i| ops::relu_grad(i[0], i[1]));
    for d in [DType::F32, DType::F64] {
        // float-only ops get per-dtype kernels
        let mut float = |op: &str, f: fn(&[&Tensor]) -> Result<Tensor>| {
            reg(
                op,
                Some(d),
                factory(move |_| {
                    boxed(move |ctx| {
                        let ins: Vec<&Tensor> = ctx.inputs.iter().map(|v| v.tensor()).collect::<Result<_>>()?;
                        let out = f(&ins)?;
                        ctx.set(0, out);
                        Ok(())
                    })
                }),
            )
        };
        float("Sigmoid", |i| ops::sigmoid(i[0]));
        float("Softmax", |i| ops::softmax(i[0]));
        float("SigmoidGrad", |i| ops::sigmoid_grad(i[0], i[1]));
        float("SoftmaxGrad", |i| ops::softmax_grad(i[0], i[1]));
        float("SoftmaxCrossEntropy", |i| ops::softmax_cross_entropy(i[0], i[1]));
        float("SoftmaxCrossEntropyGrad", |i| ops::softmax_cross_entropy_grad(i[0], i[1], i[2]));
    }
    reg(
        "MatMul",
        None,
        factory(|n| {
            let ta = n.attr_bool_or("transpose_a", false)?;
            let tb = n.attr_bool_or("transpose_b", false)?;
            boxed(move |ctx| {
                let out = ops::matmul_t(ctx.input(0)?, ctx.input(1)?, ta, tb)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    reg(
        "BatchMatMul",
        None,
        factory(|n| {
            let ta = n.attr_bool_or("adj_a", false)?;
            let tb = n.attr_bool_or("adj_b", false)?;
            boxed(move |ctx| {
                let out = ops::batch_matmul(ctx.input(0)?, ctx.input(1)?, ta, tb)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    reg(
        "AddN",
        None,
        factory(|_| {
            boxed(|ctx| {
                let ins = ctx.tensors(0..ctx.inputs.len())?;
                let out = ops::addn(&ins)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    for (op, mean) in [("ReduceSum", false), ("ReduceMean", true)] {
        reg(
            op,
            None,
            factory(move |n| {
                let axis = n.attr_opt_int("axis")?.map(|a| a as usize);
                boxed(move |ctx| {
                    let out = ops::reduce(ctx.input(0)?, axis, mean)?;
                    ctx.set(0, out);
                    Ok(())
                })
            }),
        );
    }
    reg(
        "ReduceGrad",
        None,
        factory(|n| {
            let axis = n.attr_opt_int("axis")?.map(|a| a as usize);
            let mean = n.attr_bool_or("mean", false)?;
            boxed(move |ctx| {
                let out = ops::reduce_grad(ctx.input(1)?, ctx.input(0)?.shape(), axis, mean)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    simple(reg, "ReduceLike", |i| ops::reduce_like(i[0], i[1]));

    // shape and data movement
    reg(
        "Reshape",
        None,
        factory(|n| {
            let spec = n.attr_ints("shape")?;
            boxed(move |ctx| {
                let x = ctx.input(0)?;
                let shape = resolve_shape(&spec, x.len(), "Reshape")?;
                let out = x.reshape(shape)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    simple(reg, "ReshapeLike", |i| i[0].reshape(i[1].shape().clone()));
    reg(
        "Concat",
        None,
        factory(|n| {
            let axis = n.attr_usize("axis")?;
            boxed(move |ctx| {
                let ins = ctx.tensors(0..ctx.inputs.len())?;
                let out = ops::concat(&ins, axis)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    reg(
        "ConcatGrad",
        None,
        factory(|n| {
            let axis = n.attr_usize("axis")?;
            let index = n.attr_usize("index")?;
            let count = n.attr_usize("N")?;
            boxed(move |ctx| {
                let shapes: Vec<&Shape> = (0..count).map(|i| ctx.input(i).map(|t| t.shape())).collect::<Result<_>>()?;
                let out = ops::concat_grad(ctx.input(count)?, &shapes, axis, index)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    reg(
        "Slice",
        None,
        factory(|n| {
            let begin = to_usizes(&n.attr_ints("begin")?, "Slice begin")?;
            let size = n.attr_ints("size")?;
            boxed(move |ctx| {
                let out = ops::slice(ctx.input(0)?, &begin, &size)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    reg(
        "SliceGrad",
        None,
        factory(|n| {
            let begin = to_usizes(&n.attr_ints("begin")?, "SliceGrad begin")?;
            boxed(move |ctx| {
                let out = ops::slice_grad(ctx.input(1)?, ctx.input(0)?.shape(), &begin)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    simple(reg, "GatherRows", |i| ops::gather_rows(i[0], i[1]));
    reg(
        "DynamicPartition",
        None,
        factory(|n| {
            let shards = n.attr_usize("num_shards")?;
            boxed(move |ctx| {
                let parts = ops::dynamic_partition(ctx.input(0)?, ctx.input(1)?, shards)?;
                for (i, p) in parts.into_iter().enumerate() {
                    ctx.set(i, p);
                }
                Ok(())
            })
        }),
    );
    reg(
        "DynamicStitch",
        None,
        factory(|n| {
            let count = n.attr_usize("N")?;
            boxed(move |ctx| {
                let pos = ctx.tensors(0..count)?;
                let data = ctx.tensors(count..2 * count)?;
                let out = ops::dynamic_stitch(&pos, &data)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    simple(reg, "RangeLike", |i| ops::range_like(i[0]));
    simple(reg, "SparseToDense", |i| {
        let zeros = ops::zeros_like(i[2]);
        ops::scatter_add_rows(&zeros, i[0], i[1])
    });
    reg(
        "Cast",
        None,
        factory(|n| {
            let to = n.attr_dtype("dtype")?;
            boxed(move |ctx| {
                let out = ops::cast(ctx.input(0)?, to)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    for (op, c) in [
        ("Less", CompareOp::Less),
        ("LessEqual", CompareOp::LessEqual),
        ("Greater", CompareOp::Greater),
        ("GreaterEqual", CompareOp::GreaterEqual),
        ("Equal", CompareOp::Equal),
        ("NotEqual", CompareOp::NotEqual),
    ] {
        reg(
            op,
            None,
            factory(move |_| {
                boxed(move |ctx| {
                    let out = ops::compare(c, ctx.input(0)?, ctx.input(1)?)?;
                    ctx.set(0, out);
                    Ok(())
                })
            }),
        );
    }
    simple(reg, "LogicalNot", |i| ops::logical_not(i[0]));
    simple(reg, "LogicalAnd", |i| ops::logical_and(i[0], i[1]));
    simple(reg, "Mod", |i| ops::floor_mod(i[0], i[1]));
    simple(reg, "FloorDiv", |i| ops::floor_div(i[0], i[1]));
    simple(reg, "ZerosLike", |i| Ok(ops::zeros_like(i[0])));
    simple(reg, "OnesLike", |i| ops::ones_like(i[0]));
    simple(reg, "ArgSort", |i| ops::argsort(i[0]));
    reg(
        "RandomUniform",
        None,
        factory(|n| {
            let shape = n.attr_shape("shape")?;
            let dtype = n.attr_dtype("dtype")?;
            let seed = n.attr_int_or("seed", 0)? as u64;
            let lo = n.attr_float_or("minval", 0.0)?;
            let hi = n.attr_float_or("maxval", 1.0)?;
            let per_step = n.attr_bool_or("per_step", false)?;
            if hi <= lo {
                return Err(Error::invalid(format!("RandomUniform needs minval < maxval, got [{lo}, {hi})")));
            }
            let runs = AtomicU64::new(0);
            boxed(move |ctx| {
                let out = ops::random_uniform(&shape, dtype, seed_for(seed, &runs, per_step), lo, hi)?;
                ctx.set(0, out);
                Ok(())
            })
        }),
    );
    reg(
        "CandidateSampler",
        None,
        factory(|n| {
            let k = n.attr_usize("num_sampled")?;
            let range = n.attr_usize("range_max")?;
            let seed = n.attr_int_or("seed", 0)? as u64;
            let per_step = n.attr_bool_or("per_step", false)?;
            let runs = AtomicU64::new(0);
            boxed(move |ctx| {
                let labels = ops::index_vec(ctx.input(0)?, "CandidateSampler")?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &runs, per_step));
                let mut out = Vec::with_capacity(labels.len() * (k + 1));
                for &y in &labels {
                    if y < 0 || y as usize >= range {
                        return Err(Error::IndexOutOfRange {
                            op: "CandidateSampler".into(),
                            index: y,
                            bound: range,
                        });
                    }
                    out.push(y);
                    // k distinct classes from the range_max - 1 classes other than y
                    for j in sample(&mut rng, range - 1, k).into_iter() {
                        let j = j as i64;
                        out.push(if j >= y { j + 1 } else { j });
                    }
                }
                ctx.set(0, Tensor::new([labels.len(), k + 1], out)?);
                Ok(())
            })
        }),
    );
    reg(
        "Switch",
        None,
        factory(|_| {
            boxed(|ctx| {
                let p = ctx.input(1)?;
                if p.dtype() != DType::Bool || p.len() != 1 {
                    return Err(Error::invalid(format!("Switch predicate must be a bool scalar, got {:?}", p)));
                }
                let branch = p.scalar_value::<bool>()? as usize;
                let v = ctx.inputs[0].clone();
                ctx.outputs[branch] = Some(v);
                Ok(())
            })
        }),
    );

    // state
    reg(
        "Variable",
        None,
        factory(|n| {
            let dtype = n.attr_dtype("dtype")?;
            let shape = n.attr_shape("shape")?;
            let name = n.name.clone();
            boxed(move |ctx| {
                let r = ctx.env.device.resources.lookup_or_create(&name, ResourceKind::Variable, || {
                    Ok(Resource::Variable(Arc::new(VariableState::new(dtype, shape.clone()))))
                })?;
                if let Resource::Variable(v) = &r {
                    if v.dtype() != dtype || *v.shape() != shape {
                        return Err(Error::invalid(format!("variable '{name}' exists with a different dtype or shape")));
                    }
                }
                ctx.outputs[0] = Some(Value::Handle(RefHandle::new(&r, &ctx.env.device.name)));
                Ok(())
            })
        }),
    );
    reg(
        "Read",
        None,
        factory(|_| {
            boxed(|ctx| {
                let v = variable_of(ctx, 0)?.read();
                ctx.set(0, v);
                Ok(())
            })
        }),
    );
    reg(
        "Assign",
        None,
        factory(|_| {
            boxed(|ctx| {
                let v = variable_of(ctx, 0)?.assign(ctx.input(1)?)?;
                ctx.set(0, v);
                Ok(())
            })
        }),
    );
    for (op, alpha) in [("AssignAdd", 1.0), ("AssignSub", -1.0)] {
        reg(
            op,
            None,
            factory(move |_| {
                boxed(move |ctx| {
                    let v = variable_of(ctx, 0)?.axpy(ctx.input(1)?, alpha)?;
                    ctx.set(0, v);
                    Ok(())
                })
            }),
        );
    }
    reg(
        "ApplyGradientDescent",
        None,
        factory(|n| {
            let alpha = n.attr_float("alpha")?;
            boxed(move |ctx| {
                let v = variable_of(ctx, 0)?.axpy(ctx.input(1)?, -alpha)?;
                ctx.set(0, v);
                Ok(())
            })
        }),
    );
    reg(
        "ApplyMomentum",
        None,
        factory(|n| {
            let alpha = n.attr_float("alpha")?;
            let mu = n.attr_float("momentum")?;
            boxed(move |ctx| {
                let var = variable_of(ctx, 0)?;
                let vel = variable_of(ctx, 1)?;
                let g = ctx.input(2)?;
                // V <- mu V + g, then W <- W - alpha V
                let v_new = vel.update(|v| {
                    let scaled = ops::mul(v, &ops::fill(&Shape::scalar(), mu, v.dtype())?)?;
                    *v = ops::add(&scaled, g)?;
                    Ok(v.clone())
                })?;
                let w = var.axpy(&v_new, -alpha)?;
                ctx.set(0, w);
                Ok(())
            })
        }),
    );
    reg(
        "SparseApplyGradientDescent",
        None,
        factory(|n| {
            let alpha = n.attr_float("alpha")?;
            boxed(move |ctx| {
                let (idx, vals) = (ctx.input(1)?, ctx.input(2)?);
                let w = variable_of(ctx, 0)?.update(|t| {
                    ops::scatter_add_rows_in_place(t, idx, vals, -alpha)?;
                    Ok(t.clone())
                })?;
                ctx.set(0, w);
                Ok(())
            })
        }),
    );

    // queues
    reg(
        "FIFOQueue",
        None,
        factory(|n| {
            let cap = n.attr_usize("capacity")?;
            let types = n.attr_dtypes("component_types")?;
            let shapes = match n.get_attr("shapes") {
                Some(_) => Some(n.attr_shapes("shapes")?).filter(|s| !s.is_empty()),
                None => None,
            };
            let name = n.name.clone();
            boxed(move |ctx| {
                let r = ctx.env.device.resources.lookup_or_create(&name, ResourceKind::Queue, || {
                    Ok(Resource::Queue(Arc::new(QueueState::new(cap, types.clone(), shapes.clone())?)))
                })?;
                ctx.outputs[0] = Some(Value::Handle(RefHandle::new(&r, &ctx.env.device.name)));
                Ok(())
            })
        }),
    );
    reg(
        "QueueEnqueue",
        None,
        factory(|_| {
            boxed(|ctx| {
                let q = queue_of(ctx, 0)?;
                let tuple = ctx.tensors(1..ctx.inputs.len())?;
                q.enqueue(tuple, &ctx.env.cancel)
            })
        }),
    );
    reg(
        "QueueEnqueueMany",
        None,
        factory(|_| {
            boxed(|ctx| {
                let q = queue_of(ctx, 0)?;
                for tuple in unstack(&ctx.tensors(1..ctx.inputs.len())?)? {
                    q.enqueue(tuple, &ctx.env.cancel)?;
                }
                Ok(())
            })
        }),
    );
    reg(
        "QueueDequeue",
        None,
        factory(|_| {
            boxed(|ctx| {
                let q = queue_of(ctx, 0)?;
                for (i, t) in q.dequeue(&ctx.env.cancel)?.into_iter().enumerate() {
                    ctx.set(i, t);
                }
                Ok(())
            })
        }),
    );
    reg(
        "QueueDequeueMany",
        None,
        factory(|n| {
            let count = n.attr_usize("n")?;
            if count == 0 {
                return Err(Error::invalid("QueueDequeueMany needs n >= 1"));
            }
            boxed(move |ctx| {
                let q = queue_of(ctx, 0)?;
                let items = q.dequeue_many(count, &ctx.env.cancel)?;
                for (i, t) in stack_tuples(&items, q.component_types().len())?.into_iter().enumerate() {
                    ctx.set(i, t);
                }
                Ok(())
            })
        }),
    );
    reg(
        "DequeueFresh",
        None,
        factory(|n| {
            let m = n.attr_usize("m")?;
            let tag = n.attr_usize("tag_component")?;
            let concat = n.attr_bool_or("concat", false)?;
            boxed(move |ctx| {
                let q = queue_of(ctx, 0)?;
                let current = ops::index_vec(ctx.input(1)?, "DequeueFresh")?
                    .first()
                    .copied()
                    .ok_or_else(|| Error::invalid("DequeueFresh needs a scalar version"))?;
                let (items, stale) = q.dequeue_fresh(m, tag, current, &ctx.env.cancel)?;
                let k = q.component_types().len();
                let joined = if concat { concat_tuples(&items, k)? } else { stack_tuples(&items, k)? };
                for (i, t) in joined.into_iter().enumerate() {
                    ctx.set(i, t);
                }
                ctx.set(k, Tensor::scalar(stale as i64));
                Ok(())
            })
        }),
    );
    reg(
        "QueueClose",
        None,
        factory(|_| {
            boxed(|ctx| {
                queue_of(ctx, 0)?.close();
                Ok(())
            })
        }),
    );
    reg(
        "QueueSize",
        None,
        factory(|_| {
            boxed(|ctx| {
                let n = queue_of(ctx, 0)?.size();
                ctx.set(0, Tensor::scalar(n as i64));
                Ok(())
            })
        }),
    );

    // checkpoints
    reg(
        "Save",
        None,
        factory(|_| {
            boxed(|ctx| {
                let path = ctx.input(0)?.scalar_value::<String>()?;
                let names = ctx.input(1)?.to_vec::<String>()?;
                let data = ctx.tensors(2..ctx.inputs.len())?;
                if names.len() != data.len() {
                    return Err(Error::invalid(format!(
                        "Save got {} names for {} tensors",
                        names.len(),
                        data.len()
                    )));
                }
                persistence::save(&path, &names.into_iter().zip(data).collect::<Vec<_>>())
            })
        }),
    );
    reg(
        "Restore",
        None,
        factory(|n| {
            let dtype = n.attr_dtype("dtype")?;
            boxed(move |ctx| {
                let path = ctx.input(0)?.scalar_value::<String>()?;
                let name = ctx.input(1)?.scalar_value::<String>()?;
                let t = persistence::restore(&path, &name)?;
                if t.dtype() != dtype {
                    return Err(Error::DTypeMismatch {
                        op: "Restore".into(),
                        expected: dtype,
                        got: t.dtype(),
                    });
                }
                ctx.set(0, t);
                Ok(())
            })
        }),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_infers_one_dimension() {
        assert_eq!(resolve_shape(&[-1, 3], 12, "R").unwrap(), Shape::new(vec![4, 3]));
        assert!(resolve_shape(&[-1, 5], 12, "R").is_err());
        assert!(resolve_shape(&[-1, -1], 12, "R").is_err());
    }

    #[test]
    fn unstack_then_stack() {
        let a = Tensor::new([3, 2], vec![1i64, 2, 3, 4, 5, 6]).unwrap();
        let b = Tensor::vector(vec![true, false, true]);
        let items = unstack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(items.len(), 3);
        let back = stack_tuples(&items, 2).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}

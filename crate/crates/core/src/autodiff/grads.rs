//! Gradient entries for the standard ops.

use std::sync::Arc;

use super::{Grad, GradCtx, GradFn};
use crate::error::{Error, Result};
use crate::graph::{Endpoint, NodeDef};
use crate::tensor::DType;

type Reg<'a> = dyn FnMut(&str, GradFn) + 'a;

fn upstream(ctx: &mut GradCtx<'_>, node: &NodeDef, grads: &[Option<Grad>], i: usize) -> Result<Endpoint> {
    match grads.get(i).and_then(Option::as_ref) {
        Some(g) => Ok(ctx.dense(g)),
        None => Err(Error::Gradient(format!("missing gradient for output {i} of '{}'", node.name))),
    }
}

fn input(node: &NodeDef, i: usize) -> Endpoint {
    node.inputs[i].clone()
}

fn dense(e: Endpoint) -> Option<Grad> {
    Some(Grad::Dense(e))
}

/// Reduces a gradient back to the shape of a broadcast operand.
fn unbroadcast(ctx: &mut GradCtx<'_>, g: Endpoint, like: &Endpoint) -> Endpoint {
    ctx.op("ReduceLike", &[g, like.clone()], vec![])
}

fn reg_fn(
    reg: &mut Reg<'_>,
    op: &str,
    f: impl Fn(&mut GradCtx<'_>, &NodeDef, &[Option<Grad>]) -> Result<Vec<Option<Grad>>> + Send + Sync + 'static,
) {
    reg(op, Arc::new(f));
}

/// Passes the upstream gradient, sparse or not, to input 0.
fn pass_through(_: &mut GradCtx<'_>, node: &NodeDef, grads: &[Option<Grad>]) -> Result<Vec<Option<Grad>>> {
    let mut v = vec![None; node.inputs.len()];
    v[0] = grads[0].clone();
    Ok(v)
}

fn matmul_grads(ctx: &mut GradCtx<'_>, node: &NodeDef, grads: &[Option<Grad>], op: &str, ka: &str, kb: &str) -> Result<Vec<Option<Grad>>> {
    let g = upstream(ctx, node, grads, 0)?;
    let (a, b) = (input(node, 0), input(node, 1));
    let ta = node.attr_bool_or(ka, false)?;
    let tb = node.attr_bool_or(kb, false)?;
    let mut mm = |x: &Endpoint, y: &Endpoint, tx: bool, ty: bool| {
        ctx.op(op, &[x.clone(), y.clone()], vec![(ka, tx.into()), (kb, ty.into())])
    };
    let (ga, gb) = match (ta, tb) {
        (false, false) => (mm(&g, &b, false, true), mm(&a, &g, true, false)),
        (true, false) => (mm(&b, &g, false, true), mm(&a, &g, false, false)),
        (false, true) => (mm(&g, &b, false, false), mm(&g, &a, true, false)),
        (true, true) => (mm(&b, &g, true, true), mm(&g, &a, true, true)),
    };
    Ok(vec![dense(ga), dense(gb)])
}

pub(super) fn register_all(reg: &mut Reg<'_>) {
    for op in ["Identity", "Read", "Delay"] {
        reg_fn(reg, op, pass_through);
    }
    reg_fn(reg, "Add", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let (x, y) = (input(n, 0), input(n, 1));
        Ok(vec![dense(unbroadcast(ctx, g.clone(), &x)), dense(unbroadcast(ctx, g, &y))])
    });
    reg_fn(reg, "Sub", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let (x, y) = (input(n, 0), input(n, 1));
        let ng = ctx.op("Neg", &[g.clone()], vec![]);
        Ok(vec![dense(unbroadcast(ctx, g, &x)), dense(unbroadcast(ctx, ng, &y))])
    });
    reg_fn(reg, "Mul", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let (x, y) = (input(n, 0), input(n, 1));
        let gx = ctx.op("Mul", &[g.clone(), y.clone()], vec![]);
        let gy = ctx.op("Mul", &[g, x.clone()], vec![]);
        Ok(vec![dense(unbroadcast(ctx, gx, &x)), dense(unbroadcast(ctx, gy, &y))])
    });
    reg_fn(reg, "Div", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let (x, y) = (input(n, 0), input(n, 1));
        let gx = ctx.op("Div", &[g.clone(), y.clone()], vec![]);
        // d(x/y)/dy = -(g/y) * (x/y)
        let q = ctx.op("Div", &[x.clone(), y.clone()], vec![]);
        let t = ctx.op("Mul", &[gx.clone(), q], vec![]);
        let gy = ctx.op("Neg", &[t], vec![]);
        Ok(vec![dense(unbroadcast(ctx, gx, &x)), dense(unbroadcast(ctx, gy, &y))])
    });
    for (op, cmp_x) in [("Maximum", "GreaterEqual"), ("Minimum", "LessEqual")] {
        reg_fn(reg, op, move |ctx, n, gs| {
            let g = upstream(ctx, n, gs, 0)?;
            let (x, y) = (input(n, 0), input(n, 1));
            let dtype = ctx.dtype(&x)?;
            // ties send the gradient to x
            let pick_x = ctx.op(cmp_x, &[x.clone(), y.clone()], vec![]);
            let pick_y = ctx.op("LogicalNot", &[pick_x.clone()], vec![]);
            let mx = ctx.op("Cast", &[pick_x], vec![("dtype", dtype.into())]);
            let my = ctx.op("Cast", &[pick_y], vec![("dtype", dtype.into())]);
            let gx = ctx.op("Mul", &[g.clone(), mx], vec![]);
            let gy = ctx.op("Mul", &[g, my], vec![]);
            Ok(vec![dense(unbroadcast(ctx, gx, &x)), dense(unbroadcast(ctx, gy, &y))])
        });
    }
    reg_fn(reg, "Neg", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![dense(ctx.op("Neg", &[g], vec![]))])
    });
    reg_fn(reg, "Square", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let x = input(n, 0);
        let two = ctx.scalar(2.0, ctx.dtype(&x)?)?;
        let gx = ctx.op("Mul", &[g, x], vec![]);
        Ok(vec![dense(ctx.op("Mul", &[gx, two], vec![]))])
    });
    reg_fn(reg, "Exp", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![dense(ctx.op("Mul", &[g, Endpoint::new(&n.name, 0)], vec![]))])
    });
    reg_fn(reg, "Relu", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![dense(ctx.op("ReluGrad", &[g, input(n, 0)], vec![]))])
    });
    reg_fn(reg, "Sigmoid", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![dense(ctx.op("SigmoidGrad", &[Endpoint::new(&n.name, 0), g], vec![]))])
    });
    reg_fn(reg, "Softmax", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![dense(ctx.op("SoftmaxGrad", &[Endpoint::new(&n.name, 0), g], vec![]))])
    });
    reg_fn(reg, "SoftmaxCrossEntropy", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        if ctx.needs(1) {
            return Err(Error::Gradient(format!(
                "gradient with respect to the labels of '{}' is not supported",
                n.name
            )));
        }
        let gl = ctx.op("SoftmaxCrossEntropyGrad", &[input(n, 0), input(n, 1), g], vec![]);
        Ok(vec![dense(gl), None])
    });
    reg_fn(reg, "MatMul", |ctx, n, gs| matmul_grads(ctx, n, gs, "MatMul", "transpose_a", "transpose_b"));
    reg_fn(reg, "BatchMatMul", |ctx, n, gs| matmul_grads(ctx, n, gs, "BatchMatMul", "adj_a", "adj_b"));
    reg_fn(reg, "AddN", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![dense(g); n.inputs.len()])
    });
    for (op, mean) in [("ReduceSum", false), ("ReduceMean", true)] {
        reg_fn(reg, op, move |ctx, n, gs| {
            let g = upstream(ctx, n, gs, 0)?;
            let mut attrs = vec![("mean", mean.into())];
            if let Some(a) = n.attr_opt_int("axis")? {
                attrs.push(("axis", a.into()));
            }
            Ok(vec![dense(ctx.op("ReduceGrad", &[input(n, 0), g], attrs))])
        });
    }
    for op in ["Reshape", "ReshapeLike"] {
        reg_fn(reg, op, |ctx, n, gs| {
            let g = upstream(ctx, n, gs, 0)?;
            let mut v = vec![dense(ctx.op("ReshapeLike", &[g, input(n, 0)], vec![]))];
            v.resize(n.inputs.len(), None);
            Ok(v)
        });
    }
    reg_fn(reg, "Concat", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let axis = n.attr_int("axis")?;
        let count = n.inputs.len();
        let mut ins = n.inputs.clone();
        ins.push(g);
        Ok((0..count)
            .map(|i| {
                ctx.needs(i).then(|| {
                    Grad::Dense(ctx.op(
                        "ConcatGrad",
                        &ins,
                        vec![("N", (count as i64).into()), ("axis", axis.into()), ("index", (i as i64).into())],
                    ))
                })
            })
            .collect())
    });
    reg_fn(reg, "Slice", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let begin = n.attr_ints("begin")?;
        Ok(vec![dense(ctx.op("SliceGrad", &[input(n, 0), g], vec![("begin", begin.into())]))])
    });
    reg_fn(reg, "GatherRows", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        Ok(vec![
            Some(Grad::Sparse {
                indices: input(n, 1),
                values: g,
                like: input(n, 0),
            }),
            None,
        ])
    });
    reg_fn(reg, "DynamicPartition", |ctx, n, gs| {
        let shards = n.attr_usize("num_shards")?;
        let (data, parts) = (input(n, 0), input(n, 1));
        // where each partitioned row came from
        let rows = ctx.op("RangeLike", std::slice::from_ref(&data), vec![]);
        let pos = ctx.op_n("DynamicPartition", &[rows, parts], vec![("num_shards", (shards as i64).into())]);
        let mut ins: Vec<Endpoint> = (0..shards).map(|i| Endpoint::new(&pos, i)).collect();
        for (i, g) in gs.iter().enumerate().take(shards) {
            let gi = match g {
                Some(g) => ctx.dense(g),
                None => ctx.op("ZerosLike", &[Endpoint::new(&n.name, i)], vec![]),
            };
            ins.push(gi);
        }
        let stitched = ctx.op("DynamicStitch", &ins, vec![("N", (shards as i64).into())]);
        Ok(vec![dense(stitched), None])
    });
    reg_fn(reg, "DynamicStitch", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let count = n.inputs.len() / 2;
        let mut v = vec![None; 2 * count];
        for i in 0..count {
            if ctx.needs(count + i) {
                v[count + i] = dense(ctx.op("GatherRows", &[g.clone(), input(n, i)], vec![]));
            }
        }
        Ok(v)
    });
    // Gradient of a conditional: Switch sends the gradient back through a
    // Merge of both branches and Merge routes it with a Switch on the index
    // of the input that was live.
    reg_fn(reg, "Switch", |ctx, n, gs| {
        let outs: Vec<Endpoint> = (0..2)
            .map(|i| match &gs[i] {
                Some(g) => ctx.dense(g),
                // the branch that does not use the value contributes zero
                None => ctx.op("ZerosLike", &[Endpoint::new(&n.name, i)], vec![]),
            })
            .collect();
        let m = ctx.op_n("Merge", &outs, vec![("N", 2i64.into())]);
        Ok(vec![dense(Endpoint::new(m, 0)), None])
    });
    reg_fn(reg, "Merge", |ctx, n, gs| {
        let g = upstream(ctx, n, gs, 0)?;
        let count = n.inputs.len();
        let index = Endpoint::new(&n.name, 1);
        let mut v = Vec::with_capacity(count);
        for i in 0..count {
            if !ctx.needs(i) {
                v.push(None);
                continue;
            }
            let k = ctx.scalar(i as f64, DType::I32)?;
            let taken = ctx.op("Equal", &[index.clone(), k], vec![]);
            let sw = ctx.op_n("Switch", &[g.clone(), taken], vec![]);
            v.push(dense(Endpoint::new(sw, 1)));
        }
        Ok(v)
    });
}

//! Parameter update rules expressed as graph ops.

use crate::autodiff::Grad;
use crate::error::{Error, Result};
use crate::graph::{Endpoint, GraphBuilder};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    /// W ← W − α·g
    Sgd { learning_rate: f64 },
    /// V ← μ·V + g; W ← W − α·V
    Momentum { learning_rate: f64, momentum: f64 },
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec::Sgd { learning_rate }
    }

    pub fn momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerSpec::Momentum {
            learning_rate,
            momentum,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { learning_rate } | OptimizerSpec::Momentum { learning_rate, .. } => learning_rate,
        }
    }

    pub fn check(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be finite and positive, got {lr}")));
        }
        if let OptimizerSpec::Momentum { momentum, .. } = *self {
            if !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
                return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
            }
        }
        Ok(())
    }
}

/// Adds one update op per (variable handle, gradient) pair and returns a
/// NoOp that depends on all of them. Momentum creates a zero-initialized
/// velocity variable `<var>/velocity` next to each parameter. Sparse
/// gradients update only their rows under SGD; momentum densifies them.
pub fn apply_gradients(b: &mut GraphBuilder, opt: &OptimizerSpec, pairs: &[(Endpoint, Grad)]) -> Result<String> {
    opt.check()?;
    let mut updates = Vec::with_capacity(pairs.len());
    for (var, grad) in pairs {
        let def = b
            .graph()
            .node(&var.node)
            .filter(|n| n.op == "Variable")
            .ok_or_else(|| Error::invalid(format!("'{var}' is not a variable")))?
            .clone();
        let name = match (opt, grad) {
            (OptimizerSpec::Sgd { learning_rate }, Grad::Dense(g)) => b.op(
                "ApplyGradientDescent",
                &[var.clone(), g.clone()],
                vec![("alpha", (*learning_rate).into())],
            ),
            (OptimizerSpec::Sgd { learning_rate }, Grad::Sparse { indices, values, .. }) => b.op(
                "SparseApplyGradientDescent",
                &[var.clone(), indices.clone(), values.clone()],
                vec![("alpha", (*learning_rate).into())],
            ),
            (OptimizerSpec::Momentum { learning_rate, momentum }, g) => {
                let dense = match g {
                    Grad::Dense(g) => g.clone(),
                    Grad::Sparse { indices, values, like } => Endpoint::new(
                        b.op("SparseToDense", &[indices.clone(), values.clone(), like.clone()], vec![]),
                        0,
                    ),
                };
                let (dtype, shape) = (def.attr_dtype("dtype")?, def.attr_shape("shape")?);
                let vel = b.with_device(&def.device, |b| b.variable(&format!("{}/velocity", var.node), dtype, shape));
                b.op(
                    "ApplyMomentum",
                    &[var.clone(), vel, dense],
                    vec![("alpha", (*learning_rate).into()), ("momentum", (*momentum).into())],
                )
            }
        };
        updates.push(name);
    }
    Ok(b.noop(&updates))
}

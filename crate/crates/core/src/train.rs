//! Optimisers and the per-batch training step.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Mode, Model, FAKE};
use crate::param::ParamSet;
use crate::prep::PreparedSample;
use crate::tensor::Tensor;

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected sgd or adam)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies the stored gradients of `names` and rounds the results to `f32`.
    pub fn step(&mut self, params: &mut ParamSet, names: &[String]) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for name in names {
            let Some(p) = params.get_mut(name) else { continue };
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in value.iter_mut().zip(&grad) {
                        *v = (*v - self.lr * g) as f32 as f64;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    for i in 0..grad.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                        s[i] = b2 * s[i] + (1.0 - b2) * grad[i] * grad[i];
                        let update = self.lr * (m[i] / c1) / ((s[i] / c2).sqrt() + self.eps);
                        value[i] = (value[i] - update) as f32 as f64;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// mean cross-entropy over the batch
    pub loss: f64,
    /// fraction of the batch classified correctly at threshold 0.5
    pub accuracy: f64,
}

/// Whether a fake-class probability counts as a fake prediction.
pub fn predicts_fake(p_fake: f64) -> bool {
    p_fake >= 0.5
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<(String, Tensor)>,
}

fn sample_gradient(model: &Model, sample: &PreparedSample, label: usize, mode: Mode) -> Result<SampleGrad> {
    let mut trace = model.trace(sample, mode, true)?;
    let correct = predicts_fake(trace.fake_probability()) == (label == FAKE);
    let ce = trace.graph.cross_entropy(trace.probs, vec![label])?;
    let loss = trace.graph.value(ce).data()[0];
    let mut grads = trace.graph.backward(ce)?;
    let grads = trace
        .params
        .iter()
        .filter_map(|(name, var)| grads.take(*var).map(|g| (name.clone(), g)))
        .collect();
    Ok(SampleGrad { loss, correct, grads })
}

/// Mean loss over `batch` with its gradient left in each parameter's `grad`.
/// With `parallel` the per-sample passes run concurrently; accumulation is
/// always in batch order, so both settings give identical bits.
pub fn accumulate_gradients(
    model: &mut Model,
    batch: &[(&PreparedSample, usize)],
    mode: Mode,
    parallel: bool,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if let Some(&(_, l)) = batch.iter().find(|(_, l)| *l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1")));
    }
    let per_sample: Vec<Result<SampleGrad>> = {
        let m: &Model = model;
        if parallel {
            batch.par_iter().map(|&(s, l)| sample_gradient(m, s, l, mode)).collect()
        } else {
            batch.iter().map(|&(s, l)| sample_gradient(m, s, l, mode)).collect()
        }
    };
    model.params_mut().zero_grad();
    let inv = 1.0 / batch.len() as f64;
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in per_sample {
        let r = r?;
        loss += r.loss * inv;
        correct += r.correct as usize;
        for (name, g) in r.grads {
            let p = model.params_mut().get_mut(&name).expect("bound parameters exist");
            p.grad.accumulate(&g.scale(inv));
        }
    }
    Ok(StepStats {
        loss,
        accuracy: correct as f64 * inv,
    })
}

/// One optimiser update on `batch`. A non-finite loss or gradient aborts the
/// step before any parameter changes.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &[(&PreparedSample, usize)],
    mode: Mode,
    parallel: bool,
) -> Result<StepStats> {
    let stats = accumulate_gradients(model, batch, mode, parallel)?;
    let names: Vec<String> = model.config().param_specs_for(mode).into_iter().map(|s| s.name).collect();
    check_gradients(model.params(), &names)?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    opt.step(model.params_mut(), &names);
    Ok(stats)
}

/// Fails on the first parameter of `names` whose gradient is not finite.
pub fn check_gradients(params: &ParamSet, names: &[String]) -> Result<()> {
    for name in names {
        if let Some(p) = params.get(name) {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
            }
        }
    }
    Ok(())
}

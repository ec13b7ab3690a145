//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_graph, cross_attention_graph, encoder_block_graph, mhsa_graph};
use crate::attention::{AttentionConfig, EncoderBlockVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Mode, Model, ModelConfig};
use crate::ops::*;
use crate::param::ParamSet;
use crate::prep::{AudioFrameMatrix, LipSequence, PreparedSample};
use crate::tensor::Tensor;
use crate::tokenizer::embed_graph;

/// Step used by the gradient suite.
pub const SUITE_STEP: f64 = 1e-5;
/// Threshold for operations that are affine (or bilinear) in each input.
pub const AFFINE_TOL: f64 = 1e-6;
pub const NONLINEAR_TOL: f64 = 1e-3;

/// Relative error used throughout: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between `op.backward` and central differences of
/// `sum(op.forward(inputs))`, over every entry of every input.
pub fn finite_diff_check(op: &dyn DiffOp, inputs: &[Tensor], h: f64) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let output = op.forward(&refs)?;
    let analytic = op.backward(&refs, &output, &Tensor::full(output.shape(), 1.0));
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    check_scalar_fn(
        |xs| {
            let refs: Vec<&Tensor> = xs.iter().collect();
            Ok(op.forward(&refs)?.sum())
        },
        inputs,
        &analytic,
        h,
    )
}

/// Like [`finite_diff_check`] but differentiates `sum(weights ⊙ op(inputs))`, which
/// avoids the degenerate all-ones cotangent (the sum of a softmax row is constant).
pub fn weighted_check(op: &dyn DiffOp, inputs: &[Tensor], weights: &Tensor, h: f64) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let output = op.forward(&refs)?;
    if output.shape() != weights.shape() {
        return Err(Error::shape("cotangent weights", output.shape(), weights.shape()));
    }
    let analytic = op.backward(&refs, &output, weights);
    check_scalar_fn(
        |xs| {
            let refs: Vec<&Tensor> = xs.iter().collect();
            let out = op.forward(&refs)?;
            Ok(out.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum())
        },
        inputs,
        &analytic,
        h,
    )
}

/// Compares `analytic[k]` against central differences of the scalar function `f`
/// with respect to `inputs[k]`.
pub fn check_scalar_fn(
    f: impl Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[k].shape() {
            return Err(Error::shape("gradient", inputs[k].shape(), grad.shape()));
        }
        for e in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + h;
            let plus = f(&probe)?;
            probe[k].data_mut()[e] = x0 - h;
            let minus = f(&probe)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
    }
    Ok(worst)
}

type BuildFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync;

/// A [`DiffOp`] defined by a graph-building closure; its backward pass is the
/// graph's reverse sweep. Used to check composite operations end to end.
pub struct Composite {
    name: &'static str,
    build: Box<BuildFn>,
}

impl Composite {
    pub fn new(
        name: &'static str,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Composite {
            name,
            build: Box::new(build),
        }
    }

    fn run(&self, inputs: &[&Tensor]) -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf((*t).clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    }
}

impl DiffOp for Composite {
    fn name(&self) -> &'static str {
        self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (g, _, out) = self.run(inputs)?;
        Ok(g.value(out).clone())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (g, vars, out) = self.run(inputs).expect("composite forward succeeded before");
        let mut grads = g.backward_seeded(out, grad.clone());
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Outcome of one entry of the gradient suite: the worst relative error over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub affine: bool,
    pub seeds: usize,
    pub worst: f64,
}

impl CheckResult {
    pub fn tolerance(&self) -> f64 {
        if self.affine {
            AFFINE_TOL
        } else {
            NONLINEAR_TOL
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.tolerance()
    }
}

struct Case {
    op: Box<dyn DiffOp>,
    inputs: Vec<Tensor>,
}

fn case(op: impl DiffOp + 'static, inputs: Vec<Tensor>) -> Case {
    Case { op: Box::new(op), inputs }
}

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values in ±[0.1, 1], away from the kinks of relu and the ties of max pooling.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    u(shape, rng).map(|x| if x < 0.0 { x - 0.1 } else { x + 0.1 }.clamp(-1.0, 1.0))
}

fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

const TOY_ATTN: AttentionConfig = AttentionConfig { n_heads: 2, d_model: 8, mlp_hidden: 6 };

type Builder = fn(&mut ChaCha8Rng) -> Case;

/// Every registered differentiable operation with a random instance builder.
fn registry() -> Vec<(&'static str, bool, Builder)> {
    vec![
        ("matmul", true, |r| case(MatMul, vec![u(&[3, 4], r), u(&[4, 5], r)])),
        ("linear", true, |r| case(Linear, vec![u(&[3, 4], r), u(&[4, 2], r), u(&[2], r)])),
        ("add", true, |r| case(Add, vec![u(&[3, 4], r), u(&[3, 4], r)])),
        ("scale", true, |r| case(Scale(-1.7), vec![u(&[2, 5], r)])),
        ("reshape", true, |r| case(Reshape(vec![6, 2]), vec![u(&[3, 4], r)])),
        ("transpose", true, |r| case(Transpose, vec![u(&[3, 4], r)])),
        ("gather", true, |r| {
            let index = (0..8).map(|_| r.gen_range(0..12)).collect();
            case(Gather { index, shape: vec![2, 4] }, vec![u(&[3, 4], r)])
        }),
        ("slice_cols", true, |r| case(SliceCols { start: 1, end: 4 }, vec![u(&[3, 5], r)])),
        ("concat_cols", true, |r| case(ConcatCols, vec![u(&[3, 2], r), u(&[3, 4], r)])),
        ("concat_rows", true, |r| case(ConcatRows, vec![u(&[1, 4], r), u(&[3, 4], r)])),
        ("select_row", true, |r| case(SelectRow(2), vec![u(&[4, 3], r)])),
        ("mean_rows", true, |r| case(MeanRows, vec![u(&[4, 3], r)])),
        ("sum_all", true, |r| case(SumAll, vec![u(&[4, 3], r)])),
        ("sum_squares", true, |r| case(SumSquares, vec![u(&[4, 3], r)])),
        ("conv2d", true, |r| case(Conv2d { kernel: 3 }, vec![u(&[2, 5, 4, 2], r), u(&[18, 3], r), u(&[3], r)])),
        ("softmax_rows", false, |r| case(SoftmaxRows, vec![u(&[3, 5], r).map(|x| 3.0 * x)])),
        ("layer_norm", false, |r| case(LayerNorm::default(), vec![u(&[3, 6], r), u(&[6], r), u(&[6], r)])),
        ("gelu", false, |r| case(Gelu, vec![u(&[3, 5], r).map(|x| 3.0 * x)])),
        ("relu", false, |r| case(Relu, vec![away_from_zero(&[3, 5], r)])),
        ("cross_entropy", false, |r| {
            let p = u(&[4, 1], r).map(|x| 0.5 + 0.45 * x);
            let probs = Tensor::new(vec![4, 2], p.data().iter().flat_map(|&a| [1.0 - a, a]).collect()).unwrap();
            let labels = (0..4).map(|_| r.gen_range(0..2)).collect();
            case(CrossEntropy { labels }, vec![probs])
        }),
        ("max_pool2", false, |r| case(MaxPool2, vec![distinct(&[2, 4, 5, 3], r)])),
        ("attention", false, |r| {
            let op = Composite::new("attention", |g, v| Ok(attention_graph(g, v[0], v[1], v[2])?.0));
            case(op, vec![u(&[3, 4], r), u(&[5, 4], r), u(&[5, 3], r)])
        }),
        ("cross_attention", false, |r| {
            let op = Composite::new("cross_attention", |g, v| {
                Ok(cross_attention_graph(g, v[0], v[1], v[2], v[3], v[4])?.0)
            });
            case(op, vec![u(&[4, 6], r), u(&[4, 5], r), u(&[4, 5], r), u(&[6, 3], r), u(&[5, 3], r)])
        }),
        ("multi_head_self_attention", false, |r| {
            let op = Composite::new("mhsa", |g, v| mhsa_graph(g, v[0], v[1], v[2], v[3], v[4], &TOY_ATTN));
            let mut inputs = vec![u(&[5, 8], r)];
            inputs.extend((0..4).map(|_| u(&[8, 8], r)));
            case(op, inputs)
        }),
        ("encoder_block", false, |r| {
            let op = Composite::new("encoder_block", |g, v| {
                let p = EncoderBlockVars::from_vars(&v[1..]);
                Ok(encoder_block_graph(g, v[0], &p, &TOY_ATTN)?.1)
            });
            let (d, h) = (TOY_ATTN.d_model, TOY_ATTN.mlp_hidden);
            let shapes: [&[usize]; 13] =
                [&[5, d], &[d], &[d], &[d, d], &[d, d], &[d, d], &[d, d], &[d], &[d], &[d, h], &[h], &[h, d], &[d]];
            case(op, shapes.iter().map(|s| u(s, r)).collect())
        }),
        ("embed", true, |r| {
            let op = Composite::new("embed", |g, v| embed_graph(g, v[0], v[1], v[2], v[3]));
            case(op, vec![u(&[3, 4], r), u(&[4, 5], r), u(&[5], r), u(&[4, 5], r)])
        }),
    ]
}

pub fn registered_ops() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _, _)| n).collect()
}

/// Finite-difference check of every registered operation on `seeds` random
/// instances each, derived from `seed`.
pub fn op_suite(seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    registry()
        .into_iter()
        .enumerate()
        .map(|(k, (name, affine, build))| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) ^ ((k as u64) << 32 | s as u64));
                let c = build(&mut rng);
                let refs: Vec<&Tensor> = c.inputs.iter().collect();
                let shape = c.op.forward(&refs)?.shape().to_vec();
                let weights = Tensor::uniform(&shape, 0.5, 1.5, &mut rng);
                worst = worst.max(weighted_check(c.op.as_ref(), &c.inputs, &weights, SUITE_STEP)?);
            }
            Ok(CheckResult { name, affine, seeds, worst })
        })
        .collect()
}

fn micro_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<PreparedSample> {
    let s = cfg.extractor.frame_size;
    let faces = Tensor::uniform(&[cfg.grid.n_f, s, s, 3], 0.0, 1.0, rng);
    let lips = Tensor::uniform(&[cfg.lip_frames, cfg.lip_height, cfg.lip_width], 0.0, 1.0, rng);
    let audio = Tensor::uniform(&[cfg.lip_frames, cfg.audio_frame_width], -1.0, 1.0, rng);
    PreparedSample::new(
        faces,
        LipSequence::with_size(lips, cfg.lip_height, cfg.lip_width)?,
        AudioFrameMatrix::new(audio)?,
    )
}

/// Worst relative error between backpropagated and finite-difference gradients
/// of the cross-entropy loss with respect to every parameter `mode` trains,
/// on the micro configuration.
pub fn micro_model_check(seed: u64, mode: Mode) -> Result<f64> {
    let cfg = ModelConfig::micro();
    let model = Model::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let sample = micro_sample(&cfg, &mut rng)?;
    let label = rng.gen_range(0..2);
    let specs = cfg.param_specs_for(mode);
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();

    let mut trace = model.trace(&sample, mode, true)?;
    let ce = trace.graph.cross_entropy(trace.probs, vec![label])?;
    let mut grads = trace.graph.backward(ce)?;
    let mut analytic = Vec::with_capacity(names.len());
    for (name, var) in &trace.params {
        if names.contains(name) {
            let g = grads.take(*var).unwrap_or_else(|| Tensor::zeros(trace.graph.value(*var).shape()));
            analytic.push((name.clone(), g));
        }
    }
    analytic.sort_by_key(|(n, _)| names.iter().position(|m| m == n));
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params().value(n).cloned()).collect::<Result<_>>()?;
    let analytic: Vec<Tensor> = analytic.into_iter().map(|(_, g)| g).collect();
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} of {} parameters reached the graph",
            analytic.len(),
            inputs.len()
        )));
    }
    check_scalar_fn(
        |xs| {
            let mut params = ParamSet::new();
            for p in model.params().iter() {
                let v = match names.iter().position(|n| *n == p.name) {
                    Some(i) => xs[i].clone(),
                    None => p.value.clone(),
                };
                params.insert(p.name.clone(), v)?;
            }
            let m = Model::from_params(cfg.clone(), params)?;
            let mut t = m.trace(&sample, mode, false)?;
            let ce = t.graph.cross_entropy(t.probs, vec![label])?;
            Ok(t.graph.value(ce).data()[0])
        },
        &inputs,
        &analytic,
        SUITE_STEP,
    )
}

/// The whole-model check in every mode, `seeds` instances each.
pub fn model_suite(seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    Mode::ALL
        .iter()
        .map(|&mode| {
            let name = match mode {
                Mode::Multimodal => "micro_model.multimodal",
                Mode::LipAudioOnly => "micro_model.lip_audio_only",
                Mode::FeaturesOnly => "micro_model.features_only",
            };
            let mut worst: f64 = 0.0;
            for s in 0..seeds as u64 {
                worst = worst.max(micro_model_check(seed.wrapping_mul(7919).wrapping_add(s), mode)?);
            }
            Ok(CheckResult { name, affine: false, seeds, worst })
        })
        .collect()
}

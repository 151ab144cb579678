//! Gradient-check suites for every tape operation and for the full
//! training objective.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::losses::RatingFeedback;
use crate::model::StyleModel;
use crate::params::Graph;
use crate::tensor::{
    grad_check_with_fault, sampled_grad_check, OpKind, Padding, Tape, Tensor, Var,
};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One differentiable scenario exercising `op`: a probe input and a scalar
/// function of it.
pub struct OpCase {
    pub op: OpKind,
    pub label: &'static str,
    pub input: Tensor,
    pub f: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub op: OpKind,
    pub label: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

struct CaseRng(ChaCha8Rng);

impl CaseRng {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.0)
    }
}

/// Reduce `y` to a scalar by a fixed random weighting, so every output
/// coordinate contributes with an O(1) weight.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    tape.weighted_sum(y, w)
}

fn case(
    op: OpKind,
    label: &'static str,
    input: Tensor,
    out_shape: &[usize],
    rng: &mut CaseRng,
    body: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> OpCase {
    let w = rng.normal(&[out_shape.iter().product::<usize>().max(1)]);
    OpCase {
        op,
        label,
        input,
        f: Box::new(move |tape, x| {
            let y = body(tape, x)?;
            project(tape, y, &w)
        }),
    }
}

/// Every gradient scenario for one seed.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = CaseRng(ChaCha8Rng::seed_from_u64(seed));
    let mut cases = Vec::new();

    cases.push(case(
        OpKind::Leaf,
        "identity",
        r.normal(&[3, 2]),
        &[6],
        &mut r,
        |_, x| Ok(x),
    ));

    let c = r.normal(&[3, 4]);
    cases.push(case(
        OpKind::Add,
        "x+c",
        r.normal(&[3, 4]),
        &[12],
        &mut r,
        move |t, x| {
            let c = t.constant(&c);
            let y = t.add(x, c)?;
            t.add(y, x)
        },
    ));

    let c = r.normal(&[3, 4]);
    cases.push(case(
        OpKind::Sub,
        "c-x",
        r.normal(&[3, 4]),
        &[12],
        &mut r,
        move |t, x| {
            let c = t.constant(&c);
            let y = t.sub(c, x)?;
            let z = t.mul(x, x)?;
            t.sub(y, z)
        },
    ));

    let c = r.normal(&[3, 4]);
    cases.push(case(
        OpKind::Mul,
        "x*c*x",
        r.normal(&[3, 4]),
        &[12],
        &mut r,
        move |t, x| {
            let c = t.constant(&c);
            let y = t.mul(x, c)?;
            t.mul(y, x)
        },
    ));

    cases.push(case(
        OpKind::Scale,
        "-1.7x",
        r.normal(&[5]),
        &[5],
        &mut r,
        |t, x| Ok(t.scale(x, -1.7)),
    ));

    cases.push(case(
        OpKind::AddBias,
        "x+row0",
        r.normal(&[4, 5]),
        &[20],
        &mut r,
        |t, x| {
            let b = t.gather(x, (0..5).collect::<Vec<_>>().into(), &[5])?;
            t.add_bias(x, b)
        },
    ));

    let right = r.normal(&[4, 2]);
    let left = r.normal(&[2, 3]);
    cases.push(case(
        OpKind::MatMul,
        "c·x·c",
        r.normal(&[3, 4]),
        &[4],
        &mut r,
        move |t, x| {
            let a = t.constant(&left);
            let b = t.constant(&right);
            let y = t.matmul(a, x)?;
            t.matmul(y, b)
        },
    ));
    cases.push(case(
        OpKind::MatMul,
        "x·xᵀ",
        r.normal(&[3, 4]),
        &[9],
        &mut r,
        |t, x| {
            let xt = t.transpose(x)?;
            t.matmul(x, xt)
        },
    ));

    cases.push(case(
        OpKind::Transpose,
        "xᵀ",
        r.normal(&[3, 4]),
        &[12],
        &mut r,
        |t, x| t.transpose(x),
    ));

    cases.push(case(
        OpKind::Relu,
        "relu",
        r.normal(&[4, 4]),
        &[16],
        &mut r,
        |t, x| Ok(t.relu(x)),
    ));

    cases.push(case(
        OpKind::Softplus,
        "softplus",
        r.normal(&[6]),
        &[6],
        &mut r,
        |t, x| {
            let y = t.scale(x, 3.0);
            Ok(t.softplus(y))
        },
    ));

    cases.push(case(
        OpKind::SoftmaxRows,
        "softmax",
        r.normal(&[3, 5]),
        &[15],
        &mut r,
        |t, x| t.softmax_rows(x),
    ));

    cases.push(case(
        OpKind::LayerNorm,
        "layer_norm",
        r.normal(&[5, 6]),
        &[18],
        &mut r,
        |t, x| {
            let gain = t.gather(x, (0..6).collect::<Vec<_>>().into(), &[6])?;
            let bias = t.gather(x, (6..12).collect::<Vec<_>>().into(), &[6])?;
            let rows = t.gather(x, (12..30).collect::<Vec<_>>().into(), &[3, 6])?;
            t.layer_norm(rows, gain, bias, 1e-5)
        },
    ));

    let k = r.normal(&[3, 3, 2, 3]);
    cases.push(case(
        OpKind::Conv2d,
        "zero pad, stride 1",
        r.normal(&[5, 6, 2]),
        &[90],
        &mut r,
        move |t, x| {
            let k = t.constant(&k);
            t.conv2d(x, k, 1, Padding::Zero)
        },
    ));
    let k = r.normal(&[5, 5, 2, 2]);
    cases.push(case(
        OpKind::Conv2d,
        "reflect pad, stride 2",
        r.normal(&[5, 6, 2]),
        &[18],
        &mut r,
        move |t, x| {
            let k = t.constant(&k);
            t.conv2d(x, k, 2, Padding::Reflect)
        },
    ));
    let img = r.normal(&[4, 5, 2]);
    cases.push(case(
        OpKind::Conv2d,
        "kernel",
        r.normal(&[3, 3, 2, 2]),
        &[40],
        &mut r,
        move |t, k| {
            let img = t.constant(&img);
            t.conv2d(img, k, 1, Padding::Zero)
        },
    ));

    cases.push(case(
        OpKind::Upsample2x,
        "upsample",
        r.normal(&[3, 4, 2]),
        &[96],
        &mut r,
        |t, x| t.upsample_nearest_2x(x),
    ));

    let idx: Rc<[usize]> = vec![3, 0, 7, 7, 11, 2].into();
    cases.push(case(
        OpKind::Gather,
        "gather with repeats",
        r.normal(&[3, 4]),
        &[6],
        &mut r,
        move |t, x| t.gather(x, idx.clone(), &[2, 3]),
    ));

    cases.push(case(
        OpKind::Reshape,
        "reshape",
        r.normal(&[2, 6]),
        &[12],
        &mut r,
        |t, x| t.reshape(x, &[3, 4]),
    ));

    cases.push(case(
        OpKind::SliceCols,
        "slice",
        r.normal(&[3, 6]),
        &[9],
        &mut r,
        |t, x| t.slice_cols(x, 1, 4),
    ));

    let c = r.normal(&[3, 2]);
    cases.push(case(
        OpKind::ConcatCols,
        "concat",
        r.normal(&[3, 4]),
        &[30],
        &mut r,
        move |t, x| {
            let c = t.constant(&c);
            t.concat_cols(&[x, c, x])
        },
    ));

    let c = r.normal(&[4]);
    cases.push(case(
        OpKind::Stack,
        "stack",
        r.normal(&[4]),
        &[12],
        &mut r,
        move |t, x| {
            let c = t.constant(&c);
            t.stack(&[x, c, x])
        },
    ));

    cases.push(case(
        OpKind::Sum,
        "sum",
        r.normal(&[3, 4]),
        &[1],
        &mut r,
        |t, x| Ok(t.sum(x)),
    ));
    cases.push(case(
        OpKind::Mean,
        "mean",
        r.normal(&[3, 4]),
        &[1],
        &mut r,
        |t, x| Ok(t.mean(x)),
    ));
    cases.push(case(
        OpKind::ColMean,
        "col_mean",
        r.normal(&[4, 5, 3]),
        &[3],
        &mut r,
        |t, x| Ok(t.col_mean(x)),
    ));
    cases.push(case(
        OpKind::ColStd,
        "col_std",
        r.normal(&[4, 5, 3]),
        &[3],
        &mut r,
        |t, x| Ok(t.col_std(x, 1e-5)),
    ));

    let c = r.normal(&[3, 4]);
    cases.push(case(
        OpKind::Mse,
        "mse",
        r.normal(&[3, 4]),
        &[1],
        &mut r,
        move |t, x| {
            let c = t.constant(&c);
            t.mse(x, c)
        },
    ));

    cases
}

/// Run every op case for every seed, optionally with one corrupted adjoint.
pub fn check_ops(seeds: &[u64], fault: Option<OpKind>) -> Result<Vec<OpResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for c in op_cases(seed) {
            let err = grad_check_with_fault(&c.f, &c.input, STEP, fault)?;
            out.push(OpResult {
                op: c.op,
                label: c.label,
                seed,
                max_rel_error: err,
            });
        }
    }
    Ok(out)
}

/// Largest error per op kind, in [`OpKind::ALL`] order.
pub fn worst_per_op(results: &[OpResult]) -> Vec<(OpKind, f64)> {
    OpKind::ALL
        .iter()
        .filter_map(|&k| {
            results
                .iter()
                .filter(|r| r.op == k)
                .map(|r| r.max_rel_error)
                .reduce(f64::max)
                .map(|e| (k, e))
        })
        .collect()
}

/// Small configuration for the full-objective check: 16×16 images, 2×2
/// tokens, width 8, two heads, two encoder and two decoder layers.
pub fn model_check_config(seed: u64) -> TrainConfig {
    TrainConfig {
        image_size: 16,
        patch: 8,
        d: 8,
        heads: 2,
        ffn: 32,
        seed,
        phi_seed: seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct ModelSample {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub samples: Vec<ModelSample>,
    pub tensor_names: Vec<String>,
}

impl ModelCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ModelSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Worst error per tensor name, in parameter order.
    pub fn per_tensor(&self) -> Vec<(String, f64)> {
        self.tensor_names
            .iter()
            .filter_map(|n| {
                self.samples
                    .iter()
                    .filter(|s| &s.tensor == n)
                    .map(|s| s.rel_error)
                    .reduce(f64::max)
                    .map(|e| (n.clone(), e))
            })
            .collect()
    }
}

/// Evaluate the rating-augmented objective (worst rating, so γ is live) of
/// `model` with the given parameter values.
fn objective_value(
    model: &StyleModel,
    params: &[Tensor],
    content: &Tensor,
    style: &Tensor,
    rating: &RatingFeedback,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = crate::params::ParamStore::bind_values(params, &mut tape);
    let mut g = Graph::new(&mut tape, &vars);
    let obj = model.objective(&mut g, content, style, Some(rating))?;
    tape.item(obj.augmented)
}

/// Central-difference check of the full objective at `min_samples` or more
/// parameter coordinates. Every tensor is probed at least once.
pub fn check_model(seed: u64, min_samples: usize) -> Result<ModelCheck> {
    let config = model_check_config(seed);
    let model = StyleModel::new(&config)?;
    let content = fixtures::radial(config.image_size).to_tensor();
    let style = fixtures::stripes(config.image_size).to_tensor();
    let rating = RatingFeedback::new("check", 1, 0)?;

    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape);
    let mut g = Graph::new(&mut tape, &vars);
    let obj = model.objective(&mut g, &content, &style, Some(&rating))?;
    let grads = tape.backward(obj.augmented)?;
    let mut analytic = Vec::with_capacity(model.store.len());
    for id in model.store.ids() {
        let grad = grads.wrt(vars[id]).ok_or_else(|| {
            Error::Contract(format!(
                "parameter {} received no gradient",
                model.store.name(id)
            ))
        })?;
        analytic.push(grad.to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let sizes: Vec<usize> = model.store.tensors().iter().map(Tensor::numel).collect();
    let mut picks: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(t, &n)| (t, rng.random_range(0..n)))
        .collect();
    while picks.len() < min_samples {
        let t = rng.random_range(0..sizes.len());
        picks.push((t, rng.random_range(0..sizes[t])));
    }

    let mut params = model.store.tensors().to_vec();
    let checks = sampled_grad_check(&mut params, &analytic, &picks, STEP, |p| {
        objective_value(&model, p, &content, &style, &rating)
    })?;
    Ok(ModelCheck {
        samples: checks
            .into_iter()
            .map(|c| ModelSample {
                tensor: model.store.names()[c.tensor].clone(),
                coord: c.coord,
                analytic: c.analytic,
                numeric: c.numeric,
                rel_error: c.rel_error,
            })
            .collect(),
        tensor_names: model.store.names().to_vec(),
    })
}

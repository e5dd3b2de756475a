//! Central finite-difference checks against the tape's reverse pass.
//!
//! Every case draws random shapes and values from a seeded stream, reduces
//! the output to a scalar through a fixed random projection and compares
//! each input's analytic gradient with `(f(x + h) - f(x - h)) / 2h`.

use bnta_core::layers::{
    avg_pool_global, avg_pool_striped, batch_norm_train, batch_norm_with_stats, conv2d, instance_norm, linear,
    BatchNorm2d, Binder, BnMode, GroupSet, ParamGroup, StatsSelection,
};
use bnta_core::losses::{self, BatchPair, LossWeights, TrainTerms};
use bnta_core::model::{ModelBundle, ModelConfig};
use bnta_core::rng::{self, StreamRng};
use bnta_core::{Float, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

pub const STEP: Float = 1e-5;
pub const TOLERANCE: Float = 1e-5;

/// Floor on the gradient norm below which the error is taken as absolute.
const NORM_FLOOR: Float = 1e-8;

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

pub struct Case {
    pub name: &'static str,
    pub sample: fn(&mut StreamRng) -> Instance,
}

pub fn uniform(r: &mut StreamRng, shape: &[usize], lo: Float, hi: Float) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn dim(r: &mut StreamRng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn instance(inputs: Vec<Tensor>, forward: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        forward: Box::new(forward),
    }
}

/// `||a - n|| / (||a|| + ||n||)`, the norm-wise relative error.
pub fn relative_error(analytic: &[Float], numeric: &[Float]) -> Float {
    let norm = |v: &mut dyn Iterator<Item = Float>| v.map(|x| x * x).sum::<Float>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(NORM_FLOOR)
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum_all(p)
}

/// Largest relative error over the instance's inputs.
pub fn check_instance(inst: &Instance, r: &mut StreamRng) -> Result<Float> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.param(t)).collect();
    let out = (inst.forward)(&mut tape, &vars)?;
    let weights = uniform(r, tape.shape(out), -1.0, 1.0);
    let scalar = project(&mut tape, out, &weights)?;
    tape.backward(scalar)?;

    let eval = |inputs: &[Tensor]| -> Result<Float> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = (inst.forward)(&mut t, &vs)?;
        let s = project(&mut t, out, &weights)?;
        Ok(t.value(s).data()[0])
    };
    let mut worst: Float = 0.0;
    let mut inputs = inst.inputs.clone();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[Float]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[slot].numel() {
            let x0 = inputs[slot].data()[k];
            inputs[slot].data_mut()[k] = x0 + STEP;
            let up = eval(&inputs)?;
            inputs[slot].data_mut()[k] = x0 - STEP;
            let down = eval(&inputs)?;
            inputs[slot].data_mut()[k] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn image_batch(r: &mut StreamRng) -> Tensor {
    let shape = [dim(r, 2, 3), dim(r, 1, 3), dim(r, 2, 4), dim(r, 2, 4)];
    uniform(r, &shape, -1.0, 1.0)
}

fn distinct_rows(r: &mut StreamRng) -> Tensor {
    let shape = [dim(r, 2, 4), dim(r, 2, 5)];
    uniform(r, &shape, -2.0, 2.0)
}

/// Labels with at least two images per identity and at least two identities.
fn grouped_labels(r: &mut StreamRng) -> Vec<usize> {
    let ids = dim(r, 2, 3);
    let mut labels: Vec<usize> = (0..ids).flat_map(|i| [i, i]).collect();
    labels.extend((0..dim(r, 0, 2)).map(|_| r.random_range(0..ids)));
    labels.shuffle(r);
    labels
}

fn disjoint_pairs(r: &mut StreamRng, images: usize, pairs: usize, stripes: usize) -> Vec<BatchPair> {
    let mut order: Vec<usize> = (0..images).collect();
    order.shuffle(r);
    order
        .chunks(2)
        .take(pairs)
        .map(|c| BatchPair {
            a: c[0],
            b: c[1],
            part: r.random_range(0..stripes),
        })
        .collect()
}

pub fn catalog() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            sample: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                instance(vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t, v| t.add(v[0], v[1]))
            },
        },
        Case {
            name: "add_broadcast_channels",
            sample: |r| {
                let x = image_batch(r);
                let s = x.shape().to_vec();
                let c = uniform(r, &[s[0], s[1], 1, 1], -1.0, 1.0);
                instance(vec![c, x], |t, v| t.add(v[0], v[1]))
            },
        },
        Case {
            name: "sub_broadcast_scalar",
            sample: |r| {
                let x = distinct_rows(r);
                instance(vec![x, uniform(r, &[1], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]))
            },
        },
        Case {
            name: "mul_broadcast",
            sample: |r| {
                let x = image_batch(r);
                let s = x.shape().to_vec();
                let c = uniform(r, &[s[0], s[1], 1, 1], -1.0, 1.0);
                instance(vec![x, c], |t, v| t.mul(v[0], v[1]))
            },
        },
        Case {
            name: "scale_shift_neg",
            sample: |r| {
                let c = r.random_range(-2.0..2.0);
                instance(vec![distinct_rows(r)], move |t, v| {
                    let a = t.scalar_mul(v[0], c);
                    let b = t.add_scalar(a, 0.7);
                    Ok(t.neg(b))
                })
            },
        },
        Case {
            name: "relu",
            sample: |r| instance(vec![distinct_rows(r)], |t, v| Ok(t.relu(v[0]))),
        },
        Case {
            name: "exp",
            sample: |r| instance(vec![distinct_rows(r)], |t, v| Ok(t.exp(v[0]))),
        },
        Case {
            name: "sqrt",
            sample: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                instance(vec![uniform(r, &s, 0.5, 2.0)], |t, v| t.sqrt(v[0]))
            },
        },
        Case {
            name: "log",
            sample: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                instance(vec![uniform(r, &s, 0.5, 2.0)], |t, v| t.log(v[0]))
            },
        },
        Case {
            name: "softmax",
            sample: |r| {
                let axis = r.random_range(0..2);
                instance(vec![distinct_rows(r)], move |t, v| t.softmax(v[0], axis))
            },
        },
        Case {
            name: "log_softmax",
            sample: |r| {
                let axis = r.random_range(0..2);
                instance(vec![distinct_rows(r)], move |t, v| t.log_softmax(v[0], axis))
            },
        },
        Case {
            name: "sum_mean_axes",
            sample: |r| {
                let axes: Vec<usize> = if r.random_bool(0.5) { vec![0, 2] } else { vec![2, 3] };
                instance(vec![image_batch(r)], move |t, v| {
                    let s = t.sum(v[0], &axes)?;
                    let m = t.mean(v[0], &axes)?;
                    let m = t.scalar_mul(m, 3.0);
                    t.add(s, m)
                })
            },
        },
        Case {
            name: "var_axes",
            sample: |r| {
                let axes: Vec<usize> = if r.random_bool(0.5) { vec![0, 2, 3] } else { vec![1] };
                instance(vec![image_batch(r)], move |t, v| t.var(v[0], &axes))
            },
        },
        Case {
            name: "sum_all_mean_all",
            sample: |r| {
                instance(vec![image_batch(r)], |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    let s = t.sum_all(sq)?;
                    let m = t.mean_all(v[0])?;
                    t.add(s, m)
                })
            },
        },
        Case {
            name: "max_min",
            sample: |r| {
                let axis = r.random_range(0..2);
                instance(vec![distinct_rows(r)], move |t, v| {
                    let hi = t.max(v[0], axis)?;
                    let lo = t.min(v[0], axis)?;
                    let lo = t.scalar_mul(lo, 0.5);
                    t.add(hi, lo)
                })
            },
        },
        Case {
            name: "euclidean_distance_rows",
            sample: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 5)];
                instance(vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t, v| {
                    t.euclidean_distance(v[0], v[1])
                })
            },
        },
        Case {
            name: "euclidean_distance_vectors",
            sample: |r| {
                let s = [dim(r, 1, 6)];
                instance(vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t, v| {
                    t.euclidean_distance(v[0], v[1])
                })
            },
        },
        Case {
            name: "matmul_transpose",
            sample: |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                instance(vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[n, k], -1.0, 1.0)], |t, v| {
                    let bt = t.transpose(v[1])?;
                    t.matmul(v[0], bt)
                })
            },
        },
        Case {
            name: "reshape_index_select",
            sample: |r| {
                let x = image_batch(r);
                let s = x.shape().to_vec();
                let rows = s[0] * s[1];
                let idx: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.random_range(0..rows)).collect();
                instance(vec![x], move |t, v| {
                    let flat = t.reshape(v[0], &[rows, s[2] * s[3]])?;
                    t.index_select(flat, &idx)
                })
            },
        },
        Case {
            name: "pick",
            sample: |r| {
                let x = distinct_rows(r);
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let cols: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                instance(vec![x], move |t, v| t.pick(v[0], &cols))
            },
        },
        Case {
            name: "concat",
            sample: |r| {
                let k = dim(r, 1, 4);
                let (ra, rb) = (dim(r, 1, 3), dim(r, 1, 3));
                let a = uniform(r, &[ra, k], -1.0, 1.0);
                let b = uniform(r, &[rb, k], -1.0, 1.0);
                instance(vec![a, b], |t, v| t.concat(&[v[0], v[1], v[0]]))
            },
        },
        Case {
            name: "conv2d",
            sample: |r| {
                let (stride, kernel) = (dim(r, 1, 2), dim(r, 1, 3));
                let (oh, ow) = (dim(r, 1, 3), dim(r, 1, 3));
                let size = |o: usize, p: usize| ((o - 1) * stride + kernel).checked_sub(2 * p).filter(|&n| n >= 1);
                let mut padding = r.random_range(0..kernel);
                if size(oh, padding).is_none() || size(ow, padding).is_none() {
                    padding = 0;
                }
                let (h, w) = (size(oh, padding).unwrap(), size(ow, padding).unwrap());
                let (cin, cout, b) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2));
                let x = uniform(r, &[b, cin, h, w], -1.0, 1.0);
                let wt = uniform(r, &[cout, cin, kernel, kernel], -1.0, 1.0);
                let bias = r.random_bool(0.5);
                let mut inputs = vec![x, wt];
                if bias {
                    inputs.push(uniform(r, &[cout], -1.0, 1.0));
                }
                instance(inputs, move |t, v| conv2d(t, v[0], v[1], v.get(2).copied(), stride, padding))
            },
        },
        Case {
            name: "linear",
            sample: |r| {
                let (b, d, o) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
                let inputs = vec![
                    uniform(r, &[b, d], -1.0, 1.0),
                    uniform(r, &[o, d], -1.0, 1.0),
                    uniform(r, &[o], -1.0, 1.0),
                ];
                instance(inputs, |t, v| linear(t, v[0], v[1], v[2]))
            },
        },
        Case {
            name: "batch_norm_train",
            sample: |r| {
                let x = image_batch(r);
                let c = x.shape()[1];
                let inputs = vec![x, uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)];
                instance(inputs, |t, v| Ok(batch_norm_train(t, v[0], v[1], v[2], 1e-5)?.0))
            },
        },
        Case {
            name: "batch_norm_with_stats",
            sample: |r| {
                let x = image_batch(r);
                let c = x.shape()[1];
                let inputs = vec![
                    x,
                    uniform(r, &[c], 0.5, 1.5),
                    uniform(r, &[c], -0.5, 0.5),
                    uniform(r, &[c], -0.5, 0.5),
                    uniform(r, &[c], 0.5, 2.0),
                ];
                instance(inputs, |t, v| batch_norm_with_stats(t, v[0], v[1], v[2], v[3], v[4], 1e-5))
            },
        },
        Case {
            name: "instance_norm_affine",
            sample: |r| {
                let x = image_batch(r);
                let c = x.shape()[1];
                let inputs = vec![x, uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)];
                instance(inputs, |t, v| instance_norm(t, v[0], Some((v[1], v[2])), 1e-5))
            },
        },
        Case {
            name: "instance_norm_plain",
            sample: |r| instance(vec![image_batch(r)], |t, v| instance_norm(t, v[0], None, 1e-5)),
        },
        Case {
            name: "avg_pool_global",
            sample: |r| instance(vec![image_batch(r)], |t, v| avg_pool_global(t, v[0])),
        },
        Case {
            name: "avg_pool_striped",
            sample: |r| {
                let stripes = dim(r, 1, 3);
                let shape = [dim(r, 1, 2), dim(r, 1, 3), stripes * dim(r, 1, 2), dim(r, 1, 3)];
                instance(vec![uniform(r, &shape, -1.0, 1.0)], move |t, v| avg_pool_striped(t, v[0], stripes))
            },
        },
        Case {
            name: "cross_entropy",
            sample: |r| {
                let x = distinct_rows(r);
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                instance(vec![x], move |t, v| losses::cross_entropy(t, v[0], &labels))
            },
        },
        Case {
            name: "loss_id",
            sample: |r| {
                let x = distinct_rows(r);
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                instance(vec![x], move |t, v| losses::loss_id(t, v[0], &labels))
            },
        },
        Case {
            name: "loss_pos",
            sample: |r| {
                let (b, h) = (dim(r, 1, 3), dim(r, 2, 4));
                instance(vec![uniform(r, &[b * h, h], -2.0, 2.0)], |t, v| losses::loss_pos(t, v[0]))
            },
        },
        Case {
            name: "loss_mat_train",
            sample: |r| {
                let (b, h, m) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 2, 4));
                let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..m)).collect();
                instance(vec![uniform(r, &[b, h, m], -2.0, 2.0)], move |t, v| {
                    losses::loss_mat_train(t, v[0], &labels)
                })
            },
        },
        Case {
            name: "loss_triplet_fsl",
            sample: |r| {
                let labels = grouped_labels(r);
                let d = dim(r, 2, 4);
                let margin = r.random_range(0.1..0.5);
                instance(vec![uniform(r, &[labels.len(), d], -1.0, 1.0)], move |t, v| {
                    losses::loss_triplet_fsl(t, v[0], &labels, margin)
                })
            },
        },
        Case {
            name: "loss_mat_tta",
            sample: |r| {
                let (pairs, h, cl) = (dim(r, 2, 3), dim(r, 1, 3), dim(r, 2, 4));
                let b = 2 * pairs + dim(r, 0, 2);
                let chosen = disjoint_pairs(r, b, pairs, h);
                let symmetric = r.random_bool(0.5);
                let margin = r.random_range(0.5..2.0);
                instance(vec![uniform(r, &[b, h, cl], -1.0, 1.0)], move |t, v| {
                    losses::loss_mat_tta(t, v[0], &chosen, margin, symmetric)
                })
            },
        },
        Case {
            name: "loss_train_total",
            sample: |r| {
                let (b, h, m) = (dim(r, 2, 3), dim(r, 2, 3), dim(r, 2, 4));
                let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
                let inputs = vec![
                    uniform(r, &[b, m], -1.0, 1.0),
                    uniform(r, &[b * h, h], -1.0, 1.0),
                    uniform(r, &[b, h, m], -1.0, 1.0),
                ];
                instance(inputs, move |t, v| {
                    let terms = TrainTerms {
                        id: Some(losses::loss_id(t, v[0], &labels)?),
                        pos: Some(losses::loss_pos(t, v[1])?),
                        mat: Some(losses::loss_mat_train(t, v[2], &labels)?),
                        triplet: None,
                    };
                    losses::loss_train_total(t, &terms, &LossWeights::default())
                })
            },
        },
        Case {
            name: "loss_tta_total",
            sample: |r| {
                let h = dim(r, 2, 3);
                let b = 4;
                let chosen = disjoint_pairs(r, b, 2, h);
                let inputs = vec![uniform(r, &[b * h, h], -1.0, 1.0), uniform(r, &[b, h, 3], -1.0, 1.0)];
                instance(inputs, move |t, v| {
                    let pos = losses::loss_pos(t, v[0])?;
                    let mat = losses::loss_mat_tta(t, v[1], &chosen, 1.0, true)?;
                    losses::loss_tta_total(t, Some(pos), Some(mat), &LossWeights::default())
                })
            },
        },
        Case {
            name: "micro_net",
            sample: |r| {
                // conv -> bn -> relu -> pool -> fc -> cross-entropy
                let (b, cin, cmid, classes) = (dim(r, 2, 4), dim(r, 1, 2), dim(r, 2, 4), dim(r, 2, 4));
                let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..classes)).collect();
                let inputs = vec![
                    uniform(r, &[b, cin, 4, 4], -1.0, 1.0),
                    uniform(r, &[cmid, cin, 3, 3], -1.0, 1.0),
                    uniform(r, &[cmid], 0.5, 1.5),
                    uniform(r, &[cmid], -0.5, 0.5),
                    uniform(r, &[classes, cmid], -1.0, 1.0),
                    uniform(r, &[classes], -1.0, 1.0),
                ];
                instance(inputs, move |t, v| {
                    let h = conv2d(t, v[0], v[1], None, 1, 1)?;
                    let (h, _) = batch_norm_train(t, h, v[2], v[3], 1e-5)?;
                    let h = t.relu(h);
                    let h = avg_pool_global(t, h)?;
                    let logits = linear(t, h, v[4], v[5])?;
                    losses::cross_entropy(t, logits, &labels)
                })
            },
        },
    ]
}

pub struct CaseResult {
    pub name: &'static str,
    pub worst: Float,
    pub failures: usize,
}

/// Run every case over `seeds` instances.
pub fn run_catalog(seeds: u64) -> Vec<CaseResult> {
    catalog()
        .into_iter()
        .enumerate()
        .map(|(c, case)| {
            let mut worst: Float = 0.0;
            let mut failures = 0;
            for seed in 0..seeds {
                let mut r = rng::substream(seed, "gradcheck", c as u64);
                let inst = (case.sample)(&mut r);
                let err = check_instance(&inst, &mut r).unwrap_or_else(|e| panic!("{}: {e}", case.name));
                if !(err < TOLERANCE) {
                    failures += 1;
                }
                worst = worst.max(err);
            }
            CaseResult {
                name: case.name,
                worst,
                failures,
            }
        })
        .collect()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_height: 6,
        image_width: 3,
        channels: vec![3, 4],
        strides: vec![1, 1],
        instance_norm: vec![true, false],
        stripes: 3,
        part_dim: 3,
        num_ids: 3,
        ..ModelConfig::default()
    }
}

/// Which composite objective a model-level check differentiates.
#[derive(Clone, Copy, Debug)]
pub enum ModelObjective {
    /// All training losses in Train mode, every trainable group.
    Train,
    /// Adaptation losses with running statistics as leaves.
    AdaptStatsByGradient,
}

fn model_loss(model: &ModelBundle, x: &Tensor, objective: ModelObjective, groups: GroupSet) -> Result<(Tape, Binder, Var)> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let mut binder = Binder::new(groups);
    let xv = tape.constant(x.clone());
    let b = x.shape()[0];
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let pairs = [BatchPair { a: 0, b: 1, part: 0 }, BatchPair { a: 2, b: 3, part: 2 }];
    let total = match objective {
        ModelObjective::Train => {
            let out = m.forward(&mut tape, &mut binder, xv, BnMode::Train)?;
            let terms = TrainTerms {
                id: Some(losses::loss_id(&mut tape, out.logits_id, &labels)?),
                pos: Some(losses::loss_pos(&mut tape, out.logits_pos)?),
                mat: Some(losses::loss_mat_train(&mut tape, out.logits_mat, &labels)?),
                triplet: Some(losses::loss_triplet_fsl(&mut tape, out.global, &labels, 0.3)?),
            };
            let w = LossWeights {
                use_fsl_triplet: true,
                ..LossWeights::default()
            };
            losses::loss_train_total(&mut tape, &terms, &w)?
        }
        ModelObjective::AdaptStatsByGradient => {
            let out = m.forward(&mut tape, &mut binder, xv, BnMode::Eval)?;
            let pos = losses::loss_pos(&mut tape, out.logits_pos)?;
            let mat = losses::loss_mat_tta(&mut tape, out.part_embeddings, &pairs, 1.0, true)?;
            losses::loss_tta_total(&mut tape, Some(pos), Some(mat), &LossWeights::default())?
        }
    };
    Ok((tape, binder, total))
}

/// Finite differences on `coords` randomly chosen parameter entries of a
/// small network; returns the relative error over the sampled entries.
pub fn check_model(seed: u64, objective: ModelObjective, coords: usize) -> Result<Float> {
    let cfg = tiny_model_config();
    let mut r = rng::substream(seed, "gradcheck-model", objective as u64);
    let mut model = ModelBundle::new(cfg.clone(), &mut r)?;
    // Move running statistics off their initial values so Eval-mode
    // normalization is not the identity.
    for bn in model.bn_layers_mut() {
        let c = bn.channels();
        bn.state.running_mu.value = uniform(&mut r, &[c], -0.2, 0.2);
        bn.state.running_var.value = uniform(&mut r, &[c], 0.5, 1.5);
    }
    let x = uniform(&mut r, &[4, cfg.in_channels, cfg.image_height, cfg.image_width], 0.0, 1.0);
    let groups = match objective {
        ModelObjective::Train => {
            let mut g = GroupSet::all();
            g.remove(ParamGroup::BnMu);
            g.remove(ParamGroup::BnSigma2);
            g
        }
        ModelObjective::AdaptStatsByGradient => GroupSet::all_bn(),
    };
    let (mut tape, binder, total) = model_loss(&model, &x, objective, groups)?;
    tape.backward(total)?;
    let candidates: Vec<(String, usize)> = model
        .select_params(groups)
        .into_iter()
        .flat_map(|p| (0..p.value.numel()).map(move |k| (p.name.clone(), k)))
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..coords {
        let (name, k) = candidates[r.random_range(0..candidates.len())].clone();
        let var = binder.lookup(&name).expect("selected parameter is bound");
        analytic.push(tape.grad(var).map_or(0.0, |g| g[k]));
        let base = model.param(&name).expect("parameter exists").value.clone();
        let mut at = |delta: Float| -> Result<Float> {
            let mut v = base.clone();
            v.data_mut()[k] += delta;
            model.set_param(&name, v)?;
            let (t, _, s) = model_loss(&model, &x, objective, groups)?;
            Ok(t.value(s).data()[0])
        };
        let up = at(STEP)?;
        let down = at(-STEP)?;
        model.set_param(&name, base)?;
        numeric.push((up - down) / (2.0 * STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Statistics re-estimation treats the batch statistics as constants, so
/// through a stack of layers the reverse pass is deliberately not the
/// derivative of the forward map. On a single layer with a fixed input the
/// statistics cannot move and the two must agree for gamma and beta.
pub fn check_bn_tta_stats(seed: u64) -> Result<Float> {
    let mut r = rng::substream(seed, "gradcheck-bn-tta", 0);
    let shape = [dim(&mut r, 2, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
    let x = uniform(&mut r, &shape, -1.0, 2.0);
    let mut bn = BatchNorm2d::new("bn", shape[1], 1e-5, 0.1)?;
    bn.state.gamma.value = uniform(&mut r, &[shape[1]], 0.5, 1.5);
    bn.state.beta.value = uniform(&mut r, &[shape[1]], -0.5, 0.5);
    bn.state.running_mu.value = uniform(&mut r, &[shape[1]], -0.5, 0.5);
    bn.state.running_var.value = uniform(&mut r, &[shape[1]], 0.5, 1.5);
    bn.state.tta_update = StatsSelection {
        mean: r.random_bool(0.7),
        var: r.random_bool(0.7),
    };
    let weights = uniform(&mut r, &shape, -1.0, 1.0);
    let groups = GroupSet::from_groups(&[ParamGroup::BnGamma, ParamGroup::BnBeta]);
    let loss = |bn: &BatchNorm2d| -> Result<(Tape, Binder, Var)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(groups);
        let xv = tape.constant(x.clone());
        let (y, _) = bn.forward_in(BnMode::TtaStats, &mut tape, &mut binder, xv)?;
        let sq = tape.mul(y, y)?;
        let s = project(&mut tape, sq, &weights)?;
        Ok((tape, binder, s))
    };
    let (mut tape, binder, s) = loss(&bn)?;
    tape.backward(s)?;
    let mut worst: Float = 0.0;
    for name in [bn.state.gamma.name.clone(), bn.state.beta.name.clone()] {
        let var = binder.lookup(&name).expect("affine parameter is bound");
        let analytic = tape.grad(var).map(<[Float]>::to_vec).unwrap_or_default();
        let mut numeric = Vec::new();
        for k in 0..shape[1] {
            let at = |delta: Float| -> Result<Float> {
                let mut probe = bn.clone();
                let p = if name == probe.state.gamma.name { &mut probe.state.gamma } else { &mut probe.state.beta };
                p.value.data_mut()[k] += delta;
                let (t, _, s) = loss(&probe)?;
                Ok(t.value(s).data()[0])
            };
            numeric.push((at(STEP)? - at(-STEP)?) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

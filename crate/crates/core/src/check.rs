//! Numerical gradient verification.
//!
//! Central finite differences over the recorded forward pass, compared
//! against the tape's analytic gradients. The differencing side never touches
//! `backward`: it only rebuilds graphs and reads forward values, so it is an
//! independent oracle for the reverse sweep.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BnMode, Graph, NodeId};
use crate::tensor::Tensor;

/// Builds a scalar loss over leaves inserted in order.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Analytic gradients of the loss w.r.t. every leaf.
pub fn analytic_grads(build: LossBuilder, leaves: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    Ok(ids.iter().map(|&id| g.grad_or_zeros(&grads, id)).collect())
}

fn loss_value(build: LossBuilder, leaves: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss).item())
}

/// Central finite differences (step `h`) of the loss w.r.t. every leaf.
pub fn finite_diff_grads(build: LossBuilder, leaves: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut grad = vec![0.0; leaf.len()];
        for e in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            let mut d_plus = leaf.data().to_vec();
            let mut d_minus = leaf.data().to_vec();
            d_plus[e] += h;
            d_minus[e] -= h;
            plus[li] = Tensor::new(leaf.shape().to_vec(), d_plus)?;
            minus[li] = Tensor::new(leaf.shape().to_vec(), d_minus)?;
            grad[e] = (loss_value(build, &plus)? - loss_value(build, &minus)?) / (2.0 * h);
        }
        out.push(Tensor::new(leaf.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Worst elementwise error between analytic and differenced gradients,
/// relative for O(1) entries and absolute below 1.
pub fn max_rel_error(analytic: &[Tensor], fd: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        for (&x, &y) in a.data().iter().zip(f.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Run both sides and return the worst error.
pub fn gradcheck(build: LossBuilder, leaves: &[Tensor], h: f64) -> Result<f64> {
    let a = analytic_grads(build, leaves)?;
    let f = finite_diff_grads(build, leaves, h)?;
    Ok(max_rel_error(&a, &f))
}

/// Result of checking one op kind.
#[derive(Debug)]
pub struct OpCheckResult {
    pub op: &'static str,
    pub max_err: f64,
    pub instances: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform magnitudes in [0.2, 1.0] with random sign; keeps finite
/// differencing away from the kinks of relu/abs/sign.
fn uniform_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalarize an op output: weighted sum against a fixed random constant.
fn weighted_sum(g: &mut Graph, out: NodeId, weights: Tensor) -> Result<NodeId> {
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Finite-difference check over every differentiable op kind.
///
/// `stop-gradient` is deliberately absent: its backward is zero by
/// definition, which is exactly what differencing its identity forward would
/// contradict; its contract is covered by dedicated unit tests instead.
pub fn gradcheck_all_ops(seed: u64, instances: usize, h: f64) -> Result<Vec<OpCheckResult>> {
    let mut results = Vec::new();
    let mut run = |op: &'static str,
                   f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64) << 8 ^ fxhash(op));
            worst = worst.max(f(&mut rng)?);
        }
        results.push(OpCheckResult {
            op,
            max_err: worst,
            instances,
        });
        Ok(())
    };

    run("add", &mut |rng| {
        let leaves = [uniform(rng, &[3, 4]), uniform(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.add(ids[0], ids[1])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("subtract", &mut |rng| {
        let leaves = [uniform(rng, &[3, 4]), uniform(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.sub(ids[0], ids[1])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("elementwise-multiply", &mut |rng| {
        let leaves = [uniform(rng, &[4, 3]), uniform(rng, &[4, 3])];
        let w = uniform(rng, &[4, 3]);
        gradcheck(
            &|g, ids| {
                let y = g.mul(ids[0], ids[1])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("matmul", &mut |rng| {
        let leaves = [uniform(rng, &[4, 3]), uniform(rng, &[3, 5])];
        let w = uniform(rng, &[4, 5]);
        gradcheck(
            &|g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("add-broadcast-bias", &mut |rng| {
        // Alternate between the matrix and the channel form.
        if rng.gen_bool(0.5) {
            let leaves = [uniform(rng, &[4, 3]), uniform(rng, &[3])];
            let w = uniform(rng, &[4, 3]);
            gradcheck(
                &|g, ids| {
                    let y = g.add_bias(ids[0], ids[1])?;
                    weighted_sum(g, y, w.clone())
                },
                &leaves,
                h,
            )
        } else {
            let leaves = [uniform(rng, &[2, 3, 2, 2]), uniform(rng, &[3])];
            let w = uniform(rng, &[2, 3, 2, 2]);
            gradcheck(
                &|g, ids| {
                    let y = g.add_bias(ids[0], ids[1])?;
                    weighted_sum(g, y, w.clone())
                },
                &leaves,
                h,
            )
        }
    })?;
    run("relu", &mut |rng| {
        let leaves = [uniform_off_kink(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.relu(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("sigmoid", &mut |rng| {
        let leaves = [uniform(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.sigmoid(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("tanh", &mut |rng| {
        let leaves = [uniform(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.tanh(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("sign", &mut |rng| {
        // Piecewise constant away from zero: differencing and the defined
        // zero gradient must agree exactly.
        let leaves = [uniform_off_kink(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.sign(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("abs", &mut |rng| {
        let leaves = [uniform_off_kink(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.abs(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("log", &mut |rng| {
        let leaves = [positive(rng, &[3, 4], 0.5, 1.5)];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.log(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("scalar-multiply", &mut |rng| {
        let factor = rng.gen_range(-2.0..2.0);
        let leaves = [uniform(rng, &[3, 4])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.scalar_mul(ids[0], factor)?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("concat-last-axis", &mut |rng| {
        let leaves = [uniform(rng, &[3, 2]), uniform(rng, &[3, 4])];
        let w = uniform(rng, &[3, 6]);
        gradcheck(
            &|g, ids| {
                let y = g.concat_last(ids[0], ids[1])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("reshape", &mut |rng| {
        let leaves = [uniform(rng, &[2, 6])];
        let w = uniform(rng, &[3, 4]);
        gradcheck(
            &|g, ids| {
                let y = g.reshape(ids[0], vec![3, 4])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("slice-cols", &mut |rng| {
        let leaves = [uniform(rng, &[3, 5])];
        let w = uniform(rng, &[3, 3]);
        gradcheck(
            &|g, ids| {
                let y = g.slice_cols(ids[0], 1, 3)?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("slice-rows", &mut |rng| {
        let leaves = [uniform(rng, &[5, 3])];
        let w = uniform(rng, &[2, 3]);
        gradcheck(
            &|g, ids| {
                let y = g.slice_rows(ids[0], 2, 2)?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("sum", &mut |rng| {
        let leaves = [uniform(rng, &[3, 4])];
        gradcheck(&|g, ids| g.sum(ids[0]), &leaves, h)
    })?;
    run("avg-pool-2x2", &mut |rng| {
        let leaves = [uniform(rng, &[2, 3, 4, 4])];
        let w = uniform(rng, &[2, 3, 2, 2]);
        gradcheck(
            &|g, ids| {
                let y = g.avg_pool2(ids[0])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("conv2d", &mut |rng| {
        let leaves = [uniform(rng, &[2, 2, 5, 5]), uniform(rng, &[3, 2, 3, 3])];
        let w = uniform(rng, &[2, 3, 5, 5]);
        gradcheck(
            &|g, ids| {
                let y = g.conv2d_same(ids[0], ids[1])?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("batch-norm", &mut |rng| {
        let leaves = [
            uniform(rng, &[3, 2, 2, 2]),
            positive(rng, &[2], 0.5, 1.5),
            uniform(rng, &[2]),
        ];
        let w = uniform(rng, &[3, 2, 2, 2]);
        let mode = if rng.gen_bool(0.5) {
            BnMode::Batch
        } else {
            BnMode::Running {
                mean: uniform(rng, &[2]),
                var: positive(rng, &[2], 0.5, 1.5),
            }
        };
        gradcheck(
            &|g, ids| {
                let y = g.batch_norm(ids[0], ids[1], ids[2], 1e-5, mode.clone())?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;
    run("softmax-cross-entropy", &mut |rng| {
        let b = 4;
        let k = 6;
        let logits = uniform(rng, &[b, k]);
        let labels = Tensor::from_fn(&[b, k], {
            let mut picks = vec![0usize; b];
            for p in picks.iter_mut() {
                *p = rng.gen_range(0..k);
            }
            move |i| {
                let (row, col) = (i / k, i % k);
                if picks[row] == col {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let leaves = [logits, labels];
        gradcheck(&|g, ids| g.softmax_cross_entropy(ids[0], ids[1]), &leaves, h)
    })?;
    run("lstm-cell", &mut |rng| {
        let (n, in_dim, hh) = (3, 2, 4);
        let leaves = [
            uniform(rng, &[n, in_dim]),
            uniform(rng, &[n, hh]),
            uniform(rng, &[n, hh]),
            uniform(rng, &[in_dim, 4 * hh]),
            uniform(rng, &[hh, 4 * hh]),
            uniform(rng, &[4 * hh]),
        ];
        let w = uniform(rng, &[n, 2 * hh]);
        gradcheck(
            &|g, ids| {
                let y = g.lstm_cell(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], hh)?;
                weighted_sum(g, y, w.clone())
            },
            &leaves,
            h,
        )
    })?;

    Ok(results)
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |acc, b| {
        (acc ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

// ---- meta-gradient verification on a toy optimizee ----

use crate::lstm::{GroupedMetaOptimizer, LstmPhi};
use crate::models::{ParamGroup, ParamSet};

const TOY_TARGET: [f64; 2] = [0.7, -0.4];

fn toy_params(theta: &[f64; 2]) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("theta", Tensor::vector(theta), ParamGroup::Linear);
    p
}

/// Outcome of one unrolled window on the quadratic optimizee
/// loss(theta) = (theta0 - 0.7)^2 + (theta1 + 0.4)^2.
pub struct ToyRun {
    pub meta_loss: f64,
    /// d(meta loss)/d(phi), aligned with the phi ParamSet order.
    pub phi_grads: Vec<Tensor>,
    /// d(meta loss)/d(initial theta leaf).
    pub theta_grad: Tensor,
    /// Optimizee gradients fed to the update rule, one per step.
    pub grad_inputs: Vec<Vec<Tensor>>,
}

/// Run `steps` update steps through the production tape machinery.
///
/// With `frozen` set, the recorded gradient sequence is fed instead of live
/// gradients; the meta-loss value is then the first-order objective whose
/// exact derivative the stop-gradient backward is supposed to produce.
pub fn run_toy_unroll(
    phi: &LstmPhi,
    theta0: &[f64; 2],
    steps: usize,
    frozen: Option<&[Vec<Tensor>]>,
) -> Result<ToyRun> {
    let template = toy_params(theta0);
    let opt = GroupedMetaOptimizer::for_params(&template, |_| phi.clone());
    let mut graph = Graph::new();
    let mut session = opt.begin_window(&mut graph, true);
    let theta_leaf = graph.leaf(template.entry(0).tensor.clone(), true);
    let mut param_nodes = vec![theta_leaf];
    let target = Tensor::vector(&TOY_TARGET);

    let quad_loss = |graph: &mut Graph, at: NodeId| -> Result<NodeId> {
        let c = graph.constant(target.clone());
        let d = graph.sub(at, c)?;
        let sq = graph.mul(d, d)?;
        graph.sum(sq)
    };

    let mut grad_inputs: Vec<Vec<Tensor>> = Vec::with_capacity(steps);
    let mut meta: Option<NodeId> = None;
    for t in 0..steps {
        let stopped: Vec<NodeId> = param_nodes
            .iter()
            .map(|&id| graph.stop_gradient(id))
            .collect::<Result<_>>()?;
        let pre = quad_loss(&mut graph, stopped[0])?;
        let grads: Vec<Tensor> = match frozen {
            Some(seq) => seq[t].clone(),
            None => {
                let map = graph.backward_keep(pre, &stopped)?;
                stopped.iter().map(|&id| graph.grad_or_zeros(&map, id)).collect()
            }
        };
        grad_inputs.push(grads.clone());
        param_nodes = opt.step_on_graph(&mut graph, &mut session, &param_nodes, &grads, 10.0)?;
        let post = quad_loss(&mut graph, param_nodes[0])?;
        meta = Some(match meta {
            Some(acc) => graph.add(acc, post)?,
            None => post,
        });
    }
    let meta_node = meta.expect("steps >= 1");
    let mut keep = opt.phi_nodes(&session, ParamGroup::Linear);
    keep.push(theta_leaf);
    let map = graph.backward_keep(meta_node, &keep)?;
    let phi_nodes = opt.phi_nodes(&session, ParamGroup::Linear);
    Ok(ToyRun {
        meta_loss: graph.value(meta_node).item(),
        phi_grads: phi_nodes
            .iter()
            .map(|&id| graph.grad_or_zeros(&map, id))
            .collect(),
        theta_grad: graph.grad_or_zeros(&map, theta_leaf),
        grad_inputs,
    })
}

/// Compare the tape's first-order meta-gradient against central finite
/// differences of the frozen-input objective; returns the worst error.
///
/// The oracle encodes the stop-gradient semantics: the optimizee-gradient
/// sequence is recorded once at the base point and held constant while phi
/// is perturbed, exactly the dependence the stop nodes cut.
pub fn meta_gradient_check(seed: u64, steps: usize, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = LstmPhi::init(seed);
    // Nonzero projection so updates flow and every weight matters.
    let mut tensors: Vec<Tensor> = base.param_set().tensors().cloned().collect();
    let last = tensors.len() - 1;
    tensors[last - 1] = Tensor::from_fn(tensors[last - 1].shape(), |_| rng.gen_range(-0.2..0.2));
    tensors[last] = Tensor::vector(&[rng.gen_range(-0.1..0.1)]);
    let phi = base.with_params(base.param_set().with_tensors(tensors)?)?;

    let theta0 = [0.1, -0.25];
    let live = run_toy_unroll(&phi, &theta0, steps, None)?;
    let largest = live
        .phi_grads
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    if largest < 1e-8 {
        return Err(crate::Error::InvalidConfig(
            "degenerate meta-gradient check: all phi gradients ~ 0".into(),
        ));
    }

    let mut worst = 0.0f64;
    let base_tensors: Vec<Tensor> = phi.param_set().tensors().cloned().collect();
    for (ti, tensor) in base_tensors.iter().enumerate() {
        for e in 0..tensor.len() {
            let bump = |delta: f64| -> Result<f64> {
                let mut ts = base_tensors.clone();
                let mut data = ts[ti].data().to_vec();
                data[e] += delta;
                ts[ti] = Tensor::new(ts[ti].shape().to_vec(), data)?;
                let phi2 = phi.with_params(phi.param_set().with_tensors(ts)?)?;
                Ok(run_toy_unroll(&phi2, &theta0, steps, Some(&live.grad_inputs))?.meta_loss)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let a = live.phi_grads[ti].data()[e];
            let denom = a.abs().max(fd.abs()).max(1.0);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    Ok(worst)
}

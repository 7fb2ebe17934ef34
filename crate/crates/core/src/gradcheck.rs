//! Central finite differences as an independent oracle for the tape.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{build_model, ForwardMode, ModelConfig, ParamKind};
use crate::objectives;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Perturbation used by the checks.
pub const EPS: f64 = 1e-3;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`], so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate.
pub fn finite_difference_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_eps = (eps + eps).as_f64();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe).as_f64();
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        out.push(T::from_f64((up - down) / two_eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±eps probe crossed a non-differentiable point.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences for every input (or a seeded sample of `max_coords` per input).
/// Coordinates whose probes change the graph's kink pattern are skipped.
pub fn check_graph<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: F,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &leaves)?;
        Ok((tape, root, leaves))
    };
    let (tape, root, leaves) = eval(inputs)?;
    let base_pattern = tape.kink_pattern();
    let grads = tape.backward(root)?;
    let mut rng = rng::stream(seed, "gradcheck", &[]);
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => {
                let mut c = index::sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            let mut side = |delta: f64| -> Result<(f64, bool)> {
                probe[k].data_mut()[i] = orig + delta;
                let (t, r, _) = eval(&probe)?;
                Ok((t.value(r).data()[0], t.kink_pattern() == base_pattern))
            };
            let (up, same_up) = side(eps)?;
            let (down, same_down) = side(-eps)?;
            probe[k].data_mut()[i] = orig;
            if !(same_up && same_down) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    Ok(report)
}

fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Reduces a tensor to a scalar through a fixed random projection so the
/// check sees the whole Jacobian, not just its column sums.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = rng::stream(seed, "projection", &[]);
    let w = randn(&mut rng, tape.shape(v), 1.0);
    let w = tape.leaf(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

/// Gradient checks for every differentiable primitive.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = rng::stream(seed, "gradcheck-inputs", &[]);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        out.push(check_graph(name, &inputs, build, EPS, None, seed)?);
        Ok(())
    };

    run(
        "dense",
        vec![randn(&mut rng, &[3, 5], 1.0), randn(&mut rng, &[5, 4], 0.5), randn(&mut rng, &[4], 0.5)],
        &|t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, seed)
        },
    )?;
    for (stride, pad) in [(1, 1), (2, 0)] {
        run(
            &format!("conv2d(stride={stride},pad={pad})"),
            vec![randn(&mut rng, &[2, 2, 5, 5], 1.0), randn(&mut rng, &[3, 2, 3, 3], 0.5)],
            &move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                project(t, y, seed)
            },
        )?;
    }
    run(
        "channel_bias",
        vec![randn(&mut rng, &[2, 3, 2, 2], 1.0), randn(&mut rng, &[3], 1.0)],
        &|t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            project(t, y, seed)
        },
    )?;
    run("relu", vec![randn(&mut rng, &[4, 6], 1.0)], &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })?;
    run("avg_pool2d", vec![randn(&mut rng, &[2, 2, 4, 6], 1.0)], &|t, v| {
        let y = t.avg_pool2d(v[0], 2)?;
        project(t, y, seed)
    })?;
    run("flatten", vec![randn(&mut rng, &[2, 3, 2, 2], 1.0)], &|t, v| {
        let y = t.flatten(v[0])?;
        project(t, y, seed)
    })?;
    run("softmax", vec![randn(&mut rng, &[3, 4], 1.5)], &|t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, seed)
    })?;
    run("log", vec![uniform(&mut rng, &[6], 0.5, 2.0)], &|t, v| {
        let y = t.log(v[0])?;
        project(t, y, seed)
    })?;
    run("add", vec![randn(&mut rng, &[5], 1.0), randn(&mut rng, &[5], 1.0)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("mul", vec![randn(&mut rng, &[5], 1.0), randn(&mut rng, &[5], 1.0)], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("sum", vec![randn(&mut rng, &[2, 3], 1.0)], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![randn(&mut rng, &[2, 3], 1.0)], &|t, v| Ok(t.mean(v[0])))?;
    run("scale", vec![randn(&mut rng, &[4], 1.0)], &|t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, seed)
    })?;
    run(
        "pact(clip)",
        vec![randn(&mut rng, &[3, 8], 1.0), Tensor::scalar(0.8)],
        &|t, v| {
            let y = t.pact(v[0], v[1], None)?;
            project(t, y, seed)
        },
    )?;
    let labels = [1usize, 4, 0, 2];
    run("cross_entropy", vec![randn(&mut rng, &[4, 5], 2.0)], &|t, v| t.cross_entropy(v[0], &labels))?;
    run(
        "kl_divergence",
        vec![randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[3, 4], 1.0)],
        &|t, v| {
            let p = t.softmax(v[0])?;
            let q = t.softmax(v[1])?;
            t.kl_divergence(p, q)
        },
    )?;
    run("pick_sum", vec![randn(&mut rng, &[4, 5], 1.0)], &|t, v| t.pick_sum(v[0], &labels))?;
    Ok(out)
}

/// A small random conv → PACT → pool → dense → softmax → log graph
/// (under 500 parameters) checked on every coordinate.
pub fn composite_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, "gradcheck-composite", &[]);
    let c_out = rng.random_range(2..=4);
    let classes = rng.random_range(2..=4);
    let inputs = vec![
        randn(&mut rng, &[2, 2, 6, 6], 1.0),
        randn(&mut rng, &[c_out, 2, 3, 3], 0.4),
        randn(&mut rng, &[c_out], 0.1),
        Tensor::scalar(rng.random_range(0.5..1.5)),
        randn(&mut rng, &[c_out * 4, classes], 0.4),
        randn(&mut rng, &[classes], 0.1),
    ];
    check_graph(
        &format!("composite(seed={seed})"),
        &inputs,
        |t, v| {
            let h = t.conv2d(v[0], v[1], 1, 0)?;
            let h = t.channel_bias(h, v[2])?;
            let h = t.pact(h, v[3], None)?;
            let h = t.avg_pool2d(h, 1)?;
            let h = t.avg_pool2d(h, 2)?;
            let h = t.flatten(h)?;
            let h = t.dense(h, v[4], v[5])?;
            let h = t.relu(h);
            let p = t.softmax(h)?;
            let l = t.log(p)?;
            let m = t.mean(l);
            let s = t.sum(p);
            let e = t.mul(m, s)?;
            t.add(e, m)
        },
        EPS,
        None,
        seed,
    )
}

/// Gradient check of the full training objective on a randomly initialized
/// SmallCNN (float mode), sampling `coords_per_tensor` coordinates of every
/// parameter tensor, every α and the input batch.
pub fn small_cnn_check(config: &ModelConfig, seed: u64, batch: usize, coords_per_tensor: usize) -> Result<GradCheckReport> {
    let model = build_model(config, seed)?;
    let mut rng = rng::stream(seed, "gradcheck-cnn", &[]);
    let [c, h, w] = config.input_shape;
    let x = randn(&mut rng, &[batch, c, h, w], 1.0);
    let masked = randn(&mut rng, &[batch, c, h, w], 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..config.num_classes)).collect();
    let mut inputs = vec![x];
    for p in &model.params {
        let t: Tensor<f64> = match p.kind {
            ParamKind::Weight => p.tensor.cast(),
            ParamKind::Bias => randn(&mut rng, p.tensor.shape(), 0.1),
        };
        inputs.push(t);
    }
    let n_params = model.params.len();
    for _ in &model.pact_states {
        // small α so that some activations saturate and dα is exercised
        inputs.push(Tensor::scalar(rng.random_range(0.3..1.5)));
    }
    let name = format!("small_cnn(seed={seed}, params={})", model.param_count());
    check_graph(
        &name,
        &inputs,
        |tape, v| {
            let vars = model.bind(tape, v[1..1 + n_params].to_vec(), v[1 + n_params..].to_vec(), ForwardMode::Float)?;
            let logits = model.forward_on(tape, &vars, v[0])?;
            let xm = tape.leaf(masked.clone());
            let logits_m = model.forward_on(tape, &vars, xm)?;
            let loss = objectives::sgt_loss_on_tape(tape, logits, Some(logits_m), &labels, 0.1, &vars.alphas, 0.0002)?;
            Ok(loss.total)
        },
        EPS,
        Some(coords_per_tensor),
        seed,
    )
}

/// Every primitive plus `cnn_instances` random SmallCNN-MNIST models.
pub fn run_suite(seed: u64, cnn_instances: usize) -> Result<Vec<GradCheckReport>> {
    let mut reports = primitive_checks(seed)?;
    let config = ModelConfig::small_cnn_mnist();
    for i in 0..cnn_instances as u64 {
        reports.push(small_cnn_check(&config, seed.wrapping_add(i + 1), 2, 40)?);
    }
    Ok(reports)
}

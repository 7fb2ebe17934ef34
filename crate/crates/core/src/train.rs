//! Saliency-guided PACT training loop, SGD, evaluation and metric export.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{self, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model, ModelConfig, Param};
use crate::objectives::{self, LossBreakdown};
use crate::quant::{self, check_bits};
use crate::rng::{self, streams};
use crate::saliency;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Float network, cross-entropy only.
    BaselineCe,
    /// Quantized network (PACT + weight fake-quant), cross-entropy only.
    PactOnly,
    /// Float network with saliency masking and the KL term.
    SgtFloat,
    /// Quantized network with saliency masking and the KL term.
    SgtPact,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::BaselineCe, TrainMode::PactOnly, TrainMode::SgtFloat, TrainMode::SgtPact];

    pub fn quantized(self) -> bool {
        matches!(self, TrainMode::PactOnly | TrainMode::SgtPact)
    }

    pub fn masking(self) -> bool {
        matches!(self, TrainMode::SgtFloat | TrainMode::SgtPact)
    }

    pub fn forward_mode(self) -> ForwardMode {
        if self.quantized() {
            ForwardMode::Quantized
        } else {
            ForwardMode::Float
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::BaselineCe => "baseline_ce",
            TrainMode::PactOnly => "pact_only",
            TrainMode::SgtFloat => "sgt_float",
            TrainMode::SgtPact => "sgt_pact",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (baseline_ce, pact_only, sgt_float, sgt_pact)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation_bits: u32,
    pub weight_bits: u32,
    pub masking_ratio: f64,
    pub lambda: f64,
    pub lambda_alpha: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    /// Published hyperparameters for each dataset.
    pub fn defaults_for(kind: DatasetKind) -> Self {
        let (lr, batch_size, bits, lambda) = match kind {
            DatasetKind::Mnist => (0.1, 128, 8, 0.1),
            DatasetKind::Cifar10 => (0.01, 64, 4, 0.05),
        };
        TrainConfig {
            lr,
            epochs: 50,
            batch_size,
            activation_bits: bits,
            weight_bits: bits,
            masking_ratio: 0.5,
            lambda,
            lambda_alpha: quant::DEFAULT_LAMBDA_ALPHA as f64,
            seed: 0,
            mode: TrainMode::SgtPact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.masking_ratio) {
            return Err(Error::Config(format!("masking ratio {} outside [0, 1]", self.masking_ratio)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lambda_alpha >= 0.0 && self.lambda_alpha.is_finite()) {
            return Err(Error::Config(format!("lambda_alpha must be non-negative, got {}", self.lambda_alpha)));
        }
        check_bits(self.activation_bits).map_err(|e| Error::Config(e.to_string()))?;
        check_bits(self.weight_bits).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// λ actually applied: zero for modes without masking.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.masking() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// SmallCNN preset for `kind` shaped for `cfg`: PACT and weight quantization
/// for quantized modes, plain ReLU otherwise.
pub fn model_config(kind: DatasetKind, cfg: &TrainConfig) -> ModelConfig {
    let base = match kind {
        DatasetKind::Mnist => ModelConfig::small_cnn_mnist(),
        DatasetKind::Cifar10 => ModelConfig::small_cnn_cifar(),
    };
    let quantized = ModelConfig {
        activation_bits: cfg.activation_bits,
        weight_bits: cfg.weight_bits,
        ..base
    };
    if cfg.mode.quantized() {
        quantized
    } else {
        quantized.without_quantization()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub test_accuracy: f64,
    /// α per PACT layer at the end of the epoch.
    pub alphas: Vec<f32>,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

/// `θ ← θ − lr·g` for every parameter.
pub fn sgd_step(params: &mut [Param], grads: &[Option<&Tensor<f32>>], lr: f32) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let g = g.ok_or_else(|| Error::contract(format!("missing gradient for `{}`", p.name)))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape("sgd_step", p.tensor.shape(), g.shape()));
        }
        for (w, &d) in p.tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

fn collect_grads<'a>(grads: &'a Gradients<f32>, vars: &[Var]) -> Vec<Option<&'a Tensor<f32>>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sample.
pub fn predict(model: &Model, ds: &Dataset, mode: ForwardMode) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let b = ds.gather(chunk)?;
        let logits = model.forward(&b.x, mode)?;
        out.extend((0..chunk.len()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy(model: &Model, ds: &Dataset, mode: ForwardMode) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, ds, mode)?;
    let correct = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy after masking the top `p`% most salient features of every
/// sample (true-label saliency), one entry per percentage in input order.
pub fn masking_sweep(model: &Model, ds: &Dataset, percentages: &[f64], seed: u64, mode: ForwardMode) -> Result<Vec<(f64, f64)>> {
    if let Some(&bad) = percentages.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::Config(format!("masking percentage {bad} outside [0, 100]")));
    }
    let n_features = model.config.features_per_sample();
    let mut correct = vec![0usize; percentages.len()];
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let b = ds.gather(chunk)?;
        let grads = saliency::input_gradients(model, &b.x, &b.y, mode)?;
        let rankings: Vec<Vec<usize>> = (0..chunk.len())
            .map(|i| {
                let mut r = saliency::rank_features(grads.row(i));
                r.reverse();
                r
            })
            .collect();
        for (pi, &p) in percentages.iter().enumerate() {
            let k = saliency::mask_count(p / 100.0, n_features)?;
            let mut x = b.x.clone();
            for (i, row) in x.data_mut().chunks_exact_mut(n_features).enumerate() {
                let mut r = rng::stream(seed, streams::SWEEP, &[p.to_bits(), chunk[i] as u64]);
                saliency::mask_slice(row, &rankings[i], k, &mut r)?;
            }
            let logits = model.forward(&x, mode)?;
            correct[pi] += (0..chunk.len()).filter(|&i| argmax(logits.row(i)) == b.y[i]).count();
        }
    }
    let n = ds.len().max(1) as f64;
    Ok(percentages.iter().zip(correct).map(|(&p, c)| (p, c as f64 / n)).collect())
}

fn check_compatible(model: &Model, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let shape = train.sample_shape();
    if shape != model.config.input_shape {
        return Err(Error::Config(format!(
            "model expects inputs {:?} but dataset `{}` has {:?}",
            model.config.input_shape, train.name, shape
        )));
    }
    if cfg.mode.quantized() && model.config.pact_layer_count() == 0 {
        return Err(Error::Config(format!("mode {} needs PACT layers in the model", cfg.mode)));
    }
    if model.config.pact_layer_count() > 0 && model.config.activation_bits != cfg.activation_bits {
        return Err(Error::Config(format!(
            "model activation bits {} differ from configured {}",
            model.config.activation_bits, cfg.activation_bits
        )));
    }
    if model.config.quantize_weights && model.config.weight_bits != cfg.weight_bits {
        return Err(Error::Config(format!(
            "model weight bits {} differ from configured {}",
            model.config.weight_bits, cfg.weight_bits
        )));
    }
    Ok(())
}

/// One SGD step on a batch; returns the pre-update loss breakdown.
pub fn train_step(model: &mut Model, x: &Tensor<f32>, y: &[usize], cfg: &TrainConfig, rng_path: [u64; 2]) -> Result<LossBreakdown> {
    let mode = cfg.mode.forward_mode();
    let mut tape: Tape<f32> = Tape::new();
    let vars = model.register(&mut tape, mode)?;
    let xv = tape.leaf(x.clone());
    let logits = model.forward_on(&mut tape, &vars, xv)?;
    let masked = if cfg.mode.masking() {
        let target = tape.pick_sum(logits, y)?;
        let grad = tape
            .backward_wrt(target, &[xv])?
            .take(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let n_features = model.config.features_per_sample();
        let k = saliency::mask_count(cfg.masking_ratio, n_features)?;
        let mut xm = x.clone();
        for (i, row) in xm.data_mut().chunks_exact_mut(n_features).enumerate() {
            let ranking = saliency::rank_features(grad.row(i));
            let mut r = rng::stream(cfg.seed, streams::MASK, &[rng_path[0], rng_path[1], i as u64]);
            saliency::mask_slice(row, &ranking, k, &mut r)?;
        }
        let xmv = tape.leaf(xm);
        Some(model.forward_on(&mut tape, &vars, xmv)?)
    } else {
        None
    };
    let loss = objectives::sgt_loss_on_tape(
        &mut tape,
        logits,
        masked,
        y,
        cfg.effective_lambda(),
        &vars.alphas,
        cfg.lambda_alpha,
    )?;
    if !loss.breakdown.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at epoch {} batch {}: ce={} kl={} pact_penalty={} total={}",
            rng_path[0] + 1,
            rng_path[1],
            loss.breakdown.cross_entropy,
            loss.breakdown.kl_term,
            loss.breakdown.pact_penalty,
            loss.breakdown.total
        )));
    }
    let grads = tape.backward(loss.task)?;
    sgd_step(&mut model.params, &collect_grads(&grads, &vars.params), cfg.lr)?;
    for (state, &a) in model.pact_states.iter_mut().zip(&vars.alphas) {
        let dalpha = grads.scalar(a).unwrap_or(0.0);
        *state = quant::update_alpha(state, dalpha, cfg.lr, cfg.lambda_alpha as f32);
    }
    Ok(loss.breakdown)
}

/// Trains for `cfg.epochs`, evaluating on `test` after every epoch.
pub fn train(model: Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<MetricsRecord>)> {
    train_with_progress(model, train, test, cfg, |_| {})
}

/// [`train`] with a callback invoked after each epoch.
pub fn train_with_progress(
    mut model: Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<(Model, Vec<MetricsRecord>)> {
    cfg.validate()?;
    check_compatible(&model, train, cfg)?;
    let mode = cfg.mode.forward_mode();
    model.config.forward_mode = mode;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let shuffle_seed = rng::derive_seed(cfg.seed, streams::EPOCH, &[epoch as u64]);
        let plan = data::batch_indices(train.len(), cfg.batch_size, shuffle_seed, true)?;
        let (mut ce, mut kl, mut pen) = (0.0, 0.0, 0.0);
        for (bi, idx) in plan.iter().enumerate() {
            let b = train.gather(idx)?;
            let l = train_step(&mut model, &b.x, &b.y, cfg, [epoch as u64, bi as u64])?;
            let w = idx.len() as f64;
            ce += l.cross_entropy * w;
            kl += l.kl_term * w;
            pen += l.pact_penalty * w;
        }
        let n = train.len().max(1) as f64;
        let record = MetricsRecord {
            epoch: epoch + 1,
            loss: LossBreakdown::compose(ce / n, kl / n, pen / n, cfg.effective_lambda()),
            test_accuracy: evaluate_accuracy(&model, test, mode)?,
            alphas: model.alphas(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((model, records))
}

/// Header of the metrics CSV for `n_alpha` PACT layers.
pub fn metrics_header(n_alpha: usize) -> String {
    let mut cols: Vec<String> = ["epoch", "ce", "kl", "pact_penalty", "total", "test_acc"].map(String::from).to_vec();
    cols.extend((0..n_alpha).map(|i| format!("alpha_{i}")));
    cols.push("seconds".into());
    cols.join(",")
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    let mut cols = vec![
        r.epoch.to_string(),
        format!("{:.6}", r.loss.cross_entropy),
        format!("{:.6}", r.loss.kl_term),
        format!("{:.6}", r.loss.pact_penalty),
        format!("{:.6}", r.loss.total),
        format!("{:.6}", r.test_accuracy),
    ];
    cols.extend(r.alphas.iter().map(|a| format!("{a:.6}")));
    cols.push(format!("{:.6}", r.seconds));
    cols.join(",")
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let n_alpha = records.first().map_or(0, |r| r.alphas.len());
    let mut s = metrics_header(n_alpha);
    s.push('\n');
    for r in records {
        s.push_str(&metrics_row(r));
        s.push('\n');
    }
    s
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("mask_pct,accuracy\n");
    for (p, a) in rows {
        s.push_str(&format!("{p},{a:.6}\n"));
    }
    s
}

/// gnuplot script plotting accuracy and α trajectories from a metrics CSV.
pub fn metrics_plot_script(csv_name: &str, n_alpha: usize) -> String {
    let mut s = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n\
         set output 'accuracy.png'\nset xlabel 'epoch'\nset ylabel 'test accuracy'\n\
         plot '{csv_name}' using 1:6 with linespoints title 'test accuracy'\n"
    );
    if n_alpha > 0 {
        s.push_str("set output 'alpha.png'\nset ylabel 'alpha'\nplot ");
        let series: Vec<String> = (0..n_alpha)
            .map(|i| format!("'{csv_name}' using 1:{} with linespoints title 'alpha_{i}'", 7 + i))
            .collect();
        s.push_str(&series.join(", \\\n     "));
        s.push('\n');
    }
    s
}

/// gnuplot script for a masking sweep CSV.
pub fn sweep_plot_script(csv_name: &str) -> String {
    format!(
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n\
         set output 'sweep.png'\nset xlabel 'masked salient features (%)'\nset ylabel 'accuracy'\n\
         plot '{csv_name}' using 1:2 with linespoints title 'accuracy'\n"
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    fn param(v: f32) -> Param {
        Param {
            name: "w".into(),
            kind: ParamKind::Weight,
            tensor: Tensor::scalar(v),
        }
    }

    #[test]
    fn sgd_examples() {
        let g = Tensor::scalar(0.5f32);
        let mut p = vec![param(1.0)];
        sgd_step(&mut p, &[Some(&g)], 0.1).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.95);
        let zero = Tensor::scalar(0.0f32);
        sgd_step(&mut p, &[Some(&zero)], 0.1).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.95);
        sgd_step(&mut p, &[Some(&g)], 0.0).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.95);
        assert!(matches!(sgd_step(&mut p, &[None], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[3.0; 10]), 0);
    }

    #[test]
    fn defaults_follow_dataset() {
        let m = TrainConfig::defaults_for(DatasetKind::Mnist);
        assert_eq!((m.lr, m.epochs, m.batch_size, m.activation_bits, m.lambda), (0.1, 50, 128, 8, 0.1));
        let c = TrainConfig::defaults_for(DatasetKind::Cifar10);
        assert_eq!((c.lr, c.epochs, c.batch_size, c.activation_bits, c.lambda), (0.01, 50, 64, 4, 0.05));
        assert_eq!(m.masking_ratio, 0.5);
        assert!((m.lambda_alpha - 0.0002).abs() < 1e-9);
    }

    #[test]
    fn mode_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.to_string().parse::<TrainMode>().unwrap(), m);
        }
        assert!("sgt".parse::<TrainMode>().is_err());
    }

    #[test]
    fn float_modes_have_no_pact_layers() {
        let mut cfg = TrainConfig::defaults_for(DatasetKind::Mnist);
        for mode in TrainMode::ALL {
            cfg.mode = mode;
            let mc = model_config(DatasetKind::Mnist, &cfg);
            assert_eq!(mc.pact_layer_count() > 0, mode.quantized());
            assert_eq!(mc.quantize_weights, mode.quantized());
        }
    }

    #[test]
    fn csv_layout() {
        let r = MetricsRecord {
            epoch: 1,
            loss: LossBreakdown::compose(1.0, 0.5, 0.02, 0.1),
            test_accuracy: 0.5,
            alphas: vec![9.5, 8.25],
            seconds: 1.5,
        };
        let csv = metrics_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,ce,kl,pact_penalty,total,test_acc,alpha_0,alpha_1,seconds");
        assert_eq!(lines.next().unwrap(), "1,1.000000,0.500000,0.020000,1.070000,0.500000,9.500000,8.250000,1.500000");
        assert_eq!(sweep_csv(&[(0.0, 1.0), (25.0, 0.5)]), "mask_pct,accuracy\n0,1.000000\n25,0.500000\n");
    }
}

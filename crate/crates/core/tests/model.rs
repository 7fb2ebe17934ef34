use std::collections::BTreeSet;

use sgtpact::model::ParamKind;
use sgtpact::quant::{quantize_weights, WeightQuantConfig};
use sgtpact::{build_model, Error, ForwardMode, LayerSpec, Model, ModelConfig, Tensor};

fn input(n: usize) -> Tensor<f32> {
    let data = (0..n * 784).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
    Tensor::new(vec![n, 1, 28, 28], data).unwrap()
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let c = ModelConfig::small_cnn_mnist();
    let a = build_model(&c, 42).unwrap();
    let b = build_model(&c, 42).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, build_model(&c, 43).unwrap().params);
    for p in a.params.iter().filter(|p| p.kind == ParamKind::Bias) {
        assert!(p.tensor.data().iter().all(|&v| v == 0.0));
    }
    assert!(a.alphas().iter().all(|&v| v == 10.0));
    let names: BTreeSet<&str> = a.params.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.len(), a.params.len());
}

#[test]
fn he_std_for_fan_in_nine() {
    let c = ModelConfig {
        layers: vec![
            LayerSpec::Conv { out_channels: 1200, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_dim: 10 },
        ],
        input_shape: [1, 3, 3],
        num_classes: 10,
        quantize_weights: false,
        activation_bits: 8,
        weight_bits: 8,
        forward_mode: ForwardMode::Float,
    };
    let m = build_model(&c, 1).unwrap();
    let w = m.params[0].tensor.data();
    assert!(w.len() >= 10_000);
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let target = (2.0f64 / 9.0).sqrt();
    assert!((var.sqrt() - target).abs() / target < 0.05, "std {}", var.sqrt());
}

#[test]
fn inconsistent_chain_names_layer() {
    let mut c = ModelConfig::small_cnn_mnist();
    c.layers.insert(2, LayerSpec::Dense { out_dim: 4 });
    match build_model(&c, 0).unwrap_err() {
        Error::Config(msg) => assert!(msg.contains("layer 2"), "{msg}"),
        e => panic!("{e}"),
    }
    let mut c = ModelConfig::small_cnn_mnist();
    c.num_classes = 7;
    assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
}

#[test]
fn input_shape_mismatch_is_dimension_error() {
    let m = build_model(&ModelConfig::small_cnn_mnist(), 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 28, 28]);
    assert!(matches!(m.forward(&x, ForwardMode::Float), Err(Error::Shape { .. })));
}

#[test]
fn zero_input_gives_zero_logits() {
    let c = ModelConfig::small_cnn_mnist().without_quantization();
    let m = build_model(&c, 3).unwrap();
    let logits = m.forward(&Tensor::<f32>::zeros(&[2, 1, 28, 28]), ForwardMode::Float).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn quantized_forward_on_grid_equals_float() {
    let c = ModelConfig {
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { out_dim: 2 },
            LayerSpec::Pact,
            LayerSpec::Dense { out_dim: 2 },
        ],
        input_shape: [1, 1, 2],
        num_classes: 2,
        quantize_weights: true,
        activation_bits: 2,
        weight_bits: 2,
        forward_mode: ForwardMode::Quantized,
    };
    let eye = Tensor::<f32>::from_f64s(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let q = quantize_weights(&eye, &WeightQuantConfig::from_tensor(&eye, 2).unwrap()).unwrap();
    assert_eq!(quantize_weights(&q, &WeightQuantConfig::from_tensor(&q, 2).unwrap()).unwrap(), q);
    let top = q.min_max().1;
    let zero = Tensor::<f32>::zeros(&[2]);
    let params = vec![
        ("layers.1.weight".to_string(), q.clone()),
        ("layers.1.bias".to_string(), zero.clone()),
        ("layers.3.weight".to_string(), q),
        ("layers.3.bias".to_string(), zero),
    ];
    // α equal to the largest weight level puts 1·w and saturated inputs on the activation grid
    let m = Model::from_parts(c, params, vec![top]).unwrap();
    let x = Tensor::<f32>::from_f64s(&[3, 1, 1, 2], &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
    let a = m.forward(&x, ForwardMode::Float).unwrap();
    let b = m.forward(&x, ForwardMode::Quantized).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-6, "{u} vs {v}");
    }
}

#[test]
fn quantization_gap_shrinks_with_bits() {
    let x = input(4);
    let gap = |bits: u32| {
        let c = ModelConfig {
            activation_bits: bits,
            weight_bits: bits,
            ..ModelConfig::small_cnn_mnist()
        };
        let mut m = build_model(&c, 9).unwrap();
        for s in &mut m.pact_states {
            s.alpha = 2.0;
        }
        let f = m.forward(&x, ForwardMode::Float).unwrap();
        let q = m.forward(&x, ForwardMode::Quantized).unwrap();
        f.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
    };
    let (g4, g8) = (gap(4), gap(8));
    assert!(g8 < g4, "k=8 gap {g8} vs k=4 gap {g4}");
    assert!(g8 > 0.0);
}

#[test]
fn pact_outputs_take_few_levels() {
    for bits in [2u32, 4] {
        let c = ModelConfig {
            activation_bits: bits,
            weight_bits: 8,
            ..ModelConfig::small_cnn_mnist()
        };
        let mut m = build_model(&c, 2).unwrap();
        m.pact_states[0].alpha = 0.7;
        let outs = m.pact_outputs(&input(3), ForwardMode::Quantized).unwrap();
        assert_eq!(outs.len(), 2);
        for o in outs {
            let distinct: BTreeSet<u32> = o.data().iter().map(|v| v.to_bits()).collect();
            assert!(distinct.len() <= 1 << bits, "{} levels", distinct.len());
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let m = build_model(&ModelConfig::small_cnn_cifar(), 5).unwrap();
    let x = Tensor::<f32>::full(&[2, 3, 32, 32], 0.25);
    let a = m.forward(&x, ForwardMode::Quantized).unwrap();
    let b = m.forward(&x, ForwardMode::Quantized).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[2, 10]);
}

use rand::Rng;

use super::layers::{conv, mobilevit_block, mv2_block, positional_encoding, transformer_block};
use super::*;
use crate::contrastive::{interleaved_pairing, nt_xent_loss, EmbeddingBatch};
use crate::nn::gradcheck::check_gradients;
use crate::nn::{Graph, Tensor, Var};
use crate::rng::{seeded, Rng as Chacha};

fn random(shape: &[usize], rng: &mut Chacha) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A model with every parameter (biases and encodings included) randomized.
fn randomized(config: ModelConfig, seed: u64) -> Mvitime<f64> {
    let mut m = Mvitime::<f64>::init(config, seed).unwrap();
    let mut rng = seeded(seed ^ 0xabc);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn names(m: &Mvitime<f64>, prefix: &str) -> (Vec<String>, Vec<Tensor<f64>>) {
    m.specs()
        .iter()
        .zip(m.params())
        .filter(|(s, _)| s.name.starts_with(prefix))
        .map(|(s, p)| (s.name.clone(), p.clone()))
        .unzip()
}

fn micro() -> ModelConfig {
    ModelConfig {
        input_length: 12,
        stem_channels: 4,
        stem_stride: 2,
        kernel_size: 3,
        blocks: vec![
            BlockConfig::Mv2 {
                channels: 4,
                stride: 1,
                expansion: 2,
            },
            BlockConfig::Mvit {
                channels: 6,
                transformer_dim: 4,
                depth: 1,
                heads: 2,
                patch_size: 2,
                ffn_multiplier: 2,
            },
            BlockConfig::Mv2 {
                channels: 6,
                stride: 2,
                expansion: 2,
            },
        ],
        projection_dim: 4,
        n_classes: 5,
        activation: Activation::Silu,
    }
}

#[test]
fn shapes_match_prediction() {
    for l in [32, 3000] {
        for c in [ModelConfig::tiny(l), ModelConfig::xs(l)] {
            let m = Mvitime::<f32>::init(c.clone(), 0).unwrap();
            assert_eq!(m.traced_shapes(1).unwrap(), c.shapes(), "L={l}");
            assert_eq!(m.parameter_count(), parameter_count(&c).unwrap());
        }
    }
}

#[test]
fn zero_mv2_is_skip() {
    let c = micro();
    let mut m = Mvitime::<f64>::init(c, 1).unwrap();
    for (s, p) in m.specs().to_vec().iter().zip(m.params_mut()) {
        if s.name.starts_with("blocks.0.") {
            *p = Tensor::zeros(p.shape().to_vec());
        }
    }
    let mut g = Graph::new();
    let b = m.bind_frozen(&mut g);
    let x = g.constant(random(&[2, 4, 6], &mut seeded(1)));
    let y = mv2_block(&mut g, &b, "blocks.0", x, 1, Activation::Silu).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn single_token_attention_is_one() {
    let mut rng = seeded(2);
    let d = 4;
    let mut g = Graph::new();
    let mut names_ = Vec::new();
    let mut vars = Vec::new();
    for (n, shape) in [
        ("t.norm1.gamma", vec![d]),
        ("t.norm1.beta", vec![d]),
        ("t.norm2.gamma", vec![d]),
        ("t.norm2.beta", vec![d]),
    ] {
        names_.push(n.to_string());
        vars.push(g.constant(random(&shape, &mut rng)));
    }
    for proj in ["query", "key", "value", "out", "ffn1", "ffn2"] {
        names_.push(format!("t.{proj}.weight"));
        vars.push(g.constant(random(&[d, d], &mut rng)));
        names_.push(format!("t.{proj}.bias"));
        vars.push(g.constant(random(&[d], &mut rng)));
    }
    let b = Bound::from_vars(names_, &vars);
    let x = g.constant(random(&[3, 1, d], &mut rng));
    let a = transformer_block(&mut g, &b, "t", x, 2, Activation::Silu).unwrap();
    assert!(g.value(a.attention).data().iter().all(|&w| w == 1.0));

    let x = g.constant(random(&[3, 5, d], &mut rng));
    let a = transformer_block(&mut g, &b, "t", x, 2, Activation::Silu).unwrap();
    for row in g.value(a.attention).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_encoding_is_identity() {
    let mut g = Graph::new();
    let pos = g.param(Tensor::zeros([3, 4]));
    let b = Bound::from_vars(["pos".to_string()], &[pos]);
    let t = g.constant(random(&[2, 3, 4], &mut seeded(4)));
    let y = positional_encoding(&mut g, &b, "pos", t).unwrap();
    assert_eq!(g.value(y), g.value(t));
}

#[test]
fn mobilevit_linearity_probe() {
    let mut c = micro();
    c.activation = Activation::Identity;
    let mut m = randomized(c, 3);
    for (s, p) in m.specs().to_vec().iter().zip(m.params_mut()) {
        let transformer = s.name.contains(".layers.") || s.name.ends_with(".pos") || s.name.contains(".norm.");
        if transformer || s.name.ends_with(".bias") {
            *p = Tensor::zeros(p.shape().to_vec());
        }
    }
    let x = random(&[1, 4, 6], &mut seeded(5));
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g);
        let v = g.constant(x.clone());
        let y = mobilevit_block(&mut g, &b, "blocks.1", v, 1, 2, 2, Activation::Identity).unwrap();
        g.value(y).clone()
    };
    let y = run(&x);
    assert_eq!(y.shape(), &[1, 6, 6]);
    assert_eq!(run(&x), y);
    for a in [2.0, -0.5, 3.25] {
        let ya = run(&x.map(|v| v * a));
        assert!(ya.max_abs_diff(&y.map(|v| v * a)) < 1e-12);
    }
}

#[test]
fn batch_independence_and_heads() {
    let m = randomized(micro(), 6);
    let mut rng = seeded(7);
    let x = random(&[2, 1, 12], &mut rng);
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g);
        let v = g.constant(x);
        let f = m.features(&mut g, &b, v).unwrap();
        let z = m.project(&mut g, &b, f).unwrap();
        let l = m.classify(&mut g, &b, f).unwrap();
        (g.value(f).clone(), g.value(z).clone(), g.value(l).clone())
    };
    let (f, z, l) = run(x.clone());
    assert_eq!(l.shape(), &[2, 5]);
    for row in z.data().chunks(4) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
    for i in 0..2 {
        let xi = Tensor::new([1, 1, 12], x.data()[i * 12..(i + 1) * 12].to_vec()).unwrap();
        let (fi, _, _) = run(xi);
        for (a, b) in fi.data().iter().zip(&f.data()[i * 6..(i + 1) * 6]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn assert_grad(report: crate::nn::gradcheck::GradCheckReport, what: &str) {
    assert!(report.max_rel_error < 1e-4, "{what}: {report:?}");
}

#[test]
fn conv_and_mv2_gradients() {
    let m = randomized(micro(), 8);
    let mut rng = seeded(9);
    let (n, p) = names(&m, "blocks.0.");
    for trial in 0..4 {
        let mut inputs = vec![random(&[2, 4, 6], &mut rng)];
        inputs.extend(p.iter().cloned());
        let w = random(&[2, 4, 6], &mut rng);
        let r = check_gradients(&inputs, 1e-5, Some(12), &mut rng, |g, v: &[Var]| -> Result<Var, ModelError> {
            let b = Bound::from_vars(n.clone(), &v[1..]);
            let y = mv2_block(g, &b, "blocks.0", v[0], 1 + trial % 2, Activation::Silu)?;
            let y = if g.shape(y) == w.shape() { y } else { g.pad_last(y, 6)? };
            Ok(g.weighted_sum(y, &w)?)
        })
        .unwrap();
        assert_grad(r, "mv2");
        let r = check_gradients(&inputs[..3], 1e-5, None, &mut rng, |g, v: &[Var]| -> Result<Var, ModelError> {
            let b = Bound::from_vars(n[..2].to_vec(), &v[1..]);
            let y = conv(g, &b, "blocks.0.expand", v[0], 1, 1)?;
            let y = g.silu(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_grad(r, "conv");
    }
}

#[test]
fn mobilevit_and_full_model_gradients() {
    let m = randomized(micro(), 10);
    let mut rng = seeded(11);
    let (n, p) = names(&m, "blocks.1.");
    let mut inputs = vec![random(&[2, 4, 6], &mut rng)];
    inputs.extend(p);
    let w = random(&[2, 6, 6], &mut rng);
    let r = check_gradients(&inputs, 1e-5, Some(8), &mut rng, |g, v: &[Var]| -> Result<Var, ModelError> {
        let b = Bound::from_vars(n.clone(), &v[1..]);
        let y = mobilevit_block(g, &b, "blocks.1", v[0], 1, 2, 2, Activation::Silu)?;
        Ok(g.weighted_sum(y, &w)?)
    })
    .unwrap();
    assert_grad(r, "mobilevit");

    let all: Vec<String> = m.specs().iter().map(|s| s.name.clone()).collect();
    let mut inputs = vec![random(&[4, 1, 12], &mut rng)];
    inputs.extend(m.params().iter().cloned());
    let r = check_gradients(&inputs, 1e-5, Some(6), &mut rng, |g, v: &[Var]| -> Result<Var, ModelError> {
        let b = Bound::from_vars(all.clone(), &v[1..]);
        let f = m.features(g, &b, v[0])?;
        let z = m.project(g, &b, f)?;
        let batch = EmbeddingBatch::new(4, 4, g.value(z).data().to_vec(), interleaved_pairing(4)).unwrap();
        let out = nt_xent_loss(&batch, 0.5).unwrap();
        Ok(g.loss(z, out.loss, Tensor::new([4, 4], out.grad)?)?)
    })
    .unwrap();
    assert_grad(r, "forward+project+loss");
}

use partrans::blocks::{BlockVariant, NormVariant};
use partrans::data::{PatternedPatch, TextCorpus};
use partrans::integrators::Scheme;
use partrans::metrics::Quality;
use partrans::network::{Network, NetworkConfig, Sample, Task};
use partrans::train::{evaluate, EvalSet};
use partrans::{Exec, Rng, Tensor};
use rand::SeedableRng;

fn small(task: Task, k: usize) -> NetworkConfig {
    let mut cfg = match task {
        Task::Lm { max_len, .. } => NetworkConfig::desk_lm(max_len),
        Task::Classify { .. } => NetworkConfig::desk_classify(),
    };
    cfg.task = task;
    cfg.depth = 4;
    cfg.independent_layers = k;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.mlp_dim = 16;
    cfg
}

#[test]
fn deit_ti_forwards_desk_images() {
    let net = Network::build(NetworkConfig::deit_ti(100, 32, 4), 0).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let images = Tensor::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let logits = net.forward_classify(&images).unwrap();
    assert_eq!(logits.shape(), &[2, 100]);
    assert!(logits.is_finite());
    assert_ne!(logits.row(0), logits.row(1));
}

#[test]
fn wrong_image_shape_is_input_error() {
    let net = Network::build(NetworkConfig::desk_classify(), 0).unwrap();
    assert!(net.forward_classify(&Tensor::zeros([1, 3, 16, 16])).is_err());
}

#[test]
fn every_parameter_set_receives_gradient() {
    let task = Task::Classify { channels: 1, image_size: 8, patch_size: 4, classes: 5 };
    for (variant, scheme) in [
        (BlockVariant::Parallel, Scheme::Euler),
        (BlockVariant::Sequential, Scheme::Euler),
        (BlockVariant::Parallel, Scheme::Rk4),
    ] {
        for k in [1, 2, 4] {
            let cfg = NetworkConfig { variant, scheme, ..small(task.clone(), k) };
            let net = Network::build(cfg, 9).unwrap();
            let mut rng = Rng::seed_from_u64(k as u64);
            let pixels = Tensor::uniform([64], 0.0, 1.0, &mut rng);
            let g = net.sample_grad(Sample::Image { pixels: pixels.data(), label: 2 }, false, None).unwrap();
            assert_eq!(g.grads.blocks.len(), k);
            for (i, set) in g.grads.blocks.iter().enumerate() {
                let mut named = Vec::new();
                set.named("", &mut named);
                assert!(named.iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)), "set {i} of {k}");
            }
        }
    }
}

#[test]
fn single_token_lm() {
    let net = Network::build(small(Task::Lm { vocab: 256, max_len: 8 }, 2), 0).unwrap();
    let logits = net.forward_lm(&[vec![65]]).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 256]);
    assert!(logits.is_finite());
    assert!(net.forward_lm(&[vec![256]]).is_err());
}

#[test]
fn zero_head_lm_has_vocabulary_perplexity() {
    let mut net = Network::build(small(Task::Lm { vocab: 256, max_len: 16 }, 1), 0).unwrap();
    net.params.head_w.data_mut().fill(0.0);
    net.params.head_b.data_mut().fill(0.0);
    let text = TextCorpus::repeated("hello, world", 200).unwrap();
    let (loss, q) = evaluate(&net, EvalSet::Text(&text, 16), 5, Exec::default()).unwrap();
    assert!((loss - 256f64.ln()).abs() < 1e-12);
    let Quality::Perplexity(ppl) = q else { panic!("{q:?}") };
    assert!((ppl - 256.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn constant_logits_on_balanced_classes() {
    let synth = PatternedPatch { channels: 1, image_size: 8, patch_size: 4, classes: 4 };
    let mut net =
        Network::build(small(Task::Classify { channels: 1, image_size: 8, patch_size: 4, classes: 4 }, 1), 0).unwrap();
    net.params.head_w.data_mut().fill(0.0);
    net.params.head_b.data_mut().copy_from_slice(&[0.0, 0.0, 3.0, 0.0]);
    let ds = synth.generate(400, 2).unwrap();
    let per_class = (0..4).map(|c| (0..ds.len()).filter(|&i| ds.label(i) == c).count()).collect::<Vec<_>>();
    let (_, q) = evaluate(&net, EvalSet::Images(&ds), 32, Exec::default()).unwrap();
    assert_eq!(q, Quality::Top1(per_class[2] as f64 / 400.0));
}

#[test]
fn norm_variants_and_schemes_build() {
    let task = Task::Lm { vocab: 32, max_len: 6 };
    for norm in [NormVariant::None, NormVariant::A, NormVariant::B, NormVariant::C] {
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let cfg = NetworkConfig { norm, scheme, ..small(task.clone(), 2) };
            let net = Network::build(cfg, 1).unwrap();
            assert!(net.forward_lm(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap().is_finite());
        }
    }
}

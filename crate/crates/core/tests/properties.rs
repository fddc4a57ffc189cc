use partrans::blocks::{
    parallel_block, sequential_block, BlockConfig, BlockDims, BlockParams, BlockVariant, NormVariant,
};
use partrans::data::ImageDataset;
use partrans::metrics::{MetricRecord, Quality, Split};
use partrans::network::{share_map, Network, NetworkConfig, Task};
use partrans::{checkpoint, Rng, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-20.0f64..20.0, r * c).prop_map(move |d| Tensor::new([r, c], d).unwrap())
    })
}

fn norm_variant() -> impl Strategy<Value = NormVariant> {
    prop_oneof![Just(NormVariant::None), Just(NormVariant::A), Just(NormVariant::B), Just(NormVariant::C)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 6), causal in any::<bool>()) {
        prop_assume!(!causal || x.shape()[0] == x.shape()[1]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax_rows(v, causal).unwrap();
        let y = tape.value(y);
        let (rows, cols) = y.dims2().unwrap();
        for r in 0..rows {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..cols {
                prop_assert!(y.get2(r, c) >= 0.0);
                if causal && c > r {
                    prop_assert_eq!(y.get2(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(5, 8)) {
        let d = x.shape()[1];
        prop_assume!(d > 1);
        let spread = (0..x.shape()[0]).all(|r| {
            let row = x.row(r);
            row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min) > 1.0
        });
        prop_assume!(spread);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones([d]));
        let b = tape.constant(Tensor::zeros([d]));
        let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
        let y = tape.value(y);
        for r in 0..y.shape()[0] {
            let mean = y.row(r).iter().sum::<f64>() / d as f64;
            let var = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn share_map_groups_consecutive_layers(k in 1usize..=12, groups in 1usize..=4) {
        let depth = k * groups;
        let map = share_map(depth, k).unwrap();
        prop_assert_eq!(map.len(), depth);
        prop_assert!(map.windows(2).all(|w| w[0] <= w[1]));
        for set in 0..k {
            prop_assert_eq!(map.iter().filter(|&&s| s == set).count(), groups);
        }
        prop_assert!(share_map(depth + 1, k).is_err() || (depth + 1) % k == 0);
    }

    #[test]
    fn zero_branches_give_identity(
        norm in norm_variant(),
        sequential in any::<bool>(),
        len in 1usize..4,
        seed in any::<u64>(),
    ) {
        let variant = if sequential { BlockVariant::Sequential } else { BlockVariant::Parallel };
        prop_assume!(norm != NormVariant::C);
        let mut rng = Rng::seed_from_u64(seed);
        let dims = BlockDims { dim: 4, heads: 2, mlp_dim: 6, norms: norm.norm_count(variant) };
        let mut p = BlockParams::random(dims, 0.5, &mut rng).unwrap();
        p.zero_branch_outputs();
        let x0 = Tensor::uniform([len, 4], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let bound = p.bind_const(&mut tape);
        let x = tape.constant(x0.clone());
        let cfg = BlockConfig::new(variant, norm);
        let y = if sequential {
            sequential_block(&mut tape, x, &bound, &cfg, None)
        } else {
            parallel_block(&mut tape, x, &bound, &cfg, None)
        }
        .unwrap();
        prop_assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn metric_lines_round_trip(
        step in 0usize..100_000,
        val in any::<bool>(),
        loss in 0.0f64..50.0,
        q in 0.0f64..1.0,
        ppl in any::<bool>(),
        seconds in 0.0f64..1e4,
    ) {
        let rec = MetricRecord {
            step,
            split: if val { Split::Val } else { Split::Train },
            loss,
            quality: if ppl { Quality::Perplexity(1.0 + 100.0 * q) } else { Quality::Top1(q) },
            seconds,
        };
        let parsed: MetricRecord = rec.to_string().parse().unwrap();
        prop_assert_eq!(parsed.timeless(), rec.timeless());
        prop_assert!((parsed.seconds - rec.seconds).abs() <= 5e-4);
    }

    #[test]
    fn image_files_round_trip(
        count in 0usize..5,
        channels in 1usize..3,
        side in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng as _;
        let mut rng = Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..count * channels * side * side).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..count).map(|_| rng.random()).collect();
        let ds = ImageDataset::new(channels, side, side, pixels, labels).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        prop_assert_eq!(ImageDataset::read_from(&mut buf.as_slice()).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exact(
        lm in any::<bool>(),
        k in 1usize..=2,
        norm in norm_variant(),
        seed in any::<u64>(),
    ) {
        let mut cfg = if lm { NetworkConfig::desk_lm(8) } else { NetworkConfig::desk_classify() };
        if !lm {
            cfg.task = Task::Classify { channels: 1, image_size: 4, patch_size: 2, classes: 3 };
        }
        cfg.depth = 2;
        cfg.independent_layers = k;
        cfg.dim = 4;
        cfg.heads = 2;
        cfg.mlp_dim = 4;
        cfg.norm = norm;
        let mut net = Network::build(cfg, seed).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        for (_, t) in net.params.named_mut() {
            *t = Tensor::uniform(t.shape().to_vec(), -1e3, 1e3, &mut rng);
        }
        let mut buf = Vec::new();
        checkpoint::write_to(&net, &mut buf).unwrap();
        let back = checkpoint::read_from(&mut buf.as_slice()).unwrap();
        for ((na, a), (nb, b)) in net.params.named().iter().zip(back.params.named()) {
            prop_assert_eq!(na, &nb);
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
        prop_assert_eq!(back.config(), net.config());
    }
}

use moldiff::dataset::{batch_indices, holdout_split, SplitSpec};
use moldiff::decoder::{log_likelihood, Decoder, DecoderConfig};
use moldiff::diffusion::{forward_step, marginal_sample, reverse_mean_from_eps};
use moldiff::molgraph::{GraphBatch, MolecularGraph};
use moldiff::params::ParamStore;
use moldiff::{Execution, NoiseSchedule, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::from_vec(rows, cols, v))
}

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    prop::collection::vec(1e-4f64..0.5, 2..12).prop_map(|b| NoiseSchedule::from_betas(b).unwrap())
}

/// Random simple graph: a spanning tree plus optional extra edges.
fn graph() -> impl Strategy<Value = MolecularGraph> {
    (1usize..7)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(0usize..3, n),
                prop::collection::vec((any::<prop::sample::Index>(), 1usize..4), n),
                prop::collection::vec((0usize..7, 0usize..7), 0..3),
            )
        })
        .prop_map(|(n, types, parents, extra)| {
            let mut bonds = vec![0; n * n];
            for (i, (p, kind)) in parents.iter().enumerate().skip(1) {
                let j = p.index(i);
                bonds[i * n + j] = *kind;
                bonds[j * n + i] = *kind;
            }
            for (a, b) in extra {
                let (a, b) = (a % n, b % n);
                if a != b && bonds[a * n + b] == 0 {
                    bonds[a * n + b] = 1;
                    bonds[b * n + a] = 1;
                }
            }
            MolecularGraph::new(types, bonds).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_step_is_affine_in_its_inputs(s in schedule(), z in tensor(2, 3), n1 in tensor(2, 3), n2 in tensor(2, 3)) {
        let t = 2;
        let a = forward_step(&z, t, &s, &n1).unwrap();
        let b = forward_step(&z, t, &s, &n2).unwrap();
        let mid = forward_step(&z, t, &s, &n1.add(&n2).scale(0.5)).unwrap();
        for k in 0..a.len() {
            prop_assert!((0.5 * (a.data()[k] + b.data()[k]) - mid.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_draw_inverts_through_the_noise(s in schedule(), z0 in tensor(3, 2), eps in tensor(3, 2)) {
        for t in 1..=s.steps() {
            let zt = marginal_sample(&z0, t, &s, &eps).unwrap();
            let ab = s.alpha_bar(t);
            for k in 0..zt.len() {
                let back = (zt.data()[k] - (1.0 - ab).sqrt() * eps.data()[k]) / ab.sqrt();
                prop_assert!((back - z0.data()[k]).abs() < 1e-9 * (1.0 + z0.data()[k].abs()) / ab.sqrt());
            }
        }
    }

    #[test]
    fn reverse_mean_is_affine(s in schedule(), z in tensor(1, 4), e1 in tensor(1, 4), e2 in tensor(1, 4)) {
        let t = s.steps();
        let a = reverse_mean_from_eps(&z, t, &s, &e1).unwrap();
        let b = reverse_mean_from_eps(&z, t, &s, &e2).unwrap();
        let mid = reverse_mean_from_eps(&z, t, &s, &e1.add(&e2).scale(0.5)).unwrap();
        for k in 0..a.len() {
            prop_assert!((0.5 * (a.data()[k] + b.data()[k]) - mid.data()[k]).abs() < 1e-10 * (1.0 + a.data()[k].abs()));
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, test) = holdout_split(&items, &SplitSpec { train_fraction: frac, seed }).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        prop_assert_eq!(train.len(), ((n as f64 * frac).ceil() as usize).clamp(1, n - 1));
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }

    #[test]
    fn batches_partition_each_epoch(n in 1usize..200, b in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_indices(n, b, seed, epoch);
        prop_assert!(batches.iter().all(|x| !x.is_empty() && x.len() <= b));
        let mut flat = batches.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn decoder_rows_are_distributions(seed in any::<u64>(), counts in prop::collection::vec(1usize..6, 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { n_layers: 1, n_heads: 2, d_model: 8, ff_width: 8, dropout: 0.0 };
        let dec = Decoder::new(&mut store, &cfg, 3, 4, 3, 5, &mut rng);
        let z = moldiff::diffusion::standard_normal(counts.len(), 3, &mut rng);
        let logits = dec.decode_logits(&store, &z, &counts, Execution::Sequential).unwrap();
        for (b, &n) in counts.iter().enumerate() {
            prop_assert!((n..5).all(|i| logits.node_row(b, i).iter().all(|&v| v == 0.0)));
            // Every one-atom graph, scored from the same latent: mass sums to one.
            let graphs: Vec<MolecularGraph> = (0..4).map(|k| MolecularGraph::new(vec![k], vec![0]).unwrap()).collect();
            let zb = Tensor::from_vec(4, 3, z.row(b).repeat(4));
            let single = dec.decode_logits(&store, &zb, &[1; 4], Execution::Sequential).unwrap();
            let batch = GraphBatch::new(&graphs, 5, 4, 3).unwrap();
            let total: f64 = log_likelihood(&single, &batch).unwrap().iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn writer_output_reparses_to_the_same_graph(g in graph()) {
        let codec = moldiff::smiles::SmilesCodec::default();
        let text = codec.write(&g).unwrap();
        let back = codec.parse(&text).unwrap();
        prop_assert!(g.is_isomorphic(&back), "{}", text);
    }
}

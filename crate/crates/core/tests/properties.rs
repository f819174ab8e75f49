mod common;

use std::collections::HashMap;

use cogntke::config::Ablation;
use cogntke::digraph::{DigraphConfig, QueryContext, TcrDigraph};
use cogntke::evaluate::{filtered_rank, raw_rank, MetricsReport};
use cogntke::explain::{extract, verify_path};
use cogntke::nn::log_sum_exp_with_zeros;
use cogntke::reasoner::Encoder;
use cogntke::scorer;
use cogntke::store::{Quadruple, Split};
use cogntke::train::time_table_for;
use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn graph_case() -> impl Strategy<Value = (u64, usize, u32, Option<usize>, bool, u64)> {
    (any::<u64>(), 1usize..=4, 1u32..=8, prop::option::of(1usize..=6), any::<bool>(), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn digraph_matches_layered_expansion((seed, layers, window, cap, global, qseed) in graph_case()) {
        let ds = random_tkg(&mut ChaCha8Rng::seed_from_u64(seed), 25, 4, 15);
        let e = (qseed % ds.num_entities() as u64) as u32;
        let t = 1 + (qseed / 7 % (ds.num_snapshots() as u64 + 1)) as u32;
        let cfg = DigraphConfig { layers, window, cap, global_first_layer: global };
        let q = QueryContext::new(e, 0, t).unwrap();
        let g = TcrDigraph::build(&ds, &q, &cfg).unwrap();
        prop_assert!(digraph_matches_oracle(&g, &oracle_layers(&ds, e, t, &cfg)));
        for (l, edges) in g.layers.iter().enumerate() {
            let (lo, hi) = cfg.window_for(l + 1, t);
            for edge in edges {
                prop_assert!(edge.time < t && edge.time >= lo && edge.time <= hi);
            }
            // identity carries make each entity set a superset of the previous one
            for prev in &g.entity_sets[l] {
                prop_assert!(g.entity_sets[l + 1].binary_search(prev).is_ok());
            }
        }
        for path in g.enumerate_paths_limited(g.final_entities()[0], 50) {
            prop_assert!(verify_path(&ds, &cfg, t, &path));
        }
    }

    #[test]
    fn facts_from_matches_scan(seed in any::<u64>(), picks in prop::collection::vec(0u32..25, 0..6), lo in 0u32..15, span in 0u32..15) {
        let ds = random_tkg(&mut ChaCha8Rng::seed_from_u64(seed), 25, 4, 15);
        prop_assert_eq!(ds.index().num_edges(), 2 * ds.all_facts().len());
        let mut ents: Vec<u32> = picks.into_iter().filter(|&e| (e as usize) < ds.num_entities()).collect();
        ents.sort_unstable();
        ents.dedup();
        let hi = lo + span;
        let mut got = ds.facts_from(&ents, lo, hi);
        let nr = ds.num_base_relations() as u32;
        let mut want: Vec<Quadruple> = ds
            .all_facts()
            .iter()
            .flat_map(|q| [*q, Quadruple::new(q.object, q.relation + nr, q.subject, q.time)])
            .filter(|q| ents.contains(&q.subject) && q.time >= lo && q.time <= hi)
            .collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn filtering_never_hurts(scores in prop::collection::vec(-3i32..=3, 1..40), gold_seed in any::<usize>(), mask in any::<u64>()) {
        let s = Array1::from(scores.iter().map(|&x| x as f64).collect::<Vec<_>>());
        let gold = gold_seed % scores.len();
        let competing: Vec<u32> = (0..scores.len())
            .filter(|&i| i != gold && mask >> (i % 64) & 1 == 1)
            .map(|i| i as u32)
            .collect();
        let f = filtered_rank(s.view(), gold as u32, &competing);
        prop_assert!(f >= 1 && f <= raw_rank(s.view(), gold as u32) && f <= scores.len());
        let comp_usize: Vec<usize> = competing.iter().map(|&c| c as usize).collect();
        prop_assert_eq!(f, oracle_rank(s.as_slice().unwrap(), gold, &comp_usize));
    }

    #[test]
    fn loss_matches_softmax(scores in prop::collection::vec(-20.0f64..20.0, 1..200), gold_seed in any::<usize>(), zeros in 0usize..50) {
        let gold = gold_seed % scores.len();
        let got = scorer::loss(Array1::from(scores.clone()).view(), gold as u32).unwrap();
        let want = oracle_loss(&scores, gold);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        // appending zero scores equals the sparse log-sum-exp with absentees
        let mut padded = scores.clone();
        padded.extend(std::iter::repeat_n(0.0, zeros));
        let dense = scorer::loss(Array1::from(padded).view(), gold as u32).unwrap();
        let sparse = log_sum_exp_with_zeros(Array1::from(scores.clone()).view(), zeros) - scores[gold];
        prop_assert!((dense - sparse).abs() <= 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn metrics_are_monotone(ranks in prop::collection::vec(1usize..100, 0..50)) {
        let r = MetricsReport::from_ranks(Split::Test, &ranks, 0);
        prop_assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits10);
        prop_assert!((0.0..=100.0).contains(&r.mrr));
    }

    #[test]
    fn pruning_is_monotone((seed, layers, window, _cap, _global, qseed) in graph_case(), ths in prop::collection::vec(0.0f64..1.2, 2..6)) {
        let ds = random_tkg(&mut ChaCha8Rng::seed_from_u64(seed), 20, 3, 12);
        let params = toy_params(&ds, layers, seed);
        let time = time_table_for(&ds, params.dims.time_dim);
        let enc = Encoder::new(&params, &time, Ablation::Full);
        let e = (qseed % ds.num_entities() as u64) as u32;
        let t = 1 + (qseed / 7 % ds.num_snapshots() as u64) as u32;
        let q = QueryContext::new(e, 1, t).unwrap();
        let cfg = DigraphConfig { layers, window, cap: Some(20), global_first_layer: true };
        let g = TcrDigraph::build(&ds, &q, &cfg).unwrap();
        let att = enc.encode(&g, &q).unwrap().attention;
        let target = *g.final_entities().last().unwrap();
        let mut ths = ths;
        ths.sort_by(f64::total_cmp);
        let mut prev: Option<(usize, usize)> = None;
        for th in ths {
            let x = extract(&g, &q, &att, th, target).unwrap();
            prop_assert!(x.edges.iter().all(|w| w.weight >= th));
            if let Some((pe, pp)) = prev {
                prop_assert!(x.edges.len() <= pe && x.paths.len() <= pp);
            }
            prev = Some((x.edges.len(), x.paths.len()));
        }
    }

    #[test]
    fn attention_is_normalised_per_destination(seed in any::<u64>(), qseed in any::<u64>()) {
        let ds = random_tkg(&mut ChaCha8Rng::seed_from_u64(seed), 25, 4, 15);
        let params = toy_params(&ds, 3, seed);
        let time = time_table_for(&ds, params.dims.time_dim);
        let e = (qseed % ds.num_entities() as u64) as u32;
        let t = 1 + (qseed / 7 % ds.num_snapshots() as u64) as u32;
        let q = QueryContext::new(e, 0, t).unwrap();
        let g = TcrDigraph::build(&ds, &q, &DigraphConfig { layers: 3, window: 5, ..DigraphConfig::default() }).unwrap();
        let enc = Encoder::new(&params, &time, Ablation::Full).encode(&g, &q).unwrap();
        for (edges, att) in g.layers.iter().zip(&enc.attention) {
            let mut sums: HashMap<u32, f64> = HashMap::new();
            for (edge, a) in edges.iter().zip(att) {
                prop_assert!(*a > 0.0 && *a <= 1.0);
                *sums.entry(edge.dst).or_default() += a;
            }
            for s in sums.values() {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!(enc.gate_bounds.0 > 0.0 && enc.gate_bounds.1 < 1.0);
    }
}

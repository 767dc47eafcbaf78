use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgraph_denoise::autodiff::{ParamSet, Tape, Tensor, Var};
use tgraph_denoise::events::{read_stream, write_stream, EventStream, TemporalEvent};
use tgraph_denoise::filter::EdgeFilter;
use tgraph_denoise::noise::{NeighborSide, NoiseFunction};

const CASES: u32 = 10_000;

fn side(tape: &mut Tape, states: &[Vec<f64>], dts: &[f64], d: usize) -> NeighborSide {
    if states.is_empty() {
        return NeighborSide::empty();
    }
    let rows: Vec<Var> = states
        .iter()
        .map(|s| tape.constant(Tensor::vector(s.clone())).unwrap())
        .collect();
    NeighborSide {
        states: Some(tape.stack_rows(&rows, d).unwrap()),
        dts: dts.to_vec(),
    }
}

#[derive(Debug, Clone)]
struct Instance {
    d: usize,
    seed: u64,
    z_i: Vec<f64>,
    z_j: Vec<f64>,
    n_i: Vec<(Vec<f64>, f64)>,
    n_j: Vec<(Vec<f64>, f64)>,
    nodes: (usize, usize),
}

fn neighbors(d: usize, max: usize) -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    prop::collection::vec(
        (prop::collection::vec(-5.0..5.0f64, d), 0.0..500.0f64),
        0..=max,
    )
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..6).prop_flat_map(|d| {
        (
            any::<u64>(),
            prop::collection::vec(-5.0..5.0f64, d),
            prop::collection::vec(-5.0..5.0f64, d),
            neighbors(d, 8),
            neighbors(d, 8),
            (0usize..50, 0usize..50),
        )
            .prop_map(move |(seed, z_i, z_j, n_i, n_j, nodes)| Instance {
                d,
                seed,
                z_i,
                z_j,
                n_i,
                n_j,
                nodes,
            })
    })
}

fn score(
    nf: &NoiseFunction,
    params: &ParamSet,
    (a, za, na): (usize, &[f64], &[(Vec<f64>, f64)]),
    (b, zb, nb): (usize, &[f64], &[(Vec<f64>, f64)]),
    d: usize,
) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::vector(za.to_vec())).unwrap();
    let vb = tape.constant(Tensor::vector(zb.to_vec())).unwrap();
    let (sa, da): (Vec<Vec<f64>>, Vec<f64>) = na.iter().cloned().unzip();
    let (sb, db): (Vec<Vec<f64>>, Vec<f64>) = nb.iter().cloned().unzip();
    let side_a = side(&mut tape, &sa, &da, d);
    let side_b = side(&mut tape, &sb, &db, d);
    let out = nf
        .dynamic_noise(&mut tape, params, (a, va, &side_a), (b, vb, &side_b))
        .unwrap();
    let alpha = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
    (
        tape.scalar_value(out.beta_ij),
        alpha(out.alpha_i),
        alpha(out.alpha_j),
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, ..ProptestConfig::default() })]

    #[test]
    fn attention_invariants(inst in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
        let mut params = ParamSet::new();
        let nf = NoiseFunction::new(&mut params, inst.d, &mut rng).unwrap();
        let filter = EdgeFilter::new(&mut params, inst.d, &mut rng).unwrap();
        let (i, j) = inst.nodes;

        let (beta_ij, alpha_i, alpha_j) =
            score(&nf, &params, (i, &inst.z_i, &inst.n_i), (j, &inst.z_j, &inst.n_j), inst.d);
        let (beta_ji, _, _) =
            score(&nf, &params, (j, &inst.z_j, &inst.n_j), (i, &inst.z_i, &inst.n_i), inst.d);
        prop_assert_eq!(beta_ij + beta_ji, 1.0);

        for (alpha, n) in [(alpha_i, &inst.n_i), (alpha_j, &inst.n_j)] {
            match alpha {
                Some(a) => {
                    prop_assert_eq!(a.len(), n.len());
                    prop_assert!(a.iter().all(|x| *x >= 0.0));
                    prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
                None => prop_assert!(n.is_empty()),
            }
        }

        let w = filter.predict_value(&params, &inst.z_i, &inst.z_j).unwrap();
        prop_assert!(w >= 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-700.0..700.0f64, 1..20)) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(xs)).unwrap();
        let s = tape.softmax(v).unwrap();
        let p = tape.value(s).data();
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn stream_files_round_trip_bit_exactly(
        rows in prop::collection::vec(
            (0usize..20, 0usize..20, 0.0..1e6f64, prop::option::of(0u8..2), prop::collection::vec(-1e3..1e3f64, 3)),
            1..40,
        )
    ) {
        let events: Vec<TemporalEvent> = rows
            .into_iter()
            .map(|(src, dst, t, label, features)| TemporalEvent { src, dst, t, features, label })
            .collect();
        let s = EventStream::new(events, 20, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        write_stream(&path, "# command=test config=0 seed=0", &s).unwrap();
        let back = read_stream(&path).unwrap();
        prop_assert_eq!(back.num_nodes, s.num_nodes);
        prop_assert_eq!(back.events, s.events);
    }
}

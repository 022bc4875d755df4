use fractal_ir::attention::{mhsa, AttentionConfig, AttentionKind};
use fractal_ir::fifm::{fifm_att, FifmConfig};
use fractal_ir::partition::{
    fractal_regroup, fractal_regroup_reverse, index_map_oracle, window_partition, window_reverse,
    FractalGeometry, Stage, WindowSpec,
};
use fractal_ir::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geometry() -> impl Strategy<Value = (FractalGeometry, usize, usize)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..3, 1usize..3, 1usize..3).prop_map(|(p, s, ry, rx, b, c)| {
        let big = p * s;
        (FractalGeometry::new(ry * big, rx * big, p, s).unwrap(), b, c)
    })
}

fn random_store(specs: &[fractal_ir::ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for spec in specs {
        s.insert(spec.name.clone(), Tensor::randn(&spec.shape, 0.5, &mut rng));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), n in 1usize..6) {
        let len = values.len() / n * n;
        prop_assume!(len > 0);
        let t = Tensor::new(&[len / n, n], values[..len].to_vec()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = g.softmax_last(v);
        for row in g.value(y).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn round_trips_are_exact((geo, b, c) in geometry(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::randn(&[b, geo.h, geo.w, c], 1.0, &mut rng);
        let w1 = window_partition(&x, geo.p).unwrap();
        prop_assert_eq!(w1.shape(), &[b * geo.windows(), geo.p * geo.p, c]);
        let w2 = fractal_regroup(&w1, &geo).unwrap();
        prop_assert_eq!(w2.shape(), &[b * geo.regions() * geo.p * geo.p, geo.s * geo.s, c]);
        let back = window_reverse(&fractal_regroup_reverse(&w2, &geo).unwrap(), geo.p, geo.h, geo.w).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn oracle_maps_are_bijections((geo, _, _) in geometry()) {
        for stage in [Stage::L1, Stage::L2] {
            let m = index_map_oracle(&geo, stage);
            prop_assert!(m.is_bijection());
            let inv = m.inverse();
            for (src, &dst) in m.permutation.iter().enumerate() {
                prop_assert_eq!(inv.permutation[dst], src);
            }
        }
    }

    #[test]
    fn level_two_groups_stay_inside_one_region((geo, _, _) in geometry()) {
        let m = index_map_oracle(&geo, Stage::L2).inverse();
        let n = geo.s * geo.s;
        let big = geo.region();
        for group in m.permutation.chunks(n) {
            let region = |px: usize| ((px / geo.w) / big, (px % geo.w) / big);
            let offset = |px: usize| ((px / geo.w) % geo.p, (px % geo.w) % geo.p);
            prop_assert!(group.iter().all(|&px| region(px) == region(group[0])));
            prop_assert!(group.iter().all(|&px| offset(px) == offset(group[0])));
        }
    }

    #[test]
    fn mhsa_is_permutation_equivariant(seed in any::<u64>(), cosine in any::<bool>()) {
        let kind = if cosine { AttentionKind::Cosine } else { AttentionKind::Dot };
        let cfg = AttentionConfig::new(2, 4, 4, kind, true).unwrap();
        let store = random_store(&cfg.param_specs("a"), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let n = 6;
        let x = Tensor::<f64>::randn(&[1, n, 4], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor<f64>| {
            let d: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * 4..(i + 1) * 4].to_vec()).collect();
            Tensor::new(&[1, n, 4], d).unwrap()
        };
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let v = g.constant(input);
            let y = mhsa(&mut g, v, &cfg, &p, "a").unwrap();
            g.value(y).clone()
        };
        let a = permute(&run(x.clone()));
        let b = run(permute(&x));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_normalised(values in prop::collection::vec(-10.0f64..10.0, 8)) {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 4], values).unwrap());
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for row in g.value(y).data().chunks(4) {
            let m = row.iter().sum::<f64>() / 4.0;
            prop_assert!(m.abs() < 1e-9);
        }
    }
}

/// Shifting the input by whole regions shifts the output by the same amount.
#[test]
fn fifm_att_is_equivariant_to_region_translation() {
    let cfg = FifmConfig::new(4, 2, WindowSpec { p: 2, s: 2 });
    let store = random_store(&cfg.param_specs("l"), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w) = (8, 8);
    let x = Tensor::<f64>::randn(&[1, h, w, 4], 1.0, &mut rng);
    let roll = |t: &Tensor<f64>, dy: usize, dx: usize| {
        let mut out = vec![0.0; t.len()];
        for y in 0..h {
            for xx in 0..w {
                let (ty, tx) = ((y + dy) % h, (xx + dx) % w);
                out[(ty * w + tx) * 4..(ty * w + tx + 1) * 4]
                    .copy_from_slice(&t.data()[(y * w + xx) * 4..(y * w + xx + 1) * 4]);
            }
        }
        Tensor::new(t.shape(), out).unwrap()
    };
    let run = |input: Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let v = g.constant(input);
        let y = fifm_att(&mut g, v, &cfg, &p, "l").unwrap();
        g.value(y).clone()
    };
    for (dy, dx) in [(4, 0), (0, 4), (4, 4)] {
        let a = roll(&run(x.clone()), dy, dx);
        let b = run(roll(&x, dy, dx));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
    // A one-pixel shift crosses window boundaries and changes the result.
    let a = roll(&run(x.clone()), 1, 0);
    let b = run(roll(&x, 1, 0));
    assert!(a.max_abs_diff(&b) > 1e-6);
}

//! Graph construction and updates checked against hand-unrolled arithmetic and
//! brute-force neighbor search.

use boundary_refine::gnn::{build_graph, GraphUpdater, UpdateMode, UpdaterShape};
use boundary_refine::nnet::Dense;
use boundary_refine::scene::Box3D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn node(x: f64, y: f64, z: f64) -> Box3D {
    Box3D::new([x, y, z], [3.9, 1.6, 1.56], 0.0).unwrap()
}

/// `W x + b` written out with explicit loops.
fn affine(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
    assert_eq!(x.len(), n_in);
    let mut y = vec![0.0; n_out];
    for o in 0..n_out {
        let mut acc = layer.bias[o];
        for i in 0..n_in {
            acc += layer.weight[o * n_in + i] * x[i];
        }
        y[o] = acc;
    }
    y
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|a| a.max(0.0)).collect()
}

fn channel_max(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn single_layer(mode: UpdateMode, iterations: usize, width: usize) -> UpdaterShape {
    UpdaterShape {
        mode,
        iterations,
        aggregation_widths: vec![width],
        fusion_hidden: vec![],
        alignment_hidden: vec![],
    }
}

fn randomize_biases(upd: &mut GraphUpdater, rng: &mut ChaCha8Rng) {
    for step in &mut upd.steps {
        let mut stacks = vec![&mut step.aggregation, &mut step.fusion];
        if let Some(a) = step.alignment.as_mut() {
            stacks.push(a);
        }
        for s in stacks {
            for layer in s.layers_mut() {
                layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
        }
    }
}

fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>]) {
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn path_graph_two_vanilla_steps_match_manual_unroll() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 3;
    // 0 - 1 - 2 with radius 1.5: the ends are 2 m apart and not connected.
    let states: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let items: Vec<(Box3D, Vec<f64>)> =
        (0..3).map(|i| (node(f64::from(i as u8), 0.0, 0.0), states[i].clone())).collect();
    let graph = build_graph(&items, 1.5).unwrap();
    assert_eq!(graph.neighbors(0), &[0, 1]);
    assert_eq!(graph.neighbors(2), &[1, 2]);

    let mut upd = GraphUpdater::new(&single_layer(UpdateMode::Vanilla, 2, 4), dim, &mut rng).unwrap();
    randomize_biases(&mut upd, &mut rng);
    let hoods: [&[usize]; 3] = [&[0, 1], &[0, 1, 2], &[1, 2]];
    let mut h = states.clone();
    for step in &upd.steps {
        let agg = &step.aggregation.layers()[0];
        let fus = &step.fusion.layers()[0];
        h = (0..3)
            .map(|i| {
                let msgs: Vec<Vec<f64>> = hoods[i].iter().map(|&j| affine(agg, &h[j])).collect();
                let f = relu(affine(fus, &channel_max(&msgs)));
                h[i].iter().zip(&f).map(|(a, b)| a + b).collect()
            })
            .collect();
    }
    assert_close(&upd.run(&graph).unwrap(), &h);
    // Two steps let node 0 see node 2 through node 1.
    let mut far = graph.clone();
    far.set_state(2, vec![9.0; dim]).unwrap();
    assert_ne!(upd.run(&far).unwrap()[0], h[0]);
}

#[test]
fn two_node_extended_step_matches_manual_unroll() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dim = 2;
    let pos = [[0.3, -0.2, 0.1], [1.1, 0.4, -0.3]];
    let states: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let items: Vec<(Box3D, Vec<f64>)> =
        (0..2).map(|i| (node(pos[i][0], pos[i][1], pos[i][2]), states[i].clone())).collect();
    let graph = build_graph(&items, 2.0).unwrap();
    let mut upd = GraphUpdater::new(&single_layer(UpdateMode::Extended, 1, 3), dim, &mut rng).unwrap();
    randomize_biases(&mut upd, &mut rng);
    let step = &upd.steps[0];
    let (agg, fus) = (&step.aggregation.layers()[0], &step.fusion.layers()[0]);
    let align = &step.alignment.as_ref().unwrap().layers()[0];

    let expected: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            let delta = affine(align, &states[i]);
            let msgs: Vec<Vec<f64>> = (0..2)
                .map(|j| {
                    let mut input: Vec<f64> = (0..3).map(|a| pos[i][a] - pos[j][a] - delta[a]).collect();
                    input.extend(&states[j]);
                    affine(agg, &input)
                })
                .collect();
            let f = relu(affine(fus, &channel_max(&msgs)));
            states[i].iter().zip(&f).map(|(a, b)| a + b).collect()
        })
        .collect();
    let trace = upd.forward(&graph).unwrap();
    assert_close(trace.outputs(), &expected);
    for i in 0..2 {
        let delta = affine(align, &states[i]);
        for a in 0..3 {
            assert!((trace.alignment_offsets(1)[i][a] - delta[a]).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_graph_matches_all_pairs(
        pts in prop::collection::vec((0.0f64..8.0, 0.0f64..8.0, -1.0f64..1.0), 0..40),
        r in 0.2f64..3.0,
    ) {
        let items: Vec<(Box3D, Vec<f64>)> = pts.iter().map(|&(x, y, z)| (node(x, y, z), vec![1.0])).collect();
        let g = build_graph(&items, r).unwrap();
        for i in 0..pts.len() {
            let (xi, yi, zi) = pts[i];
            let expected: Vec<usize> = (0..pts.len())
                .filter(|&j| {
                    let (xj, yj, zj) = pts[j];
                    (xi - xj).powi(2) + (yi - yj).powi(2) + (zi - zj).powi(2) < r * r
                })
                .collect();
            let mut got = g.neighbors(i).to_vec();
            got.sort_unstable();
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn relabeling_nodes_permutes_outputs(seed in 0u64..1000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3;
        let items: Vec<(Box3D, Vec<f64>)> = (0..n)
            .map(|_| {
                let b = node(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 0.0);
                (b, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let shuffled: Vec<(Box3D, Vec<f64>)> = perm.iter().map(|&p| items[p].clone()).collect();
        let shape = UpdaterShape { mode: UpdateMode::Extended, ..UpdaterShape::default() };
        let upd = GraphUpdater::new(&shape, dim, &mut rng).unwrap();
        let a = upd.run(&build_graph(&items, 2.0).unwrap()).unwrap();
        let b = upd.run(&build_graph(&shuffled, 2.0).unwrap()).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            for (x, y) in b[k].iter().zip(&a[p]) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

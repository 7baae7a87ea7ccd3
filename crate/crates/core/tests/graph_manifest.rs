use std::fs;

use layercache::error::Error;
use layercache::fixtures::{mlp_chain, toy_conv_backbone};
use layercache::graph::{load_model, save_model, BackboneGraph, GraphBuilder};
use layercache::layers::{Layer, LayerSpec};
use layercache::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 4;

/// A random DAG of dense/relu/add nodes over `[WIDTH]` vectors. Sinks are
/// merged by a final add before the softmax output.
fn random_dag(seed: u64, inner: usize) -> BackboneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new().input("in", vec![WIDTH]);
    let mut names = vec!["in".to_string()];
    let mut consumed = vec![false];
    for i in 0..inner {
        let name = format!("n{i}");
        let fan_in = if names.len() >= 2 && rng.gen_bool(0.35) { 2 } else { 1 };
        let mut inputs: Vec<usize> = Vec::new();
        while inputs.len() < fan_in {
            let j = rng.gen_range(0..names.len());
            if !inputs.contains(&j) {
                inputs.push(j);
            }
        }
        let layer = if fan_in == 2 {
            Layer::op(LayerSpec::Add)
        } else if rng.gen_bool(0.5) {
            Layer::op(LayerSpec::Relu)
        } else {
            Layer::init(
                LayerSpec::Dense {
                    in_features: WIDTH,
                    out_features: WIDTH,
                },
                &mut rng,
            )
            .unwrap()
        };
        let refs: Vec<&str> = inputs.iter().map(|&j| names[j].as_str()).collect();
        b = b.layer(&name, layer, &refs, rng.gen_bool(0.6));
        for j in inputs {
            consumed[j] = true;
        }
        names.push(name);
        consumed.push(false);
    }
    let sinks: Vec<&str> = (0..names.len())
        .filter(|&i| !consumed[i])
        .map(|i| names[i].as_str())
        .collect();
    let last = if sinks.len() > 1 {
        b = b.layer("merge", Layer::op(LayerSpec::Add), &sinks, false);
        "merge".to_string()
    } else {
        sinks[0].to_string()
    };
    b.layer("out", Layer::op(LayerSpec::Softmax), &[&last], false)
        .build("out", WIDTH)
        .unwrap()
}

/// Every input-to-output path, as node index lists.
fn all_paths(g: &BackboneGraph) -> Vec<Vec<usize>> {
    let mut consumers = vec![Vec::new(); g.nodes().len()];
    for (i, n) in g.nodes().iter().enumerate() {
        for &j in &n.inputs {
            consumers[j].push(i);
        }
    }
    let mut out = Vec::new();
    let mut stack = vec![vec![g.input_node()]];
    while let Some(path) = stack.pop() {
        let last = *path.last().unwrap();
        if last == g.output_node() {
            out.push(path);
            continue;
        }
        for &c in &consumers[last] {
            let mut p = path.clone();
            p.push(c);
            stack.push(p);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dominance_matches_path_enumeration(seed in any::<u64>(), inner in 1usize..=9) {
        let g = random_dag(seed, inner);
        prop_assert!(g.nodes().len() <= 12);
        let paths = all_paths(&g);
        for node in 0..g.nodes().len() {
            let on_every_path = paths.iter().all(|p| p.contains(&node));
            prop_assert_eq!(g.dominates_output(node), on_every_path, "node {}", &g.nodes()[node].name);
        }
    }

    #[test]
    fn candidates_are_dominating_block_outputs(seed in any::<u64>(), inner in 1usize..=9, skip in 0usize..3) {
        let g = random_dag(seed, inner);
        let all = g.identify_candidates(0);
        let kept = g.identify_candidates(skip);
        prop_assert!(kept.len() <= all.len());
        for c in &all {
            let i = g.node_index(&c.name).unwrap();
            prop_assert!(g.nodes()[i].block_output && g.dominates_output(i));
            prop_assert_eq!(c.cumulative_flops + c.fallback_flops, g.total_flops());
            prop_assert!(c.fallback_flops > 0);
        }
        let ordinals: Vec<usize> = kept.iter().map(|c| c.ordinal).collect();
        prop_assert_eq!(ordinals, (1..=kept.len()).collect::<Vec<_>>());
    }

    #[test]
    fn node_flops_sum_to_total(seed in any::<u64>(), inner in 1usize..=9) {
        let g = random_dag(seed, inner);
        let sum: u64 = (0..g.nodes().len()).map(|i| g.node_flops(i)).sum();
        prop_assert_eq!(sum, g.total_flops());
        prop_assert_eq!(g.cumulative_flops(g.output_node()), g.total_flops());
    }
}

#[test]
fn residual_branch_interior_is_not_a_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dense = |rng: &mut ChaCha8Rng| {
        Layer::init(
            LayerSpec::Dense {
                in_features: WIDTH,
                out_features: WIDTH,
            },
            rng,
        )
        .unwrap()
    };
    let g = GraphBuilder::new()
        .input("in", vec![WIDTH])
        .layer("stem", dense(&mut rng), &["in"], true)
        .layer("branch", dense(&mut rng), &["stem"], true)
        .layer("join", Layer::op(LayerSpec::Add), &["stem", "branch"], true)
        .layer("head", dense(&mut rng), &["join"], false)
        .layer("out", Layer::op(LayerSpec::Softmax), &["head"], false)
        .build("out", WIDTH)
        .unwrap();
    let names: Vec<String> = g.identify_candidates(0).into_iter().map(|c| c.name).collect();
    assert_eq!(names, ["stem", "join"]);
}

#[test]
fn manifest_round_trip_preserves_outputs_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    for g in [toy_conv_backbone(4, 10, 3).unwrap(), mlp_chain(8, 16, 3, 5, 3).unwrap()] {
        let path = dir.path().join(format!("{}.toml", g.content_hash()));
        save_model(&g, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.content_hash(), g.content_hash());
        assert_eq!(back.total_flops(), g.total_flops());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut shape = vec![3];
        shape.extend_from_slice(g.input_shape());
        let n = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(back.forward(&x).unwrap(), g.forward(&x).unwrap());
    }
}

#[test]
fn blob_errors_name_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    save_model(&mlp_chain(4, 4, 2, 3, 0).unwrap(), &path).unwrap();

    fs::write(dir.path().join("fc2.bin"), [0u8; 12]).unwrap();
    match load_model(&path) {
        Err(Error::BlobSize { node, expected, actual }) => {
            assert_eq!(node, "fc2");
            assert_eq!((expected, actual), (20, 3));
        }
        other => panic!("expected a size error, got {other:?}"),
    }

    fs::remove_file(dir.path().join("fc2.bin")).unwrap();
    assert!(matches!(load_model(&path), Err(Error::MissingBlob { node, .. }) if node == "fc2"));
}

#[test]
fn manifest_structure_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    save_model(&mlp_chain(4, 4, 1, 3, 0).unwrap(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    fs::write(&path, text.replace("\"act1\"]", "\"ghost\"]")).unwrap();
    assert!(matches!(load_model(&path), Err(Error::UnknownNode(n)) if n == "ghost"));

    fs::write(&path, text.replace(MANIFEST_TAG, "other/9")).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Parse { .. })));

    fs::write(&path, "not = [toml").unwrap();
    assert!(matches!(load_model(&path), Err(Error::Parse { .. })));

    // a back edge from the head into the first dense layer closes a cycle
    let cyclic = text.replacen("edges = [", "edges = [[\"head\", \"fc1\"], ", 1);
    fs::write(&path, cyclic).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Cycle { .. }) | Err(Error::InvalidGraph(_))));
}

const MANIFEST_TAG: &str = layercache::graph::MANIFEST_FORMAT;

use commer_core::backbone::{Backbone, BackboneConfig, FrozenBackbone, LoraConfig};
use commer_core::numerics::{grad_check, GradCheckOptions, Graph, NodeId, ParamId, ParamStore};
use commer_core::training::{Method, Model};
use commer_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Checks one op: `build` receives the two parameter nodes and returns a
/// tensor that is reduced to a scalar through a fixed random projection.
fn check_op(seed: u64, a: [usize; 2], b: [usize; 2], build: impl Fn(&mut Graph<f64>, NodeId, NodeId) -> NodeId) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    let pa = s.add("a", a.to_vec(), random(&mut rng, a[0] * a[1]), true);
    let pb = s.add("b", b.to_vec(), random(&mut rng, b[0] * b[1]), true);
    let weights_seed = rng.random::<u64>();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<NodeId> {
        let x = g.param(s, pa);
        let y = g.param(s, pb);
        let out = build(g, x, y);
        let shape = g.shape(out).to_vec();
        let n = shape.iter().product();
        let w = g.constant(shape, random(&mut ChaCha8Rng::seed_from_u64(weights_seed), n));
        let p = g.mul(out, w);
        Ok(g.sum(p))
    };
    grad_check(loss, &s, &[pa, pb], &GradCheckOptions::default()).unwrap().max_rel_error
}

const TOL: f64 = 1e-3;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_variants(seed in any::<u64>(), n in 1usize..4, k in 1usize..5, m in 1usize..4) {
        prop_assert!(check_op(seed, [n, k], [k, m], |g, a, b| g.matmul(a, b)) <= TOL);
        prop_assert!(check_op(seed, [n, k], [m, k], |g, a, b| g.matmul_nt(a, b)) <= TOL);
    }

    #[test]
    fn elementwise_and_row_ops(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        prop_assert!(check_op(seed, [r, c], [r, c], |g, a, b| g.add(a, b)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [r, c], |g, a, b| g.mul(a, b)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, c], |g, a, b| g.add_row(a, b)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, c], |g, a, b| g.mul_row(a, b)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.scale(a, -1.7)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.gelu(a)) <= TOL);
    }

    #[test]
    fn normalizing_ops(seed in any::<u64>(), r in 1usize..4, c in 2usize..6) {
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.softmax(a, false)) <= TOL);
        prop_assert!(check_op(seed, [c, c], [1, 1], |g, a, _| g.softmax(a, true)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.rms_norm(a)) <= TOL);
    }

    #[test]
    fn shape_ops(seed in any::<u64>(), r in 2usize..5, c in 2usize..5) {
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.slice(a, 0, 1, r - 1)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.slice(a, 1, 1, c - 1)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, c], |g, a, b| g.concat(&[a, b], 0)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [r, 1], |g, a, b| g.concat(&[a, b], 1)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.mean(a, 0)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [1, 1], |g, a, _| g.mean(a, 1)) <= TOL);
        prop_assert!(check_op(seed, [r, c], [r, c], |g, a, b| g.mean_of(&[a, b, a])) <= TOL);
    }

    #[test]
    fn gather_and_cross_entropy(seed in any::<u64>(), v in 3usize..7, c in 1usize..4) {
        prop_assert!(check_op(seed, [v, c], [1, 1], |g, t, _| g.gather(t, &[0, 2, 0, 1])) <= TOL);
        prop_assert!(check_op(seed, [3, v], [1, 1], |g, l, _| g.cross_entropy(l, &[Some(1), None, Some(2)])) <= TOL);
    }
}

#[test]
fn three_layer_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::<f64>::new();
    let dims = [(8usize, 5usize), (8, 8), (4, 8)];
    let ids: Vec<ParamId> = dims
        .iter()
        .enumerate()
        .map(|(i, &(o, n))| s.add(format!("w{i}"), vec![o, n], random(&mut rng, o * n), true))
        .collect();
    let x = random(&mut rng, 3 * 5);
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<NodeId> {
        let mut h = g.constant(vec![3, 5], x.clone());
        for (i, &w) in ids.iter().enumerate() {
            let wn = g.param(s, w);
            h = g.matmul_nt(h, wn);
            if i + 1 < ids.len() {
                h = g.gelu(h);
            }
        }
        Ok(g.cross_entropy(h, &[Some(0), Some(3), Some(1)]))
    };
    let r = grad_check(loss, &s, &ids, &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

fn tiny() -> BackboneConfig {
    BackboneConfig { d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_positions: 64, ..Default::default() }
}

#[test]
fn embedding_table_gradient() {
    let mut store = ParamStore::new();
    let bb = Backbone::init(tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let s64 = store.cast::<f64>();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<NodeId> {
        let e = bb.embed(g, s, &[104, 105, 104])?;
        Ok(g.sum(e))
    };
    let only_used = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<NodeId> {
        let e = bb.embed(g, s, &[104, 105, 104])?;
        let sq = g.mul(e, e);
        Ok(g.sum(sq))
    };
    let opts = GradCheckOptions { max_coords: Some(200), seed: 1, ..Default::default() };
    for b in [&loss as &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>, &only_used] {
        let r = grad_check(b, &s64, &[bb.token_embedding()], &opts).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}

#[test]
fn full_commer_loss_on_two_documents() {
    let mut store = ParamStore::new();
    let bb = Backbone::init(tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let frozen = FrozenBackbone::new(bb, store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = Model::new(&frozen, Method::Commer, 4, LoraConfig::default(), None, &mut rng).unwrap();
    // Move B away from zero so the adapter path carries gradient into A.
    for id in model.parts.trainable_ids() {
        let p = model.store.get_mut(id);
        if p.name.ends_with(".b") {
            for (i, v) in p.data.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f32 - 5.0) * 0.02;
            }
        }
    }
    let s64 = model.store.cast::<f64>();
    let docs = vec!["ab cd".to_string(), "xyz".to_string()];
    let parts = &model.parts;
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<NodeId> {
        Ok(parts.example_loss(g, s, &docs, "q?", "ok", None)?.0.loss)
    };
    let ids = parts.trainable_ids();
    let r = grad_check(loss, &s64, &ids, &GradCheckOptions { max_coords: Some(300), seed: 9, ..Default::default() }).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

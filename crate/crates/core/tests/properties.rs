use std::collections::BTreeMap;

use commer_core::compressor::Compression;
use commer_core::evaluation::report::powerlaw_fit;
use commer_core::evaluation::rouge::{lcs_len, rouge_l, tokens};
use commer_core::merger::{merge_concat, merge_mean, CompressionStore, StoreOrigin};
use commer_core::numerics::{clip_global_norm, cosine_lr, AdamW, GradMap, LrSchedule, ParamGroup, ParamId, ParamStore};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn comps(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> Vec<Compression> {
    (0..n)
        .map(|_| Compression::new((0..m * d).map(|_| rng.random_range(-3.0f32..3.0)).collect(), m, d, 1).unwrap())
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

fn origin() -> StoreOrigin {
    StoreOrigin { backbone_hash: "b".into(), checkpoint_hash: "c".into() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mean_is_order_agnostic(seed in any::<u64>(), n in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cs = comps(&mut rng, n, 4, 8);
        let base = merge_mean(&cs).unwrap();
        prop_assert_eq!(base.shape(), (4, 8));
        prop_assert_eq!(base.doc_count, n);
        for _ in 0..4 {
            cs.shuffle(&mut rng);
            prop_assert!(max_abs_diff(&merge_mean(&cs).unwrap().matrix, &base.matrix) <= 1e-6);
        }
    }

    #[test]
    fn streaming_adds_match_the_batch_mean(seed in any::<u64>(), n in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = comps(&mut rng, n, 2, 5);
        let mut store = CompressionStore::new("u", 2, 5, false, origin());
        for (i, c) in cs.iter().enumerate() {
            store.add(c, &format!("doc {i}")).unwrap();
        }
        let agg = store.aggregate().unwrap();
        prop_assert_eq!(agg.doc_count, n);
        prop_assert!(max_abs_diff(&agg.matrix, &merge_mean(&cs).unwrap().matrix) <= 1e-6);
    }

    #[test]
    fn concat_slices_back_to_its_inputs(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = comps(&mut rng, n, 3, 4);
        let cat = merge_concat(&cs).unwrap();
        prop_assert_eq!(cat.shape(), (3 * n, 4));
        for (i, c) in cs.iter().enumerate() {
            prop_assert_eq!(&cat.matrix[i * 12..(i + 1) * 12], &c.matrix[..]);
        }
    }

    #[test]
    fn clipped_norm_is_min_of_norm_and_bound(seed in any::<u64>(), max in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g: GradMap<f64> = BTreeMap::new();
        for i in 0..3 {
            let len = rng.random_range(1..20);
            let scale = rng.random_range(0.0..3.0);
            g.insert(ParamId(i), (0..len).map(|_| rng.random_range(-scale..scale)).collect());
        }
        let before = clip_global_norm(&mut g, max);
        let after = g.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((after - before.min(max)).abs() <= 1e-6);
    }

    #[test]
    fn schedule_rises_then_falls(total in 1usize..400, frac in 0.0f64..0.5, peak in 1e-5f64..1.0) {
        let s = LrSchedule::new(total, frac).unwrap();
        let w = s.warmup_steps();
        let lr: Vec<f64> = (0..=total).map(|t| cosine_lr(t, &s, peak)).collect();
        prop_assert!(lr[..=w].windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(lr[w..].windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(lr.iter().all(|&v| (0.0..=peak * (1.0 + 1e-12)).contains(&v)));
    }

    #[test]
    fn rouge_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["a", "b", "c", "The", "the", "cat"];
        let sample = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.random_range(0..7);
            (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
        };
        for _ in 0..32 {
            let (c, r) = (sample(&mut rng), sample(&mut rng));
            prop_assert_eq!(rouge_l(&c, &r), brute_rouge(&c, &r));
        }
    }
}

/// LCS by enumerating every subsequence of the shorter token list.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        let mut it = long.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = best.max(sub.len());
        }
    }
    best
}

fn brute_rouge(c: &str, r: &str) -> f64 {
    let (ct, rt) = (tokens(c), tokens(r));
    if ct.is_empty() && rt.is_empty() {
        return 1.0;
    }
    let l = brute_lcs(&ct, &rt);
    if l == 0 {
        return 0.0;
    }
    let (p, rc) = (l as f64 / ct.len() as f64, l as f64 / rt.len() as f64);
    2.0 * p * rc / (p + rc)
}

#[test]
fn rouge_on_a_thousand_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vocab = ["x", "y", "z", "w", "X"];
    for _ in 0..1000 {
        let mut s = || (0..rng.random_range(0..9)).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ");
        let (a, b) = (s(), s());
        assert_eq!(rouge_l(&a, &b), brute_rouge(&a, &b), "{a:?} vs {b:?}");
        assert_eq!(lcs_len(&tokens(&a), &tokens(&b)), brute_lcs(&tokens(&a), &tokens(&b)));
    }
}

#[test]
fn powerlaw_matches_grid_search() {
    let pts = [(1.0, 3.1), (2.0, 2.7), (4.0, 2.65), (8.0, 2.2)];
    let fit = powerlaw_fit(&pts).unwrap();
    let sse = |a: f64, b: f64| pts.iter().map(|&(n, p)| (p.ln() - a - b * n.ln()).powi(2)).sum::<f64>();
    // coarse grid, then successively finer grids around the best cell
    let (mut a0, mut b0, mut step) = (0.0, 0.0, 0.5);
    for _ in 0..40 {
        let mut best = (f64::INFINITY, a0, b0);
        for i in -10..=10 {
            for j in -10..=10 {
                let (a, b) = (a0 + i as f64 * step, b0 + j as f64 * step);
                let e = sse(a, b);
                if e < best.0 {
                    best = (e, a, b);
                }
            }
        }
        (a0, b0) = (best.1, best.2);
        step /= 4.0;
    }
    assert!((fit.a - a0).abs() <= 1e-6 && (fit.b - b0).abs() <= 1e-6, "{fit:?} vs ({a0}, {b0})");
}

#[test]
fn adam_update_saturates_at_the_learning_rate() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", vec![1], vec![0.0], true);
    let groups = [ParamGroup { name: "g".into(), params: vec![id], peak_lr: 0.01, weight_decay: false }];
    let sched = LrSchedule::new(1_000_000, 0.0).unwrap();
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let grads: GradMap<f32> = BTreeMap::from([(id, vec![0.5])]);
    // scalar recursion of the same update in f64
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut prev = 0.0f32;
    let mut last = 0.0f64;
    for t in 0..500usize {
        opt.step(&mut store, &groups, &grads, t, &sched).unwrap();
        let lr = cosine_lr(t, &sched, 0.01);
        m = 0.9 * m + 0.1 * 0.5;
        v = 0.999 * v + 0.001 * 0.25;
        let k = (t + 1) as i32;
        let expected = lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        let now = store.get(id).data[0];
        last = (prev - now) as f64;
        assert!((last - expected).abs() < 2e-6, "step {t}: {last} vs {expected}");
        prev = now;
    }
    assert!((last / 0.01 - 1.0).abs() < 1e-3, "{last}");
}

#[test]
fn frozen_tensors_keep_their_bytes() {
    let mut store = ParamStore::<f32>::new();
    let frozen = store.add("frozen", vec![3], vec![1.0, -2.0, 3.5], false);
    let live = store.add("live", vec![2], vec![0.5, 0.5], true);
    let before: Vec<u32> = store.get(frozen).data.iter().map(|v| v.to_bits()).collect();
    let groups = [ParamGroup { name: "g".into(), params: vec![live], peak_lr: 0.1, weight_decay: true }];
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.001);
    let sched = LrSchedule::new(10, 0.0).unwrap();
    for t in 0..10 {
        opt.step(&mut store, &groups, &BTreeMap::from([(live, vec![1.0, -1.0])]), t, &sched).unwrap();
    }
    let after: Vec<u32> = store.get(frozen).data.iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_ne!(store.get(live).data, vec![0.5, 0.5]);
    let listed = [ParamGroup { name: "bad".into(), params: vec![frozen], peak_lr: 0.1, weight_decay: false }];
    assert!(opt.step(&mut store, &listed, &BTreeMap::new(), 0, &sched).is_err());
}

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Finite-difference formula used for the numeric side of the check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central3,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    Central5,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Check at most this many coordinates, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, stencil: Stencil::Central3, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstCoord>,
    pub checked: usize,
    pub total: usize,
    pub seed: u64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `loss_builder` against finite
/// differences in 64-bit arithmetic.
pub fn grad_check<B>(
    loss_builder: B,
    store: &ParamStore<f64>,
    params: &[ParamId],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss_builder(&mut g, s)?;
        g.check()?;
        Ok(g.scalar(root))
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let root = loss_builder(&mut g, store)?;
    let grads = g.backward(root)?;

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|&p| (0..store.get(p).data.len()).map(move |i| (p, i)))
        .collect();
    let total = coords.len();
    let chosen: Vec<(ParamId, usize)> = match opts.max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, total, k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let h = opts.step;
    let mut work = store.clone();
    let at = |p: ParamId, i: usize, delta: f64, work: &mut ParamStore<f64>| -> Result<f64> {
        let orig = store.get(p).data[i];
        work.get_mut(p).data[i] = orig + delta;
        let v = eval(work);
        work.get_mut(p).data[i] = orig;
        v
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: chosen.len(), total, seed: opts.seed };
    for (p, i) in chosen {
        if !store.get(p).trainable {
            return Err(Error::contract(format!("grad_check on frozen parameter {}", store.get(p).name)));
        }
        let numeric = match opts.stencil {
            Stencil::Central3 => (at(p, i, h, &mut work)? - at(p, i, -h, &mut work)?) / (2.0 * h),
            Stencil::Central5 => {
                let f2 = at(p, i, 2.0 * h, &mut work)?;
                let f1 = at(p, i, h, &mut work)?;
                let b1 = at(p, i, -h, &mut work)?;
                let b2 = at(p, i, -2.0 * h, &mut work)?;
                (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * h)
            }
        };
        let analytic = grads.param(p).map(|g| g[i]).unwrap_or(0.0);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(WorstCoord { param: store.get(p).name.clone(), index: i, analytic, numeric });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", vec![1, 3], vec![0.5, -1.25, 2.0], true);
        let r = grad_check(
            |g, s| {
                let x = g.param(s, w);
                let c = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
                let xc = g.mul(x, c);
                let q = g.mul(xc, x);
                Ok(g.sum(q))
            },
            &s,
            &[w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn nondeterministic_builder_is_rejected() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", vec![1, 1], vec![1.0], true);
        let calls = Cell::new(0.0);
        let r = grad_check(
            |g, s| {
                calls.set(calls.get() + 1.0);
                let x = g.param(s, w);
                let y = g.scale(x, calls.get());
                Ok(g.sum(y))
            },
            &s,
            &[w],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn subsampling_is_seeded_and_reported() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", vec![10, 10], (0..100).map(|i| i as f64 / 50.0).collect(), true);
        let opts = GradCheckOptions { max_coords: Some(7), seed: 3, ..Default::default() };
        let b = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, w);
            let q = g.mul(x, x);
            Ok(g.sum(q))
        };
        let r = grad_check(b, &s, &[w], &opts).unwrap();
        assert_eq!((r.checked, r.total, r.seed), (7, 100, 3));
    }

    fn mlp() -> (ParamStore<f64>, Vec<ParamId>, impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::<f64>::new();
        let mut ids = Vec::new();
        for (i, (o, n)) in [(6, 4), (5, 6), (3, 5)].into_iter().enumerate() {
            let w: Vec<f64> = (0..o * n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            ids.push(s.add(format!("w{i}"), vec![o, n], w, true));
        }
        let ws = ids.clone();
        let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let mut h = g.constant(vec![2, 4], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.05, -1.3]);
            for (i, &w) in ws.iter().enumerate() {
                let wn = g.param(s, w);
                h = g.matmul_nt(h, wn);
                if i < 2 {
                    h = g.gelu(h);
                }
            }
            Ok(g.cross_entropy(h, &[Some(1), Some(2)]))
        };
        (s, ids, build)
    }

    #[test]
    fn corrupted_gelu_rule_is_caught() {
        let (s, ids, build) = mlp();
        let clean = grad_check(&build, &s, &ids, &GradCheckOptions::default()).unwrap();
        assert!(clean.max_rel_error <= 1e-3, "{}", clean.max_rel_error);
        crate::numerics::graph::GELU_GRAD_FAULT.with(|c| c.set(1.5));
        let broken = grad_check(&build, &s, &ids, &GradCheckOptions::default()).unwrap();
        crate::numerics::graph::GELU_GRAD_FAULT.with(|c| c.set(1.0));
        assert!(broken.max_rel_error > 1e-1, "{}", broken.max_rel_error);
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use volprob::data::{cluster_annotations, crop_center, Mask, Spacing, Volume3D};
use volprob::distributions::GaussianParams;
use volprob::flows::{chain_forward_values, FlowParams, PlanarParams, RadialParams};
use volprob::metrics::{ged_squared, hungarian_assign, hungarian_matched_iou, iou, MaskSetPair};
use volprob::tensor::{grad_check_many, Graph, RescaleDirection, Tensor};

fn mask_strategy(grid: [usize; 3]) -> impl Strategy<Value = Mask> {
    let n: usize = grid.iter().product();
    proptest::collection::vec(any::<bool>(), n).prop_map(move |v| Mask::new(grid, v).unwrap())
}

fn smooth_point(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::vector((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
}

#[test]
fn smooth_primitives_at_twenty_points() {
    type Op = fn(&mut Graph, volprob::tensor::Var) -> volprob::tensor::Var;
    let ops: [(&str, Op); 6] = [
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("softplus", |g, x| g.softplus(x)),
        ("exp", |g, x| g.exp(x)),
        ("square", |g, x| g.square(x)),
        ("linear", |g, x| g.linear(x, 0.3, -2.0)),
    ];
    for (name, op) in ops {
        for seed in 0..20 {
            let r = grad_check_many(
                |g, v| {
                    let y = op(g, v[0]);
                    let w = g.constant(smooth_point(1000 + seed, 4));
                    let p = g.mul(y, w)?;
                    Ok(g.sum(p))
                },
                &[smooth_point(seed, 4)],
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{name} at seed {seed}: {r:?}");
        }
    }
}

#[test]
fn conv_and_pool_at_twenty_points() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let pts = [t(&[2, 2, 2, 4]), t(&[2, 2, 3, 3, 3]), t(&[2])];
        let r = grad_check_many(
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 1, 1)?;
                let d = g.rescale_spatial(y, RescaleDirection::Down, 2)?;
                let s = g.square(d);
                Ok(g.sum(s))
            },
            &pts,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "seed {seed}: {r:?}");
    }
}

proptest! {
    #[test]
    fn unit_kernel_is_identity(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 3, 4], vals.clone()).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv3d(x, k, b, 1, 0).unwrap();
        prop_assert_eq!(g.value(y).data(), &vals[..]);
    }

    #[test]
    fn down_up_of_constant_is_identity(c in -10.0f64..10.0, ch in 1usize..3) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[ch, 4, 2, 6], c));
        let d = g.rescale_spatial(x, RescaleDirection::Down, 2).unwrap();
        let u = g.rescale_spatial(d, RescaleDirection::Up, 2).unwrap();
        prop_assert_eq!(g.value(u), g.value(x));
    }

    #[test]
    fn kl_zero_iff_equal(
        m in proptest::collection::vec(-3.0f64..3.0, 3),
        lv in proptest::collection::vec(-3.0f64..3.0, 3),
        dm in -1.0f64..1.0,
    ) {
        let q = GaussianParams::new(m.clone(), lv.clone()).unwrap();
        prop_assert!(q.kl(&q).abs() < 1e-12);
        let mut m2 = m;
        m2[0] += if dm.abs() < 1e-3 { 0.5 } else { dm };
        let p = GaussianParams::new(m2, lv).unwrap();
        prop_assert!(q.kl(&p) > 1e-12);
    }

    #[test]
    fn reparam_inverts(
        m in proptest::collection::vec(-3.0f64..3.0, 4),
        lv in proptest::collection::vec(-4.0f64..4.0, 4),
        eps in proptest::collection::vec(-3.0f64..3.0, 4),
    ) {
        let q = GaussianParams::new(m.clone(), lv.clone()).unwrap();
        let z = q.reparam(&eps);
        prop_assert_eq!(&z, &q.reparam(&eps));
        for i in 0..4 {
            let back = (z[i] - m[i]) / (0.5 * lv[i]).exp();
            prop_assert!((back - eps[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_symmetric_and_self_distance_zero(a in mask_strategy([2, 2, 3]), b in mask_strategy([2, 2, 3])) {
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(1.0 - iou(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ged_of_equal_multisets_is_zero(gt in proptest::collection::vec(mask_strategy([1, 2, 3]), 4), rot in 0usize..4) {
        let mut pred: Vec<Mask> = gt.iter().chain(&gt).cloned().collect();
        pred.rotate_left(rot);
        prop_assert!(ged_squared(&gt, &pred).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matched_iou_ignores_order(
        gt in proptest::collection::vec(mask_strategy([1, 3, 3]), 4),
        pred in proptest::collection::vec(mask_strategy([1, 3, 3]), 8),
        r1 in 0usize..4,
        r2 in 0usize..8,
    ) {
        let base = hungarian_matched_iou(&MaskSetPair::new(gt.clone(), pred.clone()).unwrap()).unwrap();
        let mut g2 = gt;
        g2.rotate_left(r1);
        let mut p2 = pred;
        p2.rotate_left(r2);
        p2.reverse();
        let other = hungarian_matched_iou(&MaskSetPair::new(g2, p2).unwrap()).unwrap();
        prop_assert!((base - other).abs() < 1e-12);
    }

    #[test]
    fn assignment_beats_random_permutations(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let a = hungarian_assign(&cost).unwrap();
        let mut seen = a.matching.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let direct: f64 = a.matching.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        prop_assert!((direct - a.total_cost).abs() < 1e-12);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
            let c: f64 = perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
            prop_assert!(a.total_cost <= c + 1e-12);
        }
    }

    #[test]
    fn crop_extent_any_source(
        d in 1usize..6, h in 1usize..6, w in 1usize..6,
        cd in 1usize..7, ch in 1usize..7, cw in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = [d, h, w];
        let v = Volume3D::new(grid, Spacing::new(1.0, 0.5, 0.5), (0..d * h * w).map(|i| i as f32).collect()).unwrap();
        let at = [rng.random_range(0..d), rng.random_range(0..h), rng.random_range(0..w)];
        let m = Mask::from_fn(grid, |z, y, x| [z, y, x] == at);
        let (cv, cm) = crop_center(&v, &[m], [cd, ch, cw]).unwrap();
        prop_assert_eq!(cv.grid, [cd, ch, cw]);
        prop_assert_eq!(cm[0].grid, [cd, ch, cw]);
    }
}

fn constraint_config() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

proptest! {
    #![proptest_config(constraint_config())]

    #[test]
    fn planar_direction_constraint(
        u in proptest::collection::vec(-10.0f64..10.0, 4),
        w in proptest::collection::vec(-10.0f64..10.0, 4),
    ) {
        let mut g = Graph::new();
        let uv = g.constant(Tensor::vector(u));
        let wv = g.constant(Tensor::vector(w));
        let uh = volprob::flows::constrained_u(&mut g, uv, wv).unwrap();
        let d = g.dot(uh, wv).unwrap();
        prop_assert!(g.value(d).item() >= -1.0 - 1e-9);
    }

    #[test]
    fn radial_beta_constraint(a in -30.0f64..30.0, b in -30.0f64..30.0) {
        let p = RadialParams { z_ref: Tensor::zeros(&[3]), alpha_raw: a, beta_raw: b };
        prop_assert!(p.alpha() > 0.0);
        prop_assert!(p.beta_hat() >= -p.alpha());
    }

    #[test]
    fn kl_nonnegative(
        m1 in proptest::collection::vec(-3.0f64..3.0, 3),
        l1 in proptest::collection::vec(-3.0f64..3.0, 3),
        m2 in proptest::collection::vec(-3.0f64..3.0, 3),
        l2 in proptest::collection::vec(-3.0f64..3.0, 3),
    ) {
        let q = GaussianParams::new(m1, l1).unwrap();
        let p = GaussianParams::new(m2, l2).unwrap();
        prop_assert!(q.kl(&p) >= 0.0);
    }
}

#[test]
fn identity_chain_keeps_kl_bookkeeping() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = GaussianParams::new(vec![0.4, -0.3, 1.1], vec![-0.5, 0.2, 0.0]).unwrap();
    let p = GaussianParams::new(vec![0.0, 0.5, 0.7], vec![0.3, -0.2, 0.4]).unwrap();
    let steps = vec![
        FlowParams::Planar(PlanarParams::identity(3)),
        FlowParams::Planar(PlanarParams::identity(3)),
    ];
    let n = 50_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z0 = q.reparam(&eps);
        let (zk, ld) = chain_forward_values(&steps, &z0).unwrap();
        assert_eq!(zk, z0);
        let v = q.log_prob(&z0) - ld - p.log_prob(&zk);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - q.kl(&p)).abs() < 4.0 * se, "{mean} vs {}", q.kl(&p));
}

/// All-pairs physical distance plus union-find.
fn cluster_oracle(masks: &[Mask], sp: Spacing) -> Vec<Vec<usize>> {
    let n = masks.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    let s = sp.per_axis();
    let thr = sp.max();
    for i in 0..n {
        for j in i + 1..n {
            let close = masks[i].coords().iter().any(|a| {
                masks[j].coords().iter().any(|b| {
                    let d2: f64 = (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum();
                    d2.sqrt() <= thr + 1e-12
                })
            });
            if close {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        match groups.iter_mut().find(|g| find(&mut parent.clone(), g[0]) == r) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

#[test]
fn clustering_matches_union_find_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let grid = [rng.random_range(2..6), rng.random_range(3..9), rng.random_range(3..9)];
        let sp = Spacing::new(
            rng.random_range(0.5f32..2.5),
            rng.random_range(0.4f32..1.0),
            rng.random_range(0.4f32..1.0),
        );
        let n = rng.random_range(1..7);
        let masks: Vec<Mask> = (0..n)
            .map(|_| {
                let c = [rng.random_range(0..grid[0]), rng.random_range(0..grid[1]), rng.random_range(0..grid[2])];
                let r = rng.random_range(0..2);
                Mask::from_fn(grid, |z, y, x| {
                    z.abs_diff(c[0]) <= r / 2 && y.abs_diff(c[1]) <= r && x.abs_diff(c[2]) <= r
                })
            })
            .collect();
        assert_eq!(cluster_annotations(&masks, sp).unwrap(), cluster_oracle(&masks, sp));
    }
}

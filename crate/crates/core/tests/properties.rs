use fgasl_core::config::FilterGranularity;
use fgasl_core::dualteacher::{
    acceptance_mask, entropy_map, fuse_predictions, fused_uncertainty, update_threshold, ThresholdState,
};
use fgasl_core::evalmetrics::{asd, dice, hd95, jaccard};
use fgasl_core::gaa::{aggregate, update_weights, AggregationState};
use fgasl_core::segnet::{Architecture, ModelParams};
use fgasl_core::tensor::{Mask, Tensor};
use proptest::prelude::*;

/// Weight update written out longhand with index loops.
fn reference_update(prev: &[f64], gaps: &[f64], dr: f64, floor: f64) -> Vec<f64> {
    let k = gaps.len();
    let mut mu = 0.0;
    for i in 0..k {
        mu += gaps[i];
    }
    mu /= k as f64;
    let mut max_dev = gaps[0] - mu;
    for i in 1..k {
        if gaps[i] - mu > max_dev {
            max_dev = gaps[i] - mu;
        }
    }
    let mut equal = true;
    for i in 1..k {
        if gaps[i] != gaps[0] {
            equal = false;
        }
    }
    if equal || max_dev <= 0.0 {
        return prev.to_vec();
    }
    let mut raw = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..k {
        let a = (gaps[i] - mu) * dr / max_dev + prev[i];
        raw[i] = if a < floor { floor } else { a };
        total += raw[i];
    }
    for v in raw.iter_mut() {
        *v /= total;
    }
    raw
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn gaa_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, usize, f64)> {
    (2usize..=6).prop_flat_map(|k| {
        (
            simplex(k),
            prop::collection::vec(0.0f64..2.0, k),
            2usize..200,
            0.0f64..1.0,
            0.01f64..0.5,
        )
            .prop_map(|(prev, gaps, total, frac, d)| {
                let round = ((total - 1) as f64 * frac) as usize;
                (prev, gaps, total, round, d)
            })
    })
}

fn state(prev: Vec<f64>, total: usize, round: usize, d: f64) -> AggregationState {
    let mut s = AggregationState::new(prev.len(), total, d, 1e-3).unwrap();
    s.weights = prev;
    s.round = round;
    s
}

fn masks(size: usize) -> impl Strategy<Value = (Mask, Mask)> {
    let n = size * size;
    (prop::collection::vec(0u8..3, n), prop::collection::vec(0u8..3, n))
        .prop_map(move |(a, b)| (Mask::new(size, a).unwrap(), Mask::new(size, b).unwrap()))
}

/// A mask with class 1 on the pixels of `cells` shifted by `(dy, dx)`.
fn shape_mask(size: usize, cells: &[(usize, usize)], dy: usize, dx: usize) -> Mask {
    let mut m = Mask::empty(size);
    for &(y, x) in cells {
        m.set(y + dy, x + dx, 1);
    }
    m
}

fn distributions(n: usize, c: usize, plane: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.001f64..1.0, n * c * plane).prop_map(move |mut v| {
        for b in 0..n {
            for i in 0..plane {
                let s: f64 = (0..c).map(|ch| v[(b * c + ch) * plane + i]).sum();
                for ch in 0..c {
                    v[(b * c + ch) * plane + i] /= s;
                }
            }
        }
        Tensor::from_vec([n, c, 1, plane], v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weight_update_matches_reference((prev, gaps, total, round, d) in gaa_instance()) {
        let s = state(prev.clone(), total, round, d);
        let dr = (1.0 - (round + 1) as f64 / total as f64) * d;
        let got = update_weights(&s, &gaps).unwrap();
        let want = reference_update(&prev, &gaps, dr, 1e-3);
        for (a, b) in got.weights.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        prop_assert_eq!(got.round, round + 1);
    }

    #[test]
    fn weights_stay_on_simplex((prev, gaps, total, round, d) in gaa_instance()) {
        let s = state(prev, total, round, d);
        let got = update_weights(&s, &gaps).unwrap();
        let sum: f64 = got.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        // Every raw weight is floored before normalization, so each share is
        // at least the floor over the raw total.
        let mu = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let max_dev = gaps.iter().map(|g| g - mu).fold(f64::NEG_INFINITY, f64::max);
        let raw_total = if max_dev > 0.0 {
            let dr = (1.0 - (round + 1) as f64 / total as f64) * d;
            gaps.iter().zip(&s.weights).map(|(g, a)| ((g - mu) * dr / max_dev + a).max(1e-3)).sum()
        } else {
            1.0
        };
        prop_assert!(got.weights.iter().all(|&w| w >= 1e-3 / raw_total * (1.0 - 1e-12)));
    }

    #[test]
    fn largest_gap_gains_smallest_loses((prev, gaps, total, round, d) in gaa_instance()) {
        let k = gaps.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| gaps[a].total_cmp(&gaps[b]));
        let (lo, hi) = (order[0], order[k - 1]);
        prop_assume!(gaps[hi] > gaps[order[k - 2]] && gaps[lo] < gaps[order[1]]);
        let mu = gaps.iter().sum::<f64>() / k as f64;
        prop_assert!(gaps[hi] - mu >= 0.0);
        prop_assert!(gaps[lo] - mu <= 0.0);
        // Without clamping the raw updates sum to zero, so the normalized
        // weights move by exactly the raw update.
        let dr = (1.0 - (round + 1) as f64 / total as f64) * d;
        let max_dev = gaps[hi] - mu;
        let clamped = (0..k).any(|i| (gaps[i] - mu) * dr / max_dev + prev[i] < 1e-3);
        if !clamped {
            let got = update_weights(&state(prev.clone(), total, round, d), &gaps).unwrap();
            prop_assert!(got.weights[hi] >= prev[hi] - 1e-15);
            prop_assert!(got.weights[lo] <= prev[lo] + 1e-15);
        }
    }

    #[test]
    fn equal_gaps_are_a_no_op(prev in simplex(4), g in 0.0f64..3.0, round in 0usize..9) {
        let s = state(prev.clone(), 10, round, 0.1);
        prop_assert_eq!(update_weights(&s, &[g; 4]).unwrap().weights, prev);
    }

    #[test]
    fn dice_and_jaccard_agree((a, b) in masks(6), class in 0u8..3) {
        let d = dice(&a, &b, class).unwrap();
        let j = jaccard(&a, &b, class).unwrap();
        prop_assert!((j - d / (2.0 - d)).abs() <= 1e-12);
    }

    #[test]
    fn surface_distances_are_symmetric((a, b) in masks(7), class in 1u8..3) {
        prop_assert_eq!(hd95(&a, &b, class).unwrap().to_bits(), hd95(&b, &a, class).unwrap().to_bits());
        prop_assert_eq!(asd(&a, &b, class).unwrap().to_bits(), asd(&b, &a, class).unwrap().to_bits());
    }

    #[test]
    fn surface_distances_ignore_translation(
        a in prop::collection::vec((0usize..5, 0usize..5), 1..12),
        b in prop::collection::vec((0usize..5, 0usize..5), 1..12),
        dy in 0usize..6,
        dx in 0usize..6,
    ) {
        // Shapes live in a 5×5 window kept one pixel clear of every edge.
        let size = 12;
        let (a0, b0) = (shape_mask(size, &a, 1, 1), shape_mask(size, &b, 1, 1));
        let (a1, b1) = (shape_mask(size, &a, 1 + dy, 1 + dx), shape_mask(size, &b, 1 + dy, 1 + dx));
        prop_assert_eq!(hd95(&a0, &b0, 1).unwrap().to_bits(), hd95(&a1, &b1, 1).unwrap().to_bits());
        prop_assert_eq!(asd(&a0, &b0, 1).unwrap().to_bits(), asd(&a1, &b1, 1).unwrap().to_bits());
    }

    #[test]
    fn raising_threshold_never_rejects(u in prop::collection::vec(0.0f64..2.0, 16), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        for g in [FilterGranularity::Pixel, FilterGranularity::Image] {
            let a = acceptance_mask(&u, lo, g, 4);
            let b = acceptance_mask(&u, hi, g, 4);
            prop_assert!(a.iter().zip(&b).all(|(&x, &y)| !x || y));
        }
    }

    #[test]
    fn equal_teachers_fuse_to_themselves(p in distributions(2, 3, 5)) {
        prop_assert_eq!(fuse_predictions(&p, &p).unwrap(), p.clone());
        prop_assert_eq!(fused_uncertainty(&p, &p, 1e-8).unwrap(), entropy_map(&p, 1e-8));
    }

    #[test]
    fn threshold_converges_geometrically(v in 0.0f64..3.0, pi in 0.05f64..0.99, n in 1usize..200) {
        let mut s = ThresholdState::new(pi, 0.1, 0.3, n, 1e-8).with_initial(0.0);
        for _ in 0..n {
            s = update_threshold(&s, v);
        }
        prop_assert!((s.t_un - v * (1.0 - pi.powi(n as i32))).abs() <= 1e-9);
        prop_assert_eq!(s.step, n);
    }

    #[test]
    fn params_round_trip(seed in any::<u64>()) {
        let arch = Architecture::small(8, 3);
        let p = arch.init(seed);
        let back = ModelParams::new(p.values().to_vec(), p.manifest().clone()).unwrap();
        prop_assert_eq!(back.fingerprint(), p.fingerprint());
        prop_assert!(arch.check_params(&back).is_ok());
        let avg = aggregate(&[&p, &back], &[0.5, 0.5]).unwrap();
        prop_assert_eq!(avg.values(), p.values());
    }
}

#[test]
fn worked_weight_updates() {
    let w = fgasl_core::gaa::reweight(&[1.0 / 3.0; 3], &[0.3, 0.1, 0.2], 0.1, 1e-3).unwrap();
    for (a, b) in w.iter().zip([0.433333333333, 0.233333333333, 0.333333333333]) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let w = fgasl_core::gaa::reweight(&[0.05, 0.95], &[0.0, 1.0], 0.2, 1e-3).unwrap();
    assert!((w[0] - 0.001 / 1.151).abs() < 1e-15);
    assert!((w[1] - 1.15 / 1.151).abs() < 1e-15);
    assert!((w[0] - 0.000869).abs() < 5e-7 && (w[1] - 0.999131).abs() < 5e-7);
}

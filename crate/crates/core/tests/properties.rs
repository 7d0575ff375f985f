//! Property tests for the invariances and round trips the rest of the system relies on.

use std::collections::BTreeSet;

use nalgebra::{Rotation3, Unit, Vector3};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptprobe::attn::extract_correspondences_from_attention;
use ptprobe::geom::{Pointmap, Pose};
use ptprobe::harness::{
    ActivationTrace, AttnKey, AttnKind, Position, ProbeLocation, ProbePoint, Sublayer, View,
};
use ptprobe::metrics::{aligned_second_view_error, scale_shift_invariant_error, weighted_procrustes};
use ptprobe::probe::{confidence_regression_loss, Reduction};
use ptprobe::scene::{generate_scene_pair, SceneConfig};

fn view() -> impl Strategy<Value = View> {
    prop_oneof![Just(View::First), Just(View::Second)]
}

fn sublayer() -> impl Strategy<Value = Sublayer> {
    prop_oneof![Just(Sublayer::SelfAttention), Just(Sublayer::CrossAttention), Just(Sublayer::Mlp)]
}

fn probe_point() -> impl Strategy<Value = ProbePoint> {
    let decoder = (0usize..100, sublayer(), any::<bool>()).prop_map(|(block, sublayer, post)| ProbeLocation::Decoder {
        block,
        sublayer,
        position: if post { Position::PostSkip } else { Position::PreSkip },
    });
    let location = prop_oneof![Just(ProbeLocation::EncoderOutput), decoder];
    (view(), location).prop_map(|(view, location)| ProbePoint { view, location })
}

fn pointmap(rng: &mut ChaCha8Rng, h: usize, w: usize, conf: bool) -> Pointmap {
    let points = Array3::from_shape_fn((h, w, 3), |(_, _, k)| if k == 2 { rng.random_range(1.0..5.0) } else { rng.random_range(-2.0..2.0) });
    let c = conf.then(|| Array2::from_shape_fn((h, w), |_| rng.random_range(1.0..3.0)));
    Pointmap::new(points, c, Array2::from_elem((h, w), true)).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
    let r = Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1));
    Pose { rotation: r.into_inner(), translation: Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probe_point_strings_round_trip(p in probe_point()) {
        let s = p.to_string();
        prop_assert_eq!(s.parse::<ProbePoint>().unwrap(), p);
        let json = serde_json::to_string(&p).unwrap();
        prop_assert_eq!(json, format!("\"{s}\""));
    }

    #[test]
    fn attn_key_strings_round_trip(view in view(), block in 0usize..64, ca in any::<bool>(), head in 0usize..64) {
        let kind = if ca { AttnKind::CrossAttention } else { AttnKind::SelfAttention };
        let k = AttnKey { view, block, kind, head };
        prop_assert_eq!(k.to_string().parse::<AttnKey>().unwrap(), k);
    }

    #[test]
    fn ss_inv_error_ignores_common_scale_and_per_view_depth_shift(
        seed in any::<u64>(), a in 0.05f64..20.0, b1 in -5.0f64..5.0, b2 in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = [pointmap(&mut rng, 3, 4, false), pointmap(&mut rng, 3, 4, false)];
        let shifted = |pm: &Pointmap, b: f64| pm.map_points(|p| p * a + Vector3::new(0.0, 0.0, b));
        let t = [shifted(&g[0], b1), shifted(&g[1], b2)];
        let e = scale_shift_invariant_error([&t[0], &t[1]], [&g[0], &g[1]]).unwrap();
        prop_assert!(e.total <= 1e-9, "{}", e.total);

        let p = [pointmap(&mut rng, 3, 4, false), pointmap(&mut rng, 3, 4, false)];
        let tp = [shifted(&p[0], b1), shifted(&p[1], b2)];
        let before = scale_shift_invariant_error([&p[0], &p[1]], [&g[0], &g[1]]).unwrap().total;
        let after = scale_shift_invariant_error([&tp[0], &tp[1]], [&g[0], &g[1]]).unwrap().total;
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
    }

    #[test]
    fn loss_ignores_per_view_positive_scaling(seed in any::<u64>(), s1 in 0.01f64..100.0, s2 in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = [pointmap(&mut rng, 2, 3, true), pointmap(&mut rng, 2, 3, true)];
        let g = [pointmap(&mut rng, 2, 3, false), pointmap(&mut rng, 2, 3, false)];
        let l = confidence_regression_loss([&p[0], &p[1]], [&g[0], &g[1]], 0.2, Reduction::Sum).unwrap();
        let sp = [p[0].map_points(|x| x * s1), p[1].map_points(|x| x * s2)];
        let ls = confidence_regression_loss([&sp[0], &sp[1]], [&g[0], &g[1]], 0.2, Reduction::Sum).unwrap();
        prop_assert!((l - ls).abs() <= 1e-9 * l.abs().max(1.0), "{} vs {}", l, ls);
        let sg = [g[0].map_points(|x| x * s2), g[1].map_points(|x| x * s1)];
        let lg = confidence_regression_loss([&p[0], &p[1]], [&sg[0], &sg[1]], 0.2, Reduction::Sum).unwrap();
        prop_assert!((l - lg).abs() <= 1e-9 * l.abs().max(1.0));
    }

    #[test]
    fn correspondence_extraction_ignores_monotone_row_transforms(
        seed in any::<u64>(), shifts in proptest::collection::vec(0u32..8, 16), square in any::<bool>(),
    ) {
        // Dyadic values keep every transform exact in f32, so ties are preserved too.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((16, 16), |_| rng.random_range(0u32..64) as f32 / 64.0);
        let mut b = a.clone();
        for (r, mut row) in b.rows_mut().into_iter().enumerate() {
            let k = shifts[r];
            row.mapv_inplace(|x| {
                let y = if square { x * x } else { x };
                y * 4.0 + k as f32
            });
        }
        let key = AttnKey { view: View::Second, block: 0, kind: AttnKind::CrossAttention, head: 0 };
        let trace = |m: Array2<f32>| {
            let mut t = ActivationTrace { patch_grid: (4, 4), ..Default::default() };
            t.attention.insert(key, m);
            t
        };
        let queries: BTreeSet<usize> = (0..16).collect();
        let ca = extract_correspondences_from_attention(&trace(a), View::Second, 0, 0, &queries, 8).unwrap();
        let cb = extract_correspondences_from_attention(&trace(b), View::Second, 0, 0, &queries, 8).unwrap();
        prop_assert_eq!(ca, cb);
    }
}

#[test]
fn procrustes_recovers_random_rigid_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let dst: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let truth = random_pose(&mut rng);
        let src: Vec<Vector3<f64>> = dst.iter().map(|p| truth.apply(p)).collect();
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.5..2.0)).collect();
        let got = weighted_procrustes(&src, &dst, &w, false).unwrap().pose;
        assert!((got.rotation - truth.rotation).abs().max() < 1e-6);
        assert!((got.translation - truth.translation).abs().max() < 1e-6);
    }
}

#[test]
fn zero_weight_outliers_change_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..50 {
        let dst: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let truth = random_pose(&mut rng);
        let src: Vec<Vector3<f64>> = dst.iter().map(|p| truth.apply(p) + Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01))).collect();
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.5..2.0)).collect();
        let clean = weighted_procrustes(&src, &dst, &w, false).unwrap();
        let (mut s, mut d, mut ww) = (src.clone(), dst.clone(), w.clone());
        for _ in 0..4 {
            s.push(Vector3::from_fn(|_, _| rng.random_range(-100.0..100.0)));
            d.push(Vector3::from_fn(|_, _| rng.random_range(-100.0..100.0)));
            ww.push(0.0);
        }
        assert_eq!(weighted_procrustes(&s, &d, &ww, false).unwrap(), clean);
    }
}

#[test]
fn aligned_error_vanishes_for_rigid_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for seed in 0..10 {
        let pair = generate_scene_pair(seed, &SceneConfig::default()).unwrap();
        let gt2 = &pair.gt_pointmaps[1];
        let mut pred = gt2.transformed(&random_pose(&mut rng));
        pred.confidence = Some(Array2::from_shape_fn(gt2.valid.dim(), |_| rng.random_range(1.0..3.0)));
        let e = aligned_second_view_error(&pred, gt2).unwrap();
        assert!(e.mean < 1e-6, "{}", e.mean);
    }
}

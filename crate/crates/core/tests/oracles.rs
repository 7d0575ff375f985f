//! Library results checked against independent reimplementations written with plain
//! scalar loops, and analytic gradients against central finite differences.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptprobe::geom::{Pointmap, Pose};
use ptprobe::metrics::{layer_contribution, weighted_procrustes};
use ptprobe::probe::{confidence_regression_loss, depth_loss, view_loss, Reduction};
use ptprobe::scene::{generate_scene_pair, patchify_correspondences, SceneConfig};
use ptprobe::harness::Sublayer;

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Straight transcription of the two-view loss over valid pixels.
fn scalar_loss(pred: &[Vec<[f64; 3]>; 2], conf: &[Vec<f64>; 2], gt: &[Vec<[f64; 3]>; 2], alpha: f64) -> f64 {
    let mut total = 0.0;
    for v in 0..2 {
        let n = gt[v].len() as f64;
        let z: f64 = pred[v].iter().map(|p| norm(*p)).sum::<f64>() / n;
        let zg: f64 = gt[v].iter().map(|p| norm(*p)).sum::<f64>() / n;
        for i in 0..gt[v].len() {
            let d = [
                pred[v][i][0] / z - gt[v][i][0] / zg,
                pred[v][i][1] / z - gt[v][i][1] / zg,
                pred[v][i][2] / z - gt[v][i][2] / zg,
            ];
            total += conf[v][i] * norm(d) - alpha * conf[v][i].ln();
        }
    }
    total
}

struct Fixture {
    pred: [Pointmap; 2],
    gt: [Pointmap; 2],
}

fn fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
    let mk = |rng: &mut ChaCha8Rng, conf: bool| {
        let points = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(-3.0..3.0));
        let mut valid = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.8));
        valid[[0, 0]] = true;
        let c = conf.then(|| Array2::from_shape_fn((h, w), |_| 1.0 + rng.random_range(0.0..4.0)));
        Pointmap::new(points, c, valid).unwrap()
    };
    let gt = [mk(rng, false), mk(rng, false)];
    let mut pred = [mk(rng, true), mk(rng, true)];
    for v in 0..2 {
        pred[v].valid = gt[v].valid.clone();
    }
    Fixture { pred, gt }
}

fn flat(pm: &Pointmap, mask: &Array2<bool>) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut p = Vec::new();
    let mut c = Vec::new();
    for ((y, x), &ok) in mask.indexed_iter() {
        if ok {
            p.push([pm.points[[y, x, 0]], pm.points[[y, x, 1]], pm.points[[y, x, 2]]]);
            c.push(pm.confidence.as_ref().map_or(1.0, |m| m[[y, x]]));
        }
    }
    (p, c)
}

#[test]
fn loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let f = fixture(&mut rng);
        let alpha = rng.random_range(0.0..1.0);
        let (p1, c1) = flat(&f.pred[0], &f.gt[0].valid);
        let (p2, c2) = flat(&f.pred[1], &f.gt[1].valid);
        let (g1, _) = flat(&f.gt[0], &f.gt[0].valid);
        let (g2, _) = flat(&f.gt[1], &f.gt[1].valid);
        let expected = scalar_loss(&[p1, p2], &[c1, c2], &[g1, g2], alpha);
        let got = confidence_regression_loss([&f.pred[0], &f.pred[1]], [&f.gt[0], &f.gt[1]], alpha, Reduction::Sum).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
        let n = (f.gt[0].valid_count() + f.gt[1].valid_count()) as f64;
        let mean = confidence_regression_loss([&f.pred[0], &f.pred[1]], [&f.gt[0], &f.gt[1]], alpha, Reduction::Mean).unwrap();
        assert!((mean - expected / n).abs() <= 1e-9 * (expected / n).abs().max(1.0));
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn view_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(1..7);
        let pred: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect();
        let gt: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect();
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..4.0)).collect();
        let alpha = 0.2;
        let l = view_loss(&pred, &conf, &gt, alpha, true).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for a in 0..3 {
                let (mut up, mut dn) = (pred.clone(), pred.clone());
                up[i][a] += h;
                dn[i][a] -= h;
                let fd = (view_loss(&up, &conf, &gt, alpha, false).unwrap().value
                    - view_loss(&dn, &conf, &gt, alpha, false).unwrap().value)
                    / (2.0 * h);
                assert!(rel_close(l.d_pred[i][a], fd, 1e-4), "d_pred[{i}][{a}] {} vs {fd}", l.d_pred[i][a]);
            }
            let (mut up, mut dn) = (conf.clone(), conf.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (view_loss(&pred, &up, &gt, alpha, false).unwrap().value - view_loss(&pred, &dn, &gt, alpha, false).unwrap().value)
                / (2.0 * h);
            assert!(rel_close(l.d_conf[i], fd, 1e-4), "d_conf[{i}] {} vs {fd}", l.d_conf[i]);
        }
    }
}

#[test]
fn depth_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 8;
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..6.0)).collect();
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
    let conf: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..3.0)).collect();
    let l = depth_loss(&raw, &conf, &gt, 0.2, 4.0, true).unwrap();
    let h = 1e-6;
    for i in 0..n {
        let (mut up, mut dn) = (raw.clone(), raw.clone());
        up[i] += h;
        dn[i] -= h;
        let fd = (depth_loss(&up, &conf, &gt, 0.2, 4.0, false).unwrap().value - depth_loss(&dn, &conf, &gt, 0.2, 4.0, false).unwrap().value)
            / (2.0 * h);
        assert!(rel_close(l.d_pred[i][0], fd, 1e-4));
    }
}

/// Horn's closed-form absolute orientation: the rotation is the top eigenvector of a 4×4
/// symmetric matrix built from the weighted cross-covariance.
fn horn(src: &[Vector3<f64>], dst: &[Vector3<f64>], w: &[f64]) -> Pose {
    let ws: f64 = w.iter().sum();
    let ms = src.iter().zip(w).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / ws;
    let md = dst.iter().zip(w).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / ws;
    let mut s = Matrix3::zeros();
    for i in 0..src.len() {
        s += w[i] * (dst[i] - md) * (src[i] - ms).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = n.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(k);
    let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
    Pose { rotation: r, translation: ms - r * md }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(-3.1..3.1));
    Pose { rotation: r.into_inner(), translation: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)) }
}

#[test]
fn procrustes_agrees_with_horn() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let dst: Vec<Vector3<f64>> = (0..12).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let truth = random_pose(&mut rng);
        let src: Vec<Vector3<f64>> =
            dst.iter().map(|p| truth.apply(p) + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
        let a = weighted_procrustes(&src, &dst, &w, false).unwrap().pose;
        let b = horn(&src, &dst, &w);
        assert!((a.rotation - b.rotation).abs().max() < 1e-9);
        assert!((a.translation - b.translation).abs().max() < 1e-9);
    }
}

/// Per-patch vote counting written independently of the library.
fn brute_force_votes(pc: &[((usize, usize), (usize, usize))], p: usize, cols: usize, rows: usize) -> Vec<Option<(usize, usize)>> {
    let n = rows * cols;
    let mut counts = vec![vec![0usize; n]; n];
    for &((u2, v2), (u1, v1)) in pc {
        counts[(v2 / p) * cols + u2 / p][(v1 / p) * cols + u1 / p] += 1;
    }
    counts
        .iter()
        .map(|row| {
            let best = *row.iter().max().unwrap();
            (best > 0).then(|| (row.iter().position(|&c| c == best).unwrap(), best))
        })
        .collect()
}

#[test]
fn patchify_matches_brute_force() {
    let cfg = SceneConfig::default();
    let (rows, cols) = cfg.grid();
    for seed in 0..10 {
        let pair = generate_scene_pair(1000 + seed, &cfg).unwrap();
        let pcs = patchify_correspondences(&pair.pixel_correspondences, cfg.patch_size, (cfg.height, cfg.width)).unwrap();
        let brute = brute_force_votes(&pair.pixel_correspondences, cfg.patch_size, cols, rows);
        for (i, b) in brute.iter().enumerate() {
            assert_eq!(pcs.pairs.get(&i).map(|m| (m.first, m.support)), *b, "patch {i}");
        }
    }
}

#[test]
fn layer_contribution_by_hand() {
    let c = layer_contribution(&[10.0, 8.0, 4.0, 5.0], &[Sublayer::SelfAttention, Sublayer::CrossAttention, Sublayer::Mlp]).unwrap();
    assert_eq!(c.per_layer, vec![-20.0, -50.0, 25.0]);
    assert_eq!(c.per_type[&Sublayer::SelfAttention], -20.0);
    assert_eq!(c.per_type[&Sublayer::CrossAttention], -40.0);
    assert_eq!(c.per_type[&Sublayer::Mlp], 10.0);
}

#[test]
fn patchify_matches_brute_force_on_random_pixel_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let (p, rows, cols) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let (h, w) = (rows * p, cols * p);
        let n = rng.random_range(0..200);
        let pc: Vec<_> = (0..n)
            .map(|_| {
                ((rng.random_range(0..w), rng.random_range(0..h)), (rng.random_range(0..w), rng.random_range(0..h)))
            })
            .collect();
        let got = patchify_correspondences(&pc, p, (h, w)).unwrap();
        let brute = brute_force_votes(&pc, p, cols, rows);
        for (i, b) in brute.iter().enumerate() {
            assert_eq!(got.pairs.get(&i).map(|m| (m.first, m.support)), *b);
        }
    }
}

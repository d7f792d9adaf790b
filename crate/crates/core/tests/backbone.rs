mod common;

use common::tiny_backbone;
use partgda::backbone::{Backbone, BackboneConfig, GaBlock, Payload, PvcBlock, ScBlock, VoxelPlan};
use partgda::diffusion::standard_normal;
use partgda::geometry::Mat;
use partgda::tape::check::check_params;
use partgda::tape::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_cloud(r: &mut ChaCha8Rng, n: usize) -> Mat {
    Mat::from_shape_simple_fn((n, 3), || r.random_range(-0.9..0.9))
}

fn one_hot_rows(r: &mut ChaCha8Rng, n: usize, c: usize) -> Mat {
    let mut y = Mat::zeros((n, c));
    for mut row in y.rows_mut() {
        row[r.random_range(0..c)] = 1.0;
    }
    y
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sc_with_zero_embed_weights_ignores_conditioning() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let sc = ScBlock::new(&mut store, "sc", 6, 3, &mut r).unwrap();
    let mut w = store.value(sc.fuse.weight).clone();
    w.slice_mut(ndarray::s![6.., ..]).fill(0.0);
    store.set("sc.fuse.weight", w).unwrap();
    let f = standard_normal(&mut r, (10, 6));
    let run = |e: Mat| {
        let mut tape = Tape::new();
        let (fv, ev) = (tape.constant(f.clone()), tape.constant(e));
        let out = sc.forward(&mut tape, &store, fv, ev).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run(standard_normal(&mut r, (10, 3))), run(standard_normal(&mut r, (10, 3))));
}

#[test]
fn sc_conditioning_change_stays_in_its_row() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let sc = ScBlock::new(&mut store, "sc", 6, 3, &mut r).unwrap();
    let f = standard_normal(&mut r, (10, 6));
    let e = standard_normal(&mut r, (10, 3));
    let mut e2 = e.clone();
    e2[[4, 1]] += 1.0;
    let run = |e: &Mat| {
        let mut tape = Tape::new();
        let (fv, ev) = (tape.constant(f.clone()), tape.constant(e.clone()));
        let out = sc.forward(&mut tape, &store, fv, ev).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(&e), run(&e2));
    for i in 0..10 {
        let differs = a.row(i) != b.row(i);
        assert_eq!(differs, i == 4, "row {i}");
    }
    let mut tape = Tape::new();
    let (fv, ev) = (tape.constant(f), tape.constant(Mat::zeros((9, 3))));
    assert!(sc.forward(&mut tape, &store, fv, ev).is_err());
}

#[test]
fn attention_on_one_point_is_residual_plus_value_projection() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let ga = GaBlock::new(&mut store, "ga", 8, 2, &mut r).unwrap();
    let f = standard_normal(&mut r, (1, 8));
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let (out, _) = ga.forward(&mut tape, &store, fv, 1);
    let v = ga.v.forward(&mut tape, &store, fv);
    let o = ga.o.forward(&mut tape, &store, v);
    let expect = tape.value(o) + &f;
    assert!(max_abs_diff(tape.value(out), &expect) < 1e-12);
}

#[test]
fn attention_weights_are_normalised_and_equivariant() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let ga = GaBlock::new(&mut store, "ga", 8, 2, &mut r).unwrap();
    let f = standard_normal(&mut r, (40, 8));
    let mut perm: Vec<usize> = (0..20).collect();
    perm.shuffle(&mut r);
    perm.extend((20..40).rev());
    let run = |f: &Mat| {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let (out, a) = ga.forward(&mut tape, &store, fv, 20);
        for w in tape.attention_weights(a).unwrap() {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        tape.value(out).clone()
    };
    let direct = run(&f);
    let permuted = run(&Mat::from_shape_fn((40, 8), |(i, j)| f[[perm[i], j]]));
    let expect = Mat::from_shape_fn((40, 8), |(i, j)| direct[[perm[i], j]]);
    assert!(max_abs_diff(&permuted, &expect) < 1e-5);
}

#[test]
fn coincident_points_share_one_voxel_value() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let pvc = PvcBlock::new(&mut store, "pvc", 6, 0, 4, None, &mut r).unwrap();
    let pos = Mat::from_shape_fn((7, 3), |(_, j)| [0.1, -0.3, 0.6][j]);
    let f = standard_normal(&mut r, (7, 6));
    let plan = VoxelPlan::new(&pos, 4, 1);
    let mut tape = Tape::new();
    let (pv, fv) = (tape.constant(pos), tape.constant(f));
    let v = pvc.voxel_branch(&mut tape, &store, pv, fv, &plan);
    let v = tape.value(v);
    for i in 1..7 {
        assert!(v.row(i).iter().zip(v.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn zeroed_voxel_branch_leaves_the_point_branch() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let pvc = PvcBlock::new(&mut store, "pvc", 6, 2, 4, Some(3), &mut r).unwrap();
    let w = store.value(pvc.conv_weight).dim();
    store.set("pvc.conv.weight", Mat::zeros(w)).unwrap();
    let pos = uniform_cloud(&mut r, 30);
    let f = standard_normal(&mut r, (30, 6));
    let z = standard_normal(&mut r, (30, 2));
    let plan = VoxelPlan::new(&pos, 4, 1);
    let mut tape = Tape::new();
    let (pv, fv, zv) = (tape.constant(pos), tape.constant(f.clone()), tape.constant(z));
    let out = pvc.forward(&mut tape, &store, pv, fv, Some(zv), &plan);
    let u = tape.concat(&[fv, zv]);
    let p = pvc.point.forward(&mut tape, &store, u);
    let p = tape.silu(p);
    let expect = tape.value(p) + &f;
    assert!(max_abs_diff(tape.value(out), &expect) < 1e-12);
}

fn run_backbone(net: &Backbone, store: &ParamStore, pos: &Mat, feat: &Mat, y: &Mat, batch: usize) -> Mat {
    let mut tape = Tape::new();
    let (p, f) = (tape.constant(pos.clone()), tape.constant(feat.clone()));
    let payload = Payload { y, z: None, t: None };
    let out = net.forward(&mut tape, store, p, f, &payload, batch).unwrap();
    tape.value(out).clone()
}

#[test]
fn backbone_shape_and_permutation_equivariance() {
    let mut r = rng(7);
    let cfg = BackboneConfig::desk(3, 5, 3);
    let mut store = ParamStore::new();
    let net = Backbone::new(cfg, &mut store, "net", &mut r).unwrap();
    for n in [128, 160] {
        let pos = uniform_cloud(&mut r, n);
        let y = one_hot_rows(&mut r, n, 3);
        let out = run_backbone(&net, &store, &pos, &pos, &y, 1);
        assert_eq!(out.dim(), (n, 5));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pick = |m: &Mat| Mat::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], j]]);
        let permuted = run_backbone(&net, &store, &pick(&pos), &pick(&pos), &pick(&y), 1);
        assert!(max_abs_diff(&permuted, &pick(&out)) < 1e-4);
    }
}

#[test]
fn labels_change_the_output_of_a_fresh_backbone() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let net = Backbone::new(BackboneConfig::desk(3, 4, 3), &mut store, "net", &mut r).unwrap();
    let pos = uniform_cloud(&mut r, 128);
    let padded = run_backbone(&net, &store, &pos, &pos, &Mat::zeros((128, 3)), 1);
    let labeled = run_backbone(&net, &store, &pos, &pos, &one_hot_rows(&mut r, 128, 3), 1);
    assert!((&padded - &labeled).mapv(|v| v * v).sum().sqrt() > 0.0);
}

#[test]
fn extreme_finite_inputs_stay_finite() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let net = Backbone::new(BackboneConfig::desk(3, 4, 2), &mut store, "net", &mut r).unwrap();
    let pos = Mat::from_shape_fn((128, 3), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
    let feat = pos.mapv(|v| v * 1e3);
    let out = run_backbone(&net, &store, &pos, &feat, &one_hot_rows(&mut r, 128, 2), 1);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn backbone_gradient_matches_finite_differences() {
    let mut r = rng(10);
    let mut cfg = tiny_backbone(3, 2, 2);
    cfg.z_width = 2;
    cfg.t_embed = 4;
    let mut store = ParamStore::new();
    let net = Backbone::new(cfg, &mut store, "net", &mut r).unwrap();
    assert!(store.numel() <= 5000);
    let pos = uniform_cloud(&mut r, 32);
    let y = one_hot_rows(&mut r, 32, 2);
    let z = standard_normal(&mut r, (2, 2));
    let target = standard_normal(&mut r, (32, 2));
    let t = [3usize, 17];
    let report = check_params(
        &store,
        |s, tape| {
            let p = tape.constant(pos.clone());
            let zv = tape.constant(z.clone());
            let payload = Payload { y: &y, z: Some(zv), t: Some(&t) };
            let out = net.forward(tape, s, p, p, &payload, 2).unwrap();
            let goal = tape.constant(target.clone());
            let d = tape.sub(out, goal);
            let sq = tape.square(d);
            tape.mean(sq)
        },
        1e-5,
        6,
        1e-6,
    );
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

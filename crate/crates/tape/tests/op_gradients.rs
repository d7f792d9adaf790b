use std::rc::Rc;

use partgda_tape::{ConvPlan, Mat, Tape, TrilinearCache, Var, VoxelFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Checks d loss / d input for every input against central differences.
fn check_inputs(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let eval = |ins: &[Mat]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|m| t.constant(m.clone())).collect();
        let r = build(&mut t, &vs);
        t.scalar(r)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, m) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Mat::zeros(m.dim()));
        for flat in 0..m.len() {
            let mut work = inputs.to_vec();
            work[i].as_slice_mut().unwrap()[flat] += h;
            let plus = eval(&work);
            work[i].as_slice_mut().unwrap()[flat] -= 2.0 * h;
            let minus = eval(&work);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum so every output entry carries a distinct gradient.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, r, c, 1.0));
    let p = tape.mul(v, w);
    tape.sum(p)
}

#[test]
fn dense_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 5, 4, 1.0);
    let b = random(&mut rng, 4, 3, 1.0);
    let row = random(&mut rng, 1, 3, 1.0);
    let col = random(&mut rng, 5, 1, 1.0);
    let err = check_inputs(&[a, b, row, col], |t, v| {
        let m = t.matmul(v[0], v[1]);
        let m = t.add_row(m, v[2]);
        let m = t.mul_row(m, v[2]);
        let m = t.mul_col(m, v[3]);
        let s = t.silu(m);
        let e = t.exp(s);
        let q = t.square(m);
        let c = t.concat(&[e, q, m]);
        let sl = t.slice_cols(c, 2, 5);
        let sc = t.scale(sl, 0.7);
        let o = t.offset(sc, 0.3);
        let cl = t.clamp(o, -0.8, 0.8);
        let sub = t.sub(cl, sl);
        let ad = t.add(sub, sl);
        probe(t, ad, 2)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn pooling_and_routing_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 12, 3, 1.0);
    let gather_idx = Rc::new(vec![0, 3, 3, 11, 7, 2]);
    let scatter_idx = Rc::new(vec![0, 1, 1, 2, 4, 4, 4, 0, 2, 2, 1, 0]);
    let err = check_inputs(&[a], |t, v| {
        let g = t.gather(v[0], gather_idx.clone());
        let mx = t.segment_max(v[0], 4);
        let mn = t.segment_mean(v[0], 3);
        let sc = t.scatter_mean(v[0], scatter_idx.clone(), 6);
        let p1 = probe(t, g, 4);
        let p2 = probe(t, mx, 5);
        let p3 = probe(t, mn, 6);
        let p4 = probe(t, sc, 7);
        let s = t.add(p1, p2);
        let s = t.add(s, p3);
        t.add(s, p4)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&mut rng, 10, 4, 1.0);
    let k = random(&mut rng, 10, 4, 1.0);
    let v = random(&mut rng, 10, 6, 1.0);
    let err = check_inputs(&[q, k, v], |t, x| {
        let o = t.attention(x[0], x[1], x[2], 5, 2);
        probe(t, o, 8)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&mut rng, 7, 3, 2.0);
    let targets = Rc::new(vec![0, 2, 1, 1, 0, 2, 2]);
    let err = check_inputs(&[logits], |t, x| t.softmax_xent(x[0], targets.clone()));
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn conv3d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frame = VoxelFrame::new(3, -1.0, 1.0);
    let grid = random(&mut rng, 2 * 27, 2, 1.0);
    let weight = random(&mut rng, 27 * 2, 3, 0.5);
    let plan = Rc::new(ConvPlan::new(frame, 2, vec![0, 5, 13, 26, 27, 40, 53]));
    let err = check_inputs(&[grid, weight], |t, x| {
        let o = t.conv3d(x[0], x[1], plan.clone());
        probe(t, o, 12)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn sparse_conv_rows_agree_with_dense_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let frame = VoxelFrame::new(4, -1.0, 1.0);
    let grid = random(&mut rng, 64, 3, 1.0);
    let weight = random(&mut rng, 81, 2, 1.0);
    let rows = vec![1, 17, 42, 63];
    let mut t = Tape::new();
    let g = t.constant(grid);
    let w = t.constant(weight);
    let dense = t.conv3d(g, w, Rc::new(ConvPlan::dense(frame, 1)));
    let sparse = t.conv3d(g, w, Rc::new(ConvPlan::new(frame, 1, rows.clone())));
    assert_eq!(t.shape(sparse), (4, 2));
    for (k, &r) in rows.iter().enumerate() {
        assert_eq!(t.value(sparse).row(k), t.value(dense).row(r));
    }
}

#[test]
fn compact_trilinear_matches_full_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let frame = VoxelFrame::new(4, -1.0, 1.0);
    let grid = random(&mut rng, 2 * 64, 3, 1.0);
    let coords = Mat::from_shape_fn((6, 3), |(i, j)| -0.9 + 0.31 * i as f64 + 0.07 * j as f64 + 0.011);
    let rows = TrilinearCache::new(&coords, frame, 2).touched_cells();
    let compact = Mat::from_shape_fn((rows.len(), 3), |(k, c)| grid[[rows[k], c]]);
    let mut t = Tape::new();
    let full = t.constant(grid);
    let small = t.constant(compact.clone());
    let p = t.constant(coords.clone());
    let a = t.trilinear(full, p, frame, 2);
    let b = t.trilinear_rows(small, p, frame, 2, &rows);
    assert_eq!(t.value(a), t.value(b));
    let err = check_inputs(&[compact, coords], |t, x| {
        let o = t.trilinear_rows(x[0], x[1], frame, 2, &rows);
        probe(t, o, 18)
    });
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn trilinear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let frame = VoxelFrame::new(4, -1.0, 1.0);
    let grid = random(&mut rng, 2 * 64, 3, 1.0);
    // keep coordinates away from cell boundaries where the map has kinks
    let coords = Mat::from_shape_fn((6, 3), |(i, j)| -0.9 + 0.31 * i as f64 + 0.07 * j as f64 + 0.011);
    let err = check_inputs(&[grid, coords], |t, x| {
        let o = t.trilinear(x[0], x[1], frame, 2);
        probe(t, o, 18)
    });
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn trilinear_recovers_linear_fields_exactly() {
    let frame = VoxelFrame::new(5, -1.0, 1.0);
    // field value at each cell = 2x - y + 0.5z in continuous cell units
    let grid = Mat::from_shape_fn((125, 1), |(cell, _)| {
        let (x, y, z) = (cell / 25, (cell / 5) % 5, cell % 5);
        2.0 * x as f64 - y as f64 + 0.5 * z as f64
    });
    let p = Mat::from_shape_vec((1, 3), vec![0.13, -0.42, 0.77]).unwrap();
    let mut t = Tape::new();
    let g = t.constant(grid);
    let c = t.constant(p.clone());
    let out = t.trilinear(g, c, frame, 1);
    let u = |x: f64| frame.continuous(x).0;
    let expect = 2.0 * u(0.13) - u(-0.42) + 0.5 * u(0.77);
    assert!((t.value(out)[[0, 0]] - expect).abs() < 1e-12);
    assert_eq!(TrilinearCache::new(&p, frame, 1).touched_cells().len(), 8);
}

#[test]
fn idw_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let feats = random(&mut rng, 4, 2, 1.0);
    let src = random(&mut rng, 4, 3, 1.0);
    let dst = random(&mut rng, 5, 3, 1.0);
    let nbrs = Rc::new(vec![[0, 1, 2], [1, 2, 3], [3, 0, 1], [2, 3, 0], [0, 3, 2]]);
    let err = check_inputs(&[feats, src, dst], |t, x| {
        let o = t.idw(x[0], x[1], x[2], nbrs.clone());
        probe(t, o, 20)
    });
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut t = Tape::new();
    let q = t.constant(random(&mut rng, 8, 4, 3.0));
    let k = t.constant(random(&mut rng, 8, 4, 3.0));
    let v = t.constant(random(&mut rng, 8, 4, 3.0));
    let o = t.attention(q, k, v, 4, 2);
    for p in t.attention_weights(o).unwrap() {
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

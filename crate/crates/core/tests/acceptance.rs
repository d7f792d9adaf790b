mod common;

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::time::Instant;

use common::{median, report, roc_auc, shuffle_labels, spearman, tiny_backbone, tiny_generative, tiny_vae};
use partgda::backbone::{Backbone, GaBlock, Payload, ScBlock};
use partgda::checkpoint::{generative_checkpoint, load_generative, load_segmenter, segmenter_checkpoint, Checkpoint};
use partgda::dataset::{generate_synthetic, make_split, LabeledSet, SyntheticFamily, SyntheticShapeSpec};
use partgda::diffusion::{
    default_schedule, diffuse_denoise, diffusion_loss, diffusion_loss_with, q_sample, standard_normal, DiffuseDenoiseConfig, Denoiser,
    MlpDenoiser,
};
use partgda::geometry::{per_part_voxel_iou, voxelize_per_part, Bounds, Mat, PointCloud, SegmentationEncoding};
use partgda::latent_prior::{GlobalPrior, GlobalPriorConfig, LatentStats, PointCond, PointPrior, StoreView};
use partgda::pipeline::{
    check_no_leakage, crd_scores, filter_pseudo_labels, run_experiment_with, source_id, step1_train_generative, step2_generate_variants,
    ExperimentConfig, GdaConfig, PseudoLabelRecord, METHODS,
};
use partgda::segmentation::{Segmenter, SegmenterConfig};
use partgda::tape::check::check_params;
use partgda::tape::{Adam, ParamStore, Tape, Var};
use partgda::vae::{Batch, Vae, VaeTrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Mlp<'a>(&'a MlpDenoiser, &'a ParamStore);

impl Denoiser for Mlp<'_> {
    type Cond = ();

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], _: &()) -> Var {
        self.0.predict_with(self.1, tape, x_t, t)
    }
}

#[test]
fn criterion_1_diffusion_correctness() {
    let start = Instant::now();
    let schedule = default_schedule();
    let n = 100_000;
    let x0 = Mat::from_elem((n, 1), 0.8);
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for t in [1, schedule.steps / 2, schedule.steps] {
        let eps = standard_normal(&mut r, (n, 1));
        let xt = q_sample(&x0, t, &eps, &schedule).unwrap();
        let ab = schedule.alpha_bar_at(t);
        let mean = xt.sum() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
        worst = worst
            .max((mean - ab.sqrt() * 0.8).abs() / se_mean)
            .max((var - (1.0 - ab)).abs() / se_var);
    }
    let model = MlpDenoiser::new(3, 16, 8, &mut r).unwrap();
    let x = standard_normal(&mut r, (10, 3));
    let same = diffuse_denoise(&model, &x, 10, &(), DiffuseDenoiseConfig { tau: 0, include_eta: true }, &schedule, &mut r).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 3.0 && same == x && secs < 60.0;
    report(1, "diffusion correctness", pass, &format!("max deviation {worst:.2} SE, tau=0 identity {}, {secs:.1}s", same == x));
    assert!(worst < 3.0, "marginal moments deviate by {worst} standard errors");
    assert_eq!(same, x);
    assert!(secs < 60.0);
}

#[test]
fn criterion_2_gradient_fidelity() {
    let start = Instant::now();
    let mut r = rng(2);
    let schedule = partgda::diffusion::make_schedule(50, 1e-3, 0.2).unwrap();
    let mut errors = Vec::new();

    let mlp = MlpDenoiser::new(3, 16, 8, &mut r).unwrap();
    let x0 = standard_normal(&mut r, (6, 3));
    let eps = standard_normal(&mut r, (6, 3));
    let ts = [1, 5, 10, 20, 35, 50];
    let check1 = check_params(&mlp.store, |s, tape| diffusion_loss_with(&Mlp(&mlp, s), tape, &x0, &(), &schedule, &ts, &eps).unwrap(), 1e-5, 12, 1e-6);
    errors.push(("diffusion", mlp.store.numel(), check1.max_rel_error));

    let set = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::Lollipop, 32, 5), 2).unwrap();
    let refs: Vec<_> = set.samples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let vae = Vae::new(tiny_vae(2), &mut r).unwrap();
    let mut vae_store = vae.store.clone();
    perturb(&mut vae_store, &mut r);
    let ez = standard_normal(&mut r, (2, vae.cfg.d_z));
    let eh = standard_normal(&mut r, (64, vae.cfg.d_h));
    let cfg = VaeTrainConfig::default();
    let check2 = check_params(&vae_store, |s, tape| vae.elbo_loss_with(s, tape, &batch, &cfg, &ez, &eh).unwrap().0, 1e-5, 6, 1e-6);
    errors.push(("elbo", vae.store.numel(), check2.max_rel_error));

    let global = GlobalPrior::new(GlobalPriorConfig { blocks: 1, width: 16, t_embed: 8 }, 4, 2, &mut r).unwrap();
    let z0 = standard_normal(&mut r, (4, 4));
    let ez = standard_normal(&mut r, (4, 4));
    let sigma = Mat::from_shape_vec((4, 2), vec![0.3, 0.7, 0.5, 0.5, 0.0, 0.0, 0.9, 0.1]).unwrap();
    let gts = [1, 10, 25, 50];
    let check3 = check_params(
        &global.store,
        |s, tape| diffusion_loss_with(&StoreView { prior: &global, store: s }, tape, &z0, &sigma, &schedule, &gts, &ez).unwrap(),
        1e-5,
        12,
        1e-6,
    );
    errors.push(("global prior", global.store.numel(), check3.max_rel_error));

    let h = standard_normal(&mut r, (64, 4));
    let stats = LatentStats::fit(&standard_normal(&mut r, (8, 4)), &h);
    let mut template = tiny_backbone(4, 4, 2);
    template.t_embed = 8;
    let point = PointPrior::new(&template, 4, 4, 2, stats, &mut r).unwrap();
    let mut point_store = point.store.clone();
    perturb(&mut point_store, &mut r);
    let cond = PointCond { y: batch.y.clone(), z0: standard_normal(&mut r, (2, 4)) };
    let eh = standard_normal(&mut r, (64, 4));
    let pts = [3, 40];
    let check4 = check_params(
        &point_store,
        |s, tape| diffusion_loss_with(&StoreView { prior: &point, store: s }, tape, &h, &cond, &schedule, &pts, &eh).unwrap(),
        1e-5,
        6,
        1e-6,
    );
    errors.push(("point prior", point.store.numel(), check4.max_rel_error));

    let secs = start.elapsed().as_secs_f64();
    let small = errors.iter().all(|e| e.1 <= 5000);
    let pass = errors.iter().all(|e| e.2 < 1e-4) && small && secs < 300.0;
    let detail: Vec<String> = errors.iter().map(|(n, p, e)| format!("{n} {p} params rel {e:.1e}")).collect();
    report(2, "gradient fidelity", pass, &format!("{}, {secs:.1}s", detail.join("; ")));
    for (name, params, err) in &errors {
        assert!(*params <= 5000, "{name} config has {params} parameters");
        assert!(*err < 1e-4, "{name} relative error {err}");
    }
    assert!(secs < 300.0);
}

/// Gives zero-initialised parameters generic values so every path carries gradient.
fn perturb(store: &mut ParamStore, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).iter_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
}

fn oracle_cell(x: f64, lo: f64, hi: f64, r: usize) -> usize {
    let extent = hi - lo;
    if extent <= 0.0 {
        return 0;
    }
    let u = (x - lo) / extent * r as f64;
    (1..r).filter(|&k| k as f64 <= u).count()
}

#[test]
fn criterion_3_voxel_iou_oracle() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut mismatches = 0;
    let mut empty_cases = 0;
    for case in 0..1000 {
        let n = r.random_range(1..=200);
        let res = r.random_range(2..=8);
        let parts = r.random_range(2..=4);
        let spread = if case % 5 == 0 { 0.0 } else { r.random_range(0.1..2.0) };
        let cloud = |r: &mut ChaCha8Rng| {
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| r.random_range(-1.0..1.0) * spread)).collect();
            PointCloud::from_points(&pts).unwrap()
        };
        let (a, b) = (cloud(&mut r), cloud(&mut r));
        let labels = |r: &mut ChaCha8Rng| (0..n).map(|_| r.random_range(0..parts)).collect::<Vec<_>>();
        let (la, lb) = (labels(&mut r), labels(&mut r));
        let bounds = if case % 3 == 0 {
            Bounds { lo: [-0.5; 3], hi: [0.5; 3] }
        } else {
            a.bounds().union(&b.bounds())
        };
        let ma = SegmentationEncoding::one_hot(la.clone(), parts).unwrap();
        let mb = SegmentationEncoding::one_hot(lb.clone(), parts).unwrap();
        let ga = voxelize_per_part(&a, &ma, res, bounds).unwrap();
        let gb = voxelize_per_part(&b, &mb, res, bounds).unwrap();
        let sets = |c: &PointCloud, l: &[usize]| {
            let mut s = vec![HashSet::new(); parts];
            for i in 0..n {
                let p = c.point(i);
                let cell = [0, 1, 2].map(|ax| oracle_cell(p[ax], bounds.lo[ax], bounds.hi[ax], res));
                s[l[i]].insert(cell);
            }
            s
        };
        let (sa, sb) = (sets(&a, &la), sets(&b, &lb));
        for p in 0..parts {
            for i in 0..res {
                for j in 0..res {
                    for k in 0..res {
                        if ga.get(p, i, j, k) != sa[p].contains(&[i, j, k]) || gb.get(p, i, j, k) != sb[p].contains(&[i, j, k]) {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
        let ious: Vec<Option<f64>> = (0..parts)
            .map(|p| {
                let union = sa[p].union(&sb[p]).count();
                (union > 0).then(|| sa[p].intersection(&sb[p]).count() as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        match per_part_voxel_iou(&ga, &gb) {
            Ok((got, miou)) => {
                let expect = present.iter().sum::<f64>() / present.len() as f64;
                if got != ious || miou != expect {
                    mismatches += 1;
                }
            }
            Err(_) => {
                empty_cases += 1;
                if !present.is_empty() {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 60.0;
    report(3, "voxel IoU oracle equivalence", pass, &format!("1000 cases, {mismatches} mismatches, {empty_cases} all-empty, {secs:.1}s"));
    assert_eq!(mismatches, 0);
    assert!(secs < 60.0);
}

fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    Mat::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], j]])
}

/// A within-cloud permutation of `batch` stacked clouds of `n` rows.
fn block_perm(batch: usize, n: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut perm = Vec::new();
    for b in 0..batch {
        let mut p: Vec<usize> = (b * n..(b + 1) * n).collect();
        p.shuffle(r);
        perm.extend(p);
    }
    perm
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_4_equivariance() {
    let start = Instant::now();
    let mut r = rng(4);
    let set = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::TripodLamp, 64, 9), 3).unwrap();
    let refs: Vec<_> = set.samples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let perm = block_perm(3, 64, &mut r);

    let vae = Vae::new(partgda::vae::VaeConfig::desk(3), &mut r).unwrap();
    let a = vae.encode_global(&batch.x, &batch.y, 3).unwrap();
    let b = vae.encode_global(&permute_rows(&batch.x, &perm), &permute_rows(&batch.y, &perm), 3).unwrap();
    let enc = max_abs_diff(&a.mean, &b.mean).max(max_abs_diff(&a.logvar, &b.logvar));

    let mut store = ParamStore::new();
    let ga = GaBlock::new(&mut store, "ga", 16, 4, &mut r).unwrap();
    let sc = ScBlock::new(&mut store, "sc", 16, 8, &mut r).unwrap();
    let f = standard_normal(&mut r, (192, 16));
    let e = standard_normal(&mut r, (192, 8));
    let run = |f: &Mat, e: &Mat| {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let ev = tape.constant(e.clone());
        let (g, _) = ga.forward(&mut tape, &store, fv, 64);
        let s = sc.forward(&mut tape, &store, fv, ev).unwrap();
        (tape.value(g).clone(), tape.value(s).clone())
    };
    let (g0, s0) = run(&f, &e);
    let (g1, s1) = run(&permute_rows(&f, &perm), &permute_rows(&e, &perm));
    let ga_err = max_abs_diff(&permute_rows(&g0, &perm), &g1);
    let sc_err = max_abs_diff(&permute_rows(&s0, &perm), &s1);

    let seg = Segmenter::new(SegmenterConfig::new(3), &mut r).unwrap();
    let mut label_mismatch = 0;
    for s in &set.samples {
        let p: Vec<usize> = block_perm(1, 64, &mut r);
        let direct = seg.predict_labels(&s.cloud);
        let permuted = seg.predict_labels(&s.cloud.permuted(&p));
        if direct.permuted(&p) != permuted {
            label_mismatch += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = enc <= 1e-6 && ga_err <= 1e-5 && sc_err <= 1e-5 && label_mismatch == 0 && secs < 120.0;
    report(
        4,
        "equivariance and invariance",
        pass,
        &format!("encoder {enc:.1e}, GA {ga_err:.1e}, SC {sc_err:.1e}, label mismatches {label_mismatch}, {secs:.1}s"),
    );
    assert!(enc <= 1e-6);
    assert!(ga_err <= 1e-5);
    assert!(sc_err <= 1e-5);
    assert_eq!(label_mismatch, 0);
    assert!(secs < 120.0);
}

#[test]
fn criterion_5_conditioning_pathway() {
    let start = Instant::now();
    let mut r = rng(5);
    let set = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::TripodLamp, 128, 2), 2).unwrap();
    let refs: Vec<_> = set.samples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let mut cfg = partgda::backbone::BackboneConfig::desk(3, 5, 3);
    cfg.z_width = 4;
    let mut store = ParamStore::new();
    let net = Backbone::new(cfg, &mut store, "net", &mut r).unwrap();
    let mut other = batch.y.clone();
    for mut row in other.rows_mut() {
        let hot = row.iter().position(|&v| v == 1.0).unwrap();
        row.fill(0.0);
        row[(hot + 1) % 3] = 1.0;
    }
    let z = standard_normal(&mut r, (2, 4));
    let run = |store: &ParamStore, y: &Mat| {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let zv = tape.constant(z.clone());
        let payload = Payload { y, z: Some(zv), t: None };
        let out = net.forward(&mut tape, store, x, x, &payload, 2).unwrap();
        tape.value(out).clone()
    };
    let live = (&run(&store, &batch.y) - &run(&store, &other)).mapv(|v| v * v).sum().sqrt();
    let mut zeroed = store.clone();
    let name = store.name(net.y_embed_weight()).to_string();
    let shape = store.value(net.y_embed_weight()).dim();
    zeroed.set(&name, Mat::zeros(shape)).unwrap();
    let invariant = run(&zeroed, &batch.y) == run(&zeroed, &other);
    let secs = start.elapsed().as_secs_f64();
    let pass = invariant && live > 0.0 && secs < 60.0;
    report(5, "conditioning pathway", pass, &format!("zeroed embedding invariant {invariant}, live L2 {live:.3e}, {secs:.1}s"));
    assert!(invariant);
    assert!(live > 0.0);
    assert!(secs < 60.0);
}

#[test]
fn criterion_6_crd_discriminative_power() {
    let start = Instant::now();
    let family = SyntheticFamily::TripodLamp;
    let exp = ExperimentConfig::desk();
    let (gen_cfg, _) = exp.for_family(family);
    let full = generate_synthetic(&SyntheticShapeSpec::new(family, exp.points, exp.data_seed), exp.train_count).unwrap();
    let mut r = rng(6);
    let (labeled, unlabeled, _) = make_split(&full, exp.labeled_fraction, &mut r).unwrap();
    let (model, _) = step1_train_generative(&labeled, &unlabeled, &gen_cfg.with_seed(6)).unwrap();
    let shapes: Vec<_> = unlabeled.samples.iter().take(100).map(|u| (u.cloud.clone(), full.get(&u.id).unwrap().mask.clone())).collect();
    let mut medians = Vec::new();
    let mut by_rate = Vec::new();
    for rho in [0.0, 0.2, 0.5, 1.0] {
        let masks: Vec<SegmentationEncoding> = shapes.iter().map(|(_, m)| shuffle_labels(m, rho, &mut r)).collect();
        let items: Vec<_> = shapes.iter().zip(&masks).map(|((c, _), m)| (c, m)).collect();
        let scores = crd_scores(&model, &items, &exp.gda, &mut r).unwrap();
        medians.push(median(&scores));
        by_rate.push(scores);
    }
    let auc = roc_auc(&by_rate[0], &by_rate[2]);
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let secs = start.elapsed().as_secs_f64();
    let pass = auc > 0.8 && monotone && secs < 1200.0;
    report(
        6,
        "CRD discriminative power",
        pass,
        &format!("AUC clean vs 50% {auc:.3}, medians {medians:.3?} over rho 0/0.2/0.5/1, {secs:.0}s"),
    );
    assert!(auc > 0.8, "AUC {auc}");
    assert!(monotone, "medians {medians:?}");
    assert!(secs < 1200.0);
}

#[test]
fn criterion_7_tau_monotonicity() {
    let start = Instant::now();
    let schedule = default_schedule();
    let mut r = rng(7);
    let ring = |r: &mut ChaCha8Rng, count: usize| {
        let mut m = Mat::zeros((count, 2));
        for mut row in m.rows_mut() {
            let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let rad = 1.0 + 0.05 * r.sample::<f64, _>(rand_distr::StandardNormal);
            row[0] = rad * a.cos();
            row[1] = rad * a.sin();
        }
        m
    };
    let mut model = MlpDenoiser::new(2, 64, 16, &mut r).unwrap();
    let mut store = model.store.clone();
    let mut opt = Adam::new(3e-3);
    for _ in 0..3000 {
        let x0 = ring(&mut r, 128);
        let mut tape = Tape::new();
        let l = diffusion_loss(&Mlp(&model, &store), &mut tape, &x0, 128, &(), &schedule, &mut r).unwrap();
        let g = tape.backward(l).params(&tape);
        opt.step(&mut store, &g);
    }
    model.store = store;
    let x0 = ring(&mut r, 200);
    let taus: Vec<usize> = (1..=9).map(|k| k * 100).collect();
    let mut deviation = Vec::new();
    for &tau in &taus {
        let out = diffuse_denoise(&model, &x0, 200, &(), DiffuseDenoiseConfig { tau, include_eta: true }, &schedule, &mut r).unwrap();
        let d: f64 = (&out - &x0).rows().into_iter().map(|row| row.dot(&row).sqrt()).sum::<f64>() / 200.0;
        deviation.push(d);
    }
    let rho = spearman(&taus.iter().map(|&t| t as f64).collect::<Vec<_>>(), &deviation);
    let secs = start.elapsed().as_secs_f64();
    let pass = rho > 0.8 && secs < 900.0;
    report(7, "tau monotonicity", pass, &format!("Spearman {rho:.3}, deviations {deviation:.3?}, {secs:.0}s"));
    assert!(rho > 0.8);
    assert!(secs < 900.0);
}

#[test]
fn criterion_8_end_to_end_desk_experiment() {
    let start = Instant::now();
    let cfg = ExperimentConfig::desk();
    let report_out = run_experiment_with(&cfg, |run| {
        use std::io::Write;
        let line = format!(
            "  {} seed {}: {:?} accepted crd {} conf {} ({:.0}s)\n",
            run.family.name(),
            run.seed,
            run.miou,
            run.accepted_crd,
            run.accepted_confidence,
            run.seconds
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gain = report_out.gain("GDA-VG+FP", "only TDA").unwrap_or(f64::NEG_INFINITY);
    let fp_vs_vg = report_out.gain("GDA-VG+FP", "GDA-VG").unwrap_or(f64::NEG_INFINITY);
    let complete = report_out.runs.len() == cfg.families.len() * cfg.gda.seeds.len()
        && report_out.runs.iter().all(|r| METHODS.iter().all(|m| r.miou.contains_key(*m)));
    let pass = gain >= 2.0 && fp_vs_vg >= 0.0 && complete && secs < 8.0 * 3600.0;
    let means: Vec<String> = METHODS.iter().map(|m| format!("{m} {:.4}", report_out.mean.get(*m).copied().unwrap_or(f64::NAN))).collect();
    report(
        8,
        "end-to-end desk experiment",
        pass,
        &format!("{}; FP-TDA {gain:+.2} pts, FP-VG {fp_vs_vg:+.2} pts, {secs:.0}s", means.join(", ")),
    );
    assert!(complete, "some runs or methods are missing");
    assert!(gain >= 2.0, "GDA-VG+FP exceeds only-TDA by {gain:.2} points");
    assert!(fp_vs_vg >= 0.0, "GDA-VG+FP trails GDA-VG by {:.2} points", -fp_vs_vg);
    assert!(secs < 8.0 * 3600.0);
}

#[test]
fn criterion_9_pipeline_hygiene() {
    let start = Instant::now();
    let mut r = rng(9);
    let full = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::Lollipop, 32, 4), 12).unwrap();
    let test = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::Lollipop, 32, 99), 4).unwrap();
    let (labeled, unlabeled, mut manifest) = make_split(&full, 0.25, &mut r).unwrap();
    manifest.test = test.ids();
    let (model, _) = step1_train_generative(&labeled, &unlabeled, &tiny_generative()).unwrap();
    let gda = GdaConfig {
        tau_list: vec![2, 5, 10],
        tau_prime: 5,
        voxel_resolution: 4,
        ..GdaConfig::default()
    };
    let variants = step2_generate_variants(&model, &labeled, &gda, &mut r).unwrap();
    let masks_identical = variants.set.samples.iter().all(|v| labeled.get(source_id(&v.id)).unwrap().mask == v.mask);
    let cardinality = variants.set.len() + variants.dropped == labeled.len() * gda.tau_list.len();

    let clean = check_no_leakage(&manifest.test, &[&labeled, &variants.set]).is_ok();
    let mut leaky = LabeledSet::default();
    leaky.samples.push(partgda::dataset::LabeledCloud {
        id: format!("{}~tau2~0", test.samples[0].id),
        ..test.samples[0].clone()
    });
    let caught = check_no_leakage(&manifest.test, &[&leaky]).is_err();

    let record = |id: &str, s: f64| PseudoLabelRecord {
        sample_id: id.into(),
        cloud: full.samples[0].cloud.clone(),
        pseudo_mask: full.samples[0].mask.clone(),
        crd_miou: Some(s),
        accepted: s >= 0.7,
    };
    let boundary = vec![record("a", 0.65), record("b", 0.70), record("c", 0.92)];
    let boundary_ok = filter_pseudo_labels(&boundary, 0.7).0.len() == 2;
    let mut partition_ok = true;
    for _ in 0..200 {
        let k = r.random_range(0..12);
        let recs: Vec<_> = (0..k).map(|i| record(&format!("s{i}"), r.random_range(0.0..1.0))).collect();
        let delta = r.random_range(0.0..1.0);
        let (acc, rej) = filter_pseudo_labels(&recs, delta);
        let a: BTreeSet<String> = acc.samples.iter().map(|s| source_id(&s.id).to_string()).collect();
        let b: BTreeSet<String> = rej.into_iter().collect();
        let all: BTreeSet<String> = recs.iter().map(|r| r.sample_id.clone()).collect();
        let expected: BTreeSet<String> = recs.iter().filter(|r| r.crd_miou.unwrap() >= delta).map(|r| r.sample_id.clone()).collect();
        partition_ok &= a.is_disjoint(&b) && a.union(&b).cloned().collect::<BTreeSet<_>>() == all && a == expected;
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.ckpt");
    generative_checkpoint(&model).save(&path).unwrap();
    let back = load_generative(&Checkpoint::load(&path).unwrap()).unwrap();
    let stores_equal = |a: &ParamStore, b: &ParamStore| a.iter().zip(b.iter()).all(|((na, va), (nb, vb))| na == nb && va == vb) && a.len() == b.len();
    let mut ckpt_ok = stores_equal(&model.vae.store, &back.vae.store)
        && stores_equal(&model.global.store, &back.global.store)
        && stores_equal(&model.point.store, &back.point.store)
        && back.point.stats == model.point.stats
        && back.schedule == model.schedule;
    let s = &labeled.samples[0];
    let dd = DiffuseDenoiseConfig { tau: 3, include_eta: true };
    ckpt_ok &= model.diffuse_denoise_latents(&s.cloud, &s.mask, dd, &mut rng(1)).unwrap()
        == back.diffuse_denoise_latents(&s.cloud, &s.mask, dd, &mut rng(1)).unwrap();
    let seg = Segmenter::new(SegmenterConfig::new(2), &mut r).unwrap();
    let seg_path = dir.path().join("seg.ckpt");
    segmenter_checkpoint(&seg).save(&seg_path).unwrap();
    let seg_back = load_segmenter(&Checkpoint::load(Path::new(&seg_path)).unwrap()).unwrap();
    ckpt_ok &= stores_equal(&seg.store, &seg_back.store) && seg_back.cfg == seg.cfg;
    let bytes = std::fs::read(&path).unwrap();
    ckpt_ok &= Checkpoint::from_bytes(&bytes, &path).unwrap().to_bytes() == bytes;

    let secs = start.elapsed().as_secs_f64();
    let pass = masks_identical && cardinality && clean && caught && boundary_ok && partition_ok && ckpt_ok && secs < 60.0;
    report(
        9,
        "pipeline hygiene",
        pass,
        &format!(
            "masks identical {masks_identical}, cardinality {cardinality}, leakage clean {clean} caught {caught}, boundary {boundary_ok}, partition {partition_ok}, checkpoints {ckpt_ok}, {secs:.1}s"
        ),
    );
    assert!(masks_identical && cardinality);
    assert!(clean && caught);
    assert!(boundary_ok && partition_ok);
    assert!(ckpt_ok);
    assert!(secs < 60.0);
}

use partgda::geometry::{
    apply_tda, part_distribution, per_part_voxel_iou, point_label_miou, voxelize_per_part, Bounds, PartVoxelGrid, PointCloud,
    SegmentationEncoding, TdaConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud_and_labels(max_n: usize, max_parts: usize) -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<usize>, usize)> {
    (2..=max_parts, 1..=max_n).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), n),
            prop::collection::vec(0..c, n),
            Just(c),
        )
    })
}

fn random_grid(r: usize, c: usize) -> impl Strategy<Value = PartVoxelGrid> {
    prop::collection::vec(any::<bool>(), r * r * r * c).prop_map(move |bits| {
        let mut g = PartVoxelGrid::empty(r, c, Bounds::unit());
        for p in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for k in 0..r {
                        g.set(p, i, j, k, bits[((p * r + i) * r + j) * r + k]);
                    }
                }
            }
        }
        g
    })
}

proptest! {
    #[test]
    fn voxel_iou_is_symmetric((a, b) in (2usize..5, 2usize..4).prop_flat_map(|(r, c)| (random_grid(r, c), random_grid(r, c)))) {
        match (per_part_voxel_iou(&a, &b), per_part_voxel_iou(&b, &a)) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one direction failed"),
        }
    }

    #[test]
    fn voxel_iou_of_a_grid_with_itself_is_one(g in (2usize..5, 2usize..4).prop_flat_map(|(r, c)| random_grid(r, c))) {
        let any_part = (0..g.parts()).any(|p| g.occupied(p) > 0);
        prop_assume!(any_part);
        prop_assert_eq!(per_part_voxel_iou(&g, &g).unwrap().1, 1.0);
    }

    #[test]
    fn part_distribution_sums_exactly((_, labels, c) in cloud_and_labels(300, 6)) {
        let n = labels.len();
        let labeled = part_distribution(&SegmentationEncoding::one_hot(labels, c).unwrap());
        let sum: f64 = labeled.sigma.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        let empty = part_distribution(&SegmentationEncoding::zero_padded(n, c).unwrap());
        prop_assert_eq!(empty.sigma.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn collapsed_tda_is_identity((pts, _, _) in cloud_and_labels(100, 2), seed in any::<u64>()) {
        let cloud = PointCloud::from_points(&pts).unwrap();
        let out = apply_tda(&cloud, &TdaConfig::identity(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out, cloud);
    }

    #[test]
    fn point_miou_ignores_point_order(
        (labels, other, c, perm) in (2usize..5, 1usize..80).prop_flat_map(|(c, n)| (
            prop::collection::vec(0..c, n),
            prop::collection::vec(0..c, n),
            Just(c),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        ))
    ) {
        let gt = SegmentationEncoding::one_hot(labels, c).unwrap();
        let pred = SegmentationEncoding::one_hot(other, c).unwrap();
        let direct = point_label_miou(&pred, &gt).unwrap();
        let permuted = point_label_miou(&pred.permuted(&perm), &gt.permuted(&perm)).unwrap();
        prop_assert!((direct - permuted).abs() <= 1e-12);
    }

    #[test]
    fn voxelization_marks_exactly_the_quantized_cells((pts, labels, c) in cloud_and_labels(100, 4), r in 2usize..9) {
        let cloud = PointCloud::from_points(&pts).unwrap();
        let mask = SegmentationEncoding::one_hot(labels.clone(), c).unwrap();
        let bounds = cloud.bounds();
        let grid = voxelize_per_part(&cloud, &mask, r, bounds).unwrap();
        let mut expect = PartVoxelGrid::empty(r, c, bounds);
        for (p, &l) in pts.iter().zip(&labels) {
            let q = [0, 1, 2].map(|a| bounds.quantize(p[a], a, r));
            expect.set(l, q[0], q[1], q[2], true);
        }
        for part in 0..c {
            prop_assert_eq!(grid.occupancy(part), expect.occupancy(part));
        }
    }
}

#[test]
fn hundred_points_match_brute_force_quantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<[f64; 3]> = (0..100).map(|_| [0; 3].map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))).collect();
    let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
    let cloud = PointCloud::from_points(&pts).unwrap();
    let grid = voxelize_per_part(&cloud, &SegmentationEncoding::one_hot(labels.clone(), 3).unwrap(), 8, Bounds::unit()).unwrap();
    let mut occupied = vec![std::collections::HashSet::new(); 3];
    for (p, &l) in pts.iter().zip(&labels) {
        occupied[l].insert(p.map(|v| (((v + 1.0) / 2.0 * 8.0).floor() as usize).min(7)));
    }
    for part in 0..3 {
        assert_eq!(grid.occupied(part), occupied[part].len());
        for cell in &occupied[part] {
            assert!(grid.get(part, cell[0], cell[1], cell[2]));
        }
    }
}

#![allow(dead_code)]

use partgda::backbone::BackboneConfig;
use partgda::geometry::SegmentationEncoding;
use partgda::latent_prior::{GlobalPriorConfig, PriorTrainConfig};
use partgda::pipeline::{GenerativeConfig, ScheduleConfig};
use partgda::vae::{VaeConfig, VaeTrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn tiny_backbone(in_width: usize, out_width: usize, parts: usize) -> BackboneConfig {
    BackboneConfig {
        in_width,
        out_width,
        parts,
        y_embed: 4,
        z_width: 0,
        t_embed: 0,
        widths: vec![8, 8],
        voxel_res: vec![Some(4), None],
        voxel_width: Some(2),
        ratio: 2,
        neighbors: 4,
        heads: 2,
    }
}

pub fn tiny_vae(parts: usize) -> VaeConfig {
    let mut cfg = VaeConfig::new(parts, 4, 4, &tiny_backbone(3, 3, parts));
    cfg.global_widths = vec![8, 8];
    cfg
}

/// A two-part generative model that trains in well under a second.
pub fn tiny_generative() -> GenerativeConfig {
    let mut point = tiny_backbone(4, 4, 2);
    point.t_embed = 8;
    GenerativeConfig {
        vae: tiny_vae(2),
        vae_train: VaeTrainConfig { epochs: 2, ..VaeTrainConfig::default() },
        global: GlobalPriorConfig { blocks: 1, width: 16, t_embed: 8 },
        point,
        prior_train: PriorTrainConfig { epochs: 2, ..Default::default() },
        schedule: ScheduleConfig { steps: 20, beta_min: 1e-3, beta_max: 0.3 },
    }
}

/// Reassigns a random `rho` fraction of points by permuting their labels among themselves.
pub fn shuffle_labels(mask: &SegmentationEncoding, rho: f64, rng: &mut impl Rng) -> SegmentationEncoding {
    let mut labels = mask.labels().expect("labeled").to_vec();
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(rng);
    let k = (rho * labels.len() as f64).round() as usize;
    let chosen = &idx[..k];
    let mut vals: Vec<usize> = chosen.iter().map(|&i| labels[i]).collect();
    vals.shuffle(rng);
    for (&i, v) in chosen.iter().zip(vals) {
        labels[i] = v;
    }
    SegmentationEncoding::one_hot(labels, mask.parts()).unwrap()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positive.len() * negative.len()) as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

pub fn report(index: usize, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("criterion {index} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

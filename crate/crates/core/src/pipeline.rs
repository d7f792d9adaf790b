//! The three-step augmentation pipeline, reconstruction-discrepancy filtering and
//! the experiment harness comparing augmentation methods.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::dataset::{
    generate_synthetic, make_split, LabeledCloud, LabeledSet, SplitManifest, SyntheticFamily, SyntheticShapeSpec, UnlabeledSet,
};
use crate::diffusion::{make_schedule, DiffuseDenoiseConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{per_part_voxel_iou, voxelize_per_part, Mat, PointCloud, SegmentationEncoding, TdaConfig};
use crate::latent_prior::{
    encode_dataset, train_global_prior_on, train_point_prior_on, GenerativeModel, GlobalPriorConfig, LatentStats, PriorTrainConfig,
};
use crate::segmentation::{evaluate_miou, train_segmenter, Segmenter, SegmenterConfig};
use crate::vae::{train_vae, TrainHistory, VaeConfig, VaeTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// A shorter chain whose `ᾱ` curve tracks the default one at a tenth of the steps.
    pub fn desk() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Everything needed to train the generative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub global: GlobalPriorConfig,
    /// Levels and widths of `ε_h`; input, output and conditioning sizes are derived.
    pub point: BackboneConfig,
    pub prior_train: PriorTrainConfig,
    pub schedule: ScheduleConfig,
}

impl GenerativeConfig {
    pub fn desk(parts: usize) -> Self {
        let vae = VaeConfig::desk(parts);
        let mut point = BackboneConfig::desk(vae.d_h, vae.d_h, parts);
        point.t_embed = 32;
        Self {
            vae,
            vae_train: VaeTrainConfig {
                epochs: 40,
                lambda_z: 1e-3,
                lambda_h: 1e-3,
                ..VaeTrainConfig::default()
            },
            global: GlobalPriorConfig {
                blocks: 2,
                width: 128,
                t_embed: 32,
            },
            point,
            prior_train: PriorTrainConfig {
                epochs: 40,
                ..PriorTrainConfig::default()
            },
            schedule: ScheduleConfig::desk(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.vae_train.rng_seed = seed;
        self.prior_train.rng_seed = seed.wrapping_add(1);
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerativeHistories {
    pub vae: TrainHistory,
    pub global: TrainHistory,
    pub point: TrainHistory,
}

/// Step 1: the VAE on the union set, then both priors on its frozen posterior means.
pub fn step1_train_generative(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    cfg: &GenerativeConfig,
) -> Result<(GenerativeModel, GenerativeHistories)> {
    let schedule = cfg.schedule.build()?;
    let (vae, vae_hist) = train_vae(labeled, unlabeled, cfg.vae.clone(), &cfg.vae_train)?;
    let latents = encode_dataset(&vae, labeled, unlabeled)?;
    let stats = LatentStats::fit(&latents.z, &latents.h);
    let (global, global_hist) = train_global_prior_on(&latents, &stats, &schedule, cfg.global.clone(), &cfg.prior_train)?;
    let (point, point_hist) = train_point_prior_on(&latents, &stats, &schedule, &cfg.point, &cfg.prior_train)?;
    Ok((
        GenerativeModel {
            vae,
            global,
            point,
            schedule,
        },
        GenerativeHistories {
            vae: vae_hist,
            global: global_hist,
            point: point_hist,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdaConfig {
    pub tau_list: Vec<usize>,
    pub variants_per_tau: usize,
    pub tau_prime: usize,
    pub delta: f64,
    pub voxel_resolution: usize,
    /// Variants reaching beyond this multiple of the source radius are dropped.
    pub sanity_factor: f64,
    pub confidence_threshold: f64,
    pub seeds: Vec<u64>,
}

impl Default for GdaConfig {
    fn default() -> Self {
        Self {
            tau_list: (1..=10).map(|k| k * 100).collect(),
            variants_per_tau: 1,
            tau_prime: 200,
            delta: 0.7,
            voxel_resolution: 32,
            sanity_factor: 3.0,
            confidence_threshold: 0.9,
            seeds: (0..5).collect(),
        }
    }
}

impl GdaConfig {
    /// Shallow depths for the desk schedule and a grid coarse enough for sparse clouds.
    pub fn desk() -> Self {
        Self {
            tau_list: (1..=10).map(|k| k * 2).collect(),
            tau_prime: 5,
            voxel_resolution: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if let Some(&t) = self.tau_list.iter().chain([&self.tau_prime]).find(|&&t| t > steps) {
            return Err(Error::Config(format!("depth {t} exceeds the {steps}-step schedule")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta {} must lie in (0, 1)", self.delta)));
        }
        if self.voxel_resolution < 2 || !(self.sanity_factor > 0.0) {
            return Err(Error::Config("voxel resolution must be ≥ 2 and the sanity factor positive".into()));
        }
        Ok(())
    }
}

fn radius(points: &Mat) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
}

fn stack(samples: &[&LabeledCloud]) -> (Mat, Mat) {
    let n = samples[0].cloud.len();
    let c = samples[0].mask.parts();
    let mut x = Mat::zeros((samples.len() * n, 3));
    let mut y = Mat::zeros((samples.len() * n, c));
    for (k, s) in samples.iter().enumerate() {
        x.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(s.cloud.points());
        y.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(&s.mask.matrix());
    }
    (x, y)
}

const CHUNK: usize = 16;

/// Separator between a source id and the suffix of a derived sample.
pub const DERIVED_SEP: char = '~';

/// The id of the sample a variant or pseudo-labeled sample was derived from.
pub fn source_id(id: &str) -> &str {
    id.split(DERIVED_SEP).next().unwrap_or(id)
}

#[derive(Clone, Debug)]
pub struct Variants {
    pub set: LabeledSet,
    pub dropped: usize,
}

/// Step 2: stochastic diffuse-denoise of every labeled sample at every depth; masks transfer unchanged.
pub fn step2_generate_variants(model: &GenerativeModel, labeled: &LabeledSet, cfg: &GdaConfig, rng: &mut impl Rng) -> Result<Variants> {
    cfg.validate(model.schedule.steps)?;
    labeled.validate()?;
    let mut out = Vec::new();
    let mut dropped = 0;
    if labeled.samples.iter().any(|s| !s.mask.is_labeled()) {
        return Err(Error::InvalidMask("variants need labeled sources".into()));
    }
    let n = labeled.shape().map_or(0, |s| s.0);
    for &tau in &cfg.tau_list {
        for v in 0..cfg.variants_per_tau {
            for chunk in labeled.samples.chunks(CHUNK) {
                let refs: Vec<&LabeledCloud> = chunk.iter().collect();
                let (x, y) = stack(&refs);
                let dd = DiffuseDenoiseConfig { tau, include_eta: true };
                let gen = model.diffuse_denoise_batch(&x, &y, chunk.len(), dd, rng)?;
                for (k, src) in chunk.iter().enumerate() {
                    let pts = gen.slice(ndarray::s![k * n..(k + 1) * n, ..]).to_owned();
                    let bound = cfg.sanity_factor * radius(src.cloud.points());
                    if pts.iter().any(|p| !p.is_finite() || p.abs() > bound) {
                        dropped += 1;
                        continue;
                    }
                    out.push(LabeledCloud {
                        id: format!("{}{DERIVED_SEP}tau{tau}{DERIVED_SEP}{v}", src.id),
                        cloud: PointCloud::new(pts)?,
                        mask: src.mask.clone(),
                    });
                }
            }
        }
    }
    Ok(Variants {
        set: LabeledSet { samples: out },
        dropped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelRecord {
    pub sample_id: String,
    pub cloud: PointCloud,
    pub pseudo_mask: SegmentationEncoding,
    /// Voxelized mIoU between the cloud and its conditional reconstruction.
    pub crd_miou: Option<f64>,
    pub accepted: bool,
}

/// Step 3: pseudo labels from the temporary segmenter, not yet scored.
pub fn step3_pseudo_label(f_temp: &Segmenter, unlabeled: &UnlabeledSet) -> Vec<PseudoLabelRecord> {
    unlabeled
        .samples
        .iter()
        .map(|u| PseudoLabelRecord {
            sample_id: u.id.clone(),
            cloud: u.cloud.clone(),
            pseudo_mask: f_temp.predict_labels(&u.cloud),
            crd_miou: None,
            accepted: false,
        })
        .collect()
}

/// Per-part voxel mIoU of two clouds sharing one mask, over their joint bounding box.
pub fn masked_voxel_miou(a: &PointCloud, b: &PointCloud, mask: &SegmentationEncoding, resolution: usize) -> Result<f64> {
    let bounds = a.bounds().union(&b.bounds());
    let ga = voxelize_per_part(a, mask, resolution, bounds.clone())?;
    let gb = voxelize_per_part(b, mask, resolution, bounds.clone())?;
    Ok(per_part_voxel_iou(&ga, &gb)?.1)
}

/// Conditional reconstruction scores for a batch of clouds under their pseudo masks.
pub fn crd_scores(model: &GenerativeModel, items: &[(&PointCloud, &SegmentationEncoding)], cfg: &GdaConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    cfg.validate(model.schedule.steps)?;
    let dd = DiffuseDenoiseConfig {
        tau: cfg.tau_prime,
        include_eta: false,
    };
    assert!(!dd.include_eta);
    let mut scores = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let samples: Vec<LabeledCloud> = chunk
            .iter()
            .map(|(c, m)| LabeledCloud {
                id: String::new(),
                cloud: (*c).clone(),
                mask: (*m).clone(),
            })
            .collect();
        let refs: Vec<&LabeledCloud> = samples.iter().collect();
        if refs.iter().any(|s| !s.mask.is_labeled()) {
            return Err(Error::InvalidMask("reconstruction scoring needs a labeled mask".into()));
        }
        let (x, y) = stack(&refs);
        let rec = model.diffuse_denoise_batch(&x, &y, refs.len(), dd, rng)?;
        let n = refs[0].cloud.len();
        for (k, s) in refs.iter().enumerate() {
            let r = PointCloud::new(rec.slice(ndarray::s![k * n..(k + 1) * n, ..]).to_owned())?;
            scores.push(masked_voxel_miou(&s.cloud, &r, &s.mask, cfg.voxel_resolution)?);
        }
    }
    Ok(scores)
}

pub fn crd_score(model: &GenerativeModel, x_u: &PointCloud, y_hat: &SegmentationEncoding, cfg: &GdaConfig, rng: &mut impl Rng) -> Result<f64> {
    Ok(crd_scores(model, &[(x_u, y_hat)], cfg, rng)?[0])
}

/// Scores every record and marks those at or above `delta`.
pub fn score_records(model: &GenerativeModel, records: &mut [PseudoLabelRecord], cfg: &GdaConfig, rng: &mut impl Rng) -> Result<()> {
    let items: Vec<(&PointCloud, &SegmentationEncoding)> = records.iter().map(|r| (&r.cloud, &r.pseudo_mask)).collect();
    let scores = crd_scores(model, &items, cfg, rng)?;
    for (r, s) in records.iter_mut().zip(scores) {
        r.crd_miou = Some(s);
        r.accepted = s >= cfg.delta;
    }
    Ok(())
}

/// Accepted samples (score ≥ `delta`) and the ids of the rest; unscored records are rejected.
pub fn filter_pseudo_labels(records: &[PseudoLabelRecord], delta: f64) -> (LabeledSet, Vec<String>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for r in records {
        match r.crd_miou {
            Some(s) if s >= delta => accepted.push(LabeledCloud {
                id: format!("{}{DERIVED_SEP}pseudo", r.sample_id),
                cloud: r.cloud.clone(),
                mask: r.pseudo_mask.clone(),
            }),
            _ => rejected.push(r.sample_id.clone()),
        }
    }
    (LabeledSet { samples: accepted }, rejected)
}

/// Baseline filter on the temporary segmenter's mean softmax confidence.
pub fn filter_by_confidence(f_temp: &Segmenter, unlabeled: &UnlabeledSet, threshold: f64) -> LabeledSet {
    let samples = unlabeled
        .samples
        .iter()
        .filter_map(|u| {
            let (_, mean) = f_temp.predict_confidence(&u.cloud);
            (mean >= threshold).then(|| LabeledCloud {
                id: format!("{}{DERIVED_SEP}pseudo", u.id),
                cloud: u.cloud.clone(),
                mask: f_temp.predict_labels(&u.cloud),
            })
        })
        .collect();
    LabeledSet { samples }
}

pub fn training_union(labeled: &LabeledSet, variants: &LabeledSet, accepted: &LabeledSet) -> LabeledSet {
    let mut all = labeled.clone();
    all.extend(variants.clone());
    all.extend(accepted.clone());
    all
}

/// The final segmenter on labeled, variant and accepted samples, always with TDA.
pub fn final_train(labeled: &LabeledSet, variants: &LabeledSet, accepted: &LabeledSet, cfg: &SegmenterConfig) -> Result<(Segmenter, TrainHistory)> {
    let mut cfg = cfg.clone();
    if cfg.tda.is_none() {
        cfg.tda = Some(TdaConfig::default());
    }
    train_segmenter(&training_union(labeled, variants, accepted), &cfg)
}

/// Fails if any training sample, or the source of a derived one, belongs to the test split.
pub fn check_no_leakage(test_ids: &[String], training: &[&LabeledSet]) -> Result<()> {
    let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    for set in training {
        for s in &set.samples {
            if test.contains(s.id.as_str()) || test.contains(source_id(&s.id)) {
                return Err(Error::Config(format!("training sample {} leaks from the test split", s.id)));
            }
        }
    }
    Ok(())
}

pub const METHODS: [&str; 5] = ["w/o aug", "only TDA", "GDA-VG", "GDA-VG+FP", "confidence filter"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub families: Vec<SyntheticFamily>,
    pub points: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub labeled_fraction: f64,
    pub data_seed: u64,
    pub gda: GdaConfig,
    /// Parts are set per family.
    pub generative: GenerativeConfig,
    pub segmenter: SegmenterConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let mut segmenter = SegmenterConfig::new(2);
        segmenter.max_steps = Some(3000);
        segmenter.epochs = usize::MAX;
        Self {
            families: SyntheticFamily::ALL.to_vec(),
            points: 128,
            train_count: 200,
            test_count: 100,
            labeled_fraction: 0.1,
            data_seed: 7,
            gda: GdaConfig::desk(),
            generative: GenerativeConfig::desk(2),
            segmenter,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn for_family(&self, family: SyntheticFamily) -> (GenerativeConfig, SegmenterConfig) {
        self.for_parts(family.parts())
    }

    /// Generative and segmenter configs resized to `c` parts.
    pub fn for_parts(&self, c: usize) -> (GenerativeConfig, SegmenterConfig) {
        let mut g = self.generative.clone();
        g.vae.parts = c;
        g.vae.encoder.parts = c;
        g.vae.decoder.parts = c;
        g.point.parts = c;
        let mut s = self.segmenter.clone();
        s.parts = c;
        (g, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub family: SyntheticFamily,
    pub seed: u64,
    pub manifest: SplitManifest,
    /// Test mIoU per method; absent when the method failed.
    pub miou: BTreeMap<String, f64>,
    pub errors: BTreeMap<String, String>,
    pub variants: usize,
    pub dropped_variants: usize,
    pub accepted_crd: usize,
    pub accepted_confidence: usize,
    /// Mean hidden-label mIoU of the pseudo labels accepted by each filter.
    pub pseudo_quality: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub methods: Vec<String>,
    pub runs: Vec<RunRecord>,
    pub mean: BTreeMap<String, f64>,
    pub config_hash: String,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,seed,method,miou\n");
        for r in &self.runs {
            for m in &self.methods {
                let v = r.miou.get(m).map_or(String::new(), |v| format!("{v:.6}"));
                out.push_str(&format!("{},{},{},{}\n", r.family.name(), r.seed, m, v));
            }
        }
        out
    }

    /// Mean of `a` minus mean of `b`, in mIoU points.
    pub fn gain(&self, a: &str, b: &str) -> Option<f64> {
        Some(100.0 * (self.mean.get(a)? - self.mean.get(b)?))
    }
}

fn mean_quality(set: &LabeledSet, truth: &LabeledSet) -> Option<f64> {
    let scores: Vec<f64> = set
        .samples
        .iter()
        .filter_map(|s| {
            let gt = truth.get(source_id(&s.id))?;
            crate::geometry::point_label_miou(&s.mask, &gt.mask).ok()
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One family and seed: shared split, every method, test-set evaluation.
pub fn run_single(cfg: &ExperimentConfig, family: SyntheticFamily, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let (gen_cfg, seg_cfg) = cfg.for_family(family);
    let full = generate_synthetic(&SyntheticShapeSpec::new(family, cfg.points, cfg.data_seed), cfg.train_count)?;
    let test = generate_synthetic(&SyntheticShapeSpec::new(family, cfg.points, cfg.data_seed.wrapping_add(1_000_003)), cfg.test_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labeled, unlabeled, mut manifest) = make_split(&full, cfg.labeled_fraction, &mut rng)?;
    manifest.seed = seed;
    manifest.test = test.ids();

    let mut miou = BTreeMap::new();
    let mut errors = BTreeMap::new();
    let mut record = |name: &str, res: Result<f64>, miou: &mut BTreeMap<String, f64>| match res {
        Ok(v) => {
            miou.insert(name.to_string(), v);
        }
        Err(e) => {
            errors.insert(name.to_string(), e.to_string());
        }
    };
    let seg = |tda: bool, k: u64| {
        let mut s = seg_cfg.clone();
        s.rng_seed = seed.wrapping_mul(31).wrapping_add(k);
        if !tda {
            s.tda = None;
        } else if s.tda.is_none() {
            s.tda = Some(TdaConfig::default());
        }
        s
    };
    let empty = LabeledSet::default();
    let eval = |train: &LabeledSet, s: &SegmenterConfig| -> Result<(Segmenter, f64)> {
        check_no_leakage(&manifest.test, &[train])?;
        let (f, _) = train_segmenter(train, s)?;
        let m = evaluate_miou(&f, &test)?;
        Ok((f, m))
    };
    record(METHODS[0], eval(&labeled, &seg(false, 0)).map(|r| r.1), &mut miou);
    record(METHODS[1], eval(&labeled, &seg(true, 1)).map(|r| r.1), &mut miou);

    let mut out = RunRecord {
        family,
        seed,
        manifest: manifest.clone(),
        miou: BTreeMap::new(),
        errors: BTreeMap::new(),
        variants: 0,
        dropped_variants: 0,
        accepted_crd: 0,
        accepted_confidence: 0,
        pseudo_quality: BTreeMap::new(),
        seconds: 0.0,
    };
    let gda = (|| -> Result<_> {
        let (model, _) = step1_train_generative(&labeled, &unlabeled, &gen_cfg.clone().with_seed(seed))?;
        let variants = step2_generate_variants(&model, &labeled, &cfg.gda, &mut rng)?;
        Ok((model, variants))
    })();
    match gda {
        Ok((model, variants)) => {
            out.variants = variants.set.len();
            out.dropped_variants = variants.dropped;
            let vg = training_union(&labeled, &variants.set, &empty);
            match eval(&vg, &seg(true, 2)) {
                Ok((f_temp, m)) => {
                    miou.insert(METHODS[2].to_string(), m);
                    let mut records = step3_pseudo_label(&f_temp, &unlabeled);
                    let fp = score_records(&model, &mut records, &cfg.gda, &mut rng).and_then(|_| {
                        let (accepted, _) = filter_pseudo_labels(&records, cfg.gda.delta);
                        out.accepted_crd = accepted.len();
                        if let Some(q) = mean_quality(&accepted, &full) {
                            out.pseudo_quality.insert(METHODS[3].to_string(), q);
                        }
                        let train = training_union(&labeled, &variants.set, &accepted);
                        check_no_leakage(&manifest.test, &[&train])?;
                        let (f, _) = final_train(&labeled, &variants.set, &accepted, &seg(true, 3))?;
                        evaluate_miou(&f, &test)
                    });
                    record(METHODS[3], fp, &mut miou);
                    let conf = filter_by_confidence(&f_temp, &unlabeled, cfg.gda.confidence_threshold);
                    out.accepted_confidence = conf.len();
                    if let Some(q) = mean_quality(&conf, &full) {
                        out.pseudo_quality.insert(METHODS[4].to_string(), q);
                    }
                    let cb = (|| {
                        check_no_leakage(&manifest.test, &[&training_union(&labeled, &variants.set, &conf)])?;
                        let (f, _) = final_train(&labeled, &variants.set, &conf, &seg(true, 3))?;
                        evaluate_miou(&f, &test)
                    })();
                    record(METHODS[4], cb, &mut miou);
                }
                Err(e) => {
                    for m in &METHODS[2..] {
                        errors.insert(m.to_string(), e.to_string());
                    }
                }
            }
        }
        Err(e) => {
            for m in &METHODS[2..] {
                errors.insert(m.to_string(), e.to_string());
            }
        }
    }
    out.miou = miou;
    out.errors = errors;
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Every family × seed; `progress` sees each finished run.
pub fn run_experiment_with(cfg: &ExperimentConfig, mut progress: impl FnMut(&RunRecord)) -> Result<ExperimentReport> {
    let start = Instant::now();
    let (gen_cfg, _) = cfg.for_family(SyntheticFamily::Lollipop);
    cfg.gda.validate(gen_cfg.schedule.steps)?;
    let mut runs = Vec::new();
    for &family in &cfg.families {
        for &seed in &cfg.gda.seeds {
            let r = run_single(cfg, family, seed)?;
            progress(&r);
            runs.push(r);
        }
    }
    let mut mean = BTreeMap::new();
    for m in METHODS {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.miou.get(m).copied()).collect();
        if !vals.is_empty() {
            mean.insert(m.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(ExperimentReport {
        methods: METHODS.iter().map(|m| m.to_string()).collect(),
        runs,
        mean,
        config_hash: cfg.hash(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, |_| {})
}

//! PointNet-style part segmenter used for both the temporary and the final model.

use std::rc::Rc;

use partgda_tape::{Adam, Linear, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::geometry::{apply_tda, Mat, PointCloud, SegmentationEncoding, TdaConfig};
use crate::vae::{epoch_batches, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub parts: usize,
    /// Per-point MLP; the last width is the pooled global feature.
    pub point_widths: Vec<usize>,
    /// Head MLP applied to `concat(local, global)`, followed by the logit layer.
    pub head_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stops training after this many optimiser steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub rng_seed: u64,
    pub tda: Option<TdaConfig>,
}

impl SegmenterConfig {
    pub fn new(parts: usize) -> Self {
        Self {
            parts,
            point_widths: vec![64, 128],
            head_widths: vec![128, 64],
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            max_steps: None,
            rng_seed: 0,
            tda: Some(TdaConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts < 2 {
            return Err(Error::Config("segmenter needs at least 2 parts".into()));
        }
        if self.point_widths.is_empty() || self.point_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(Error::Config("segmenter widths must be positive".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if let Some(t) = &self.tda {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    pub store: ParamStore,
    point: Vec<Linear>,
    head: Vec<Linear>,
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut point = Vec::new();
        let mut prev = 3;
        for (i, &w) in cfg.point_widths.iter().enumerate() {
            point.push(Linear::new(&mut store, &format!("seg.point{i}"), prev, w, rng)?);
            prev = w;
        }
        let global = prev;
        let mut head = Vec::new();
        prev += global;
        for (i, &w) in cfg.head_widths.iter().enumerate() {
            head.push(Linear::new(&mut store, &format!("seg.head{i}"), prev, w, rng)?);
            prev = w;
        }
        head.push(Linear::new(&mut store, "seg.logits", prev, cfg.parts, rng)?);
        Ok(Self { cfg, store, point, head })
    }

    /// Logits `(batch·n) × c` for stacked clouds of `n` points each.
    pub fn forward_on(&self, store: &ParamStore, tape: &mut Tape, x: Var, batch: usize) -> Var {
        let rows = tape.shape(x).0;
        let n = rows / batch;
        let mut f = x;
        for l in &self.point {
            f = l.forward(tape, store, f);
            f = tape.relu(f);
        }
        let g = tape.segment_max(f, n);
        let idx: Vec<usize> = (0..rows).map(|r| r / n).collect();
        let g = tape.gather(g, Rc::new(idx));
        let mut h = tape.concat(&[f, g]);
        let last = self.head.len() - 1;
        for (i, l) in self.head.iter().enumerate() {
            h = l.forward(tape, store, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn logits(&self, cloud: &PointCloud) -> Mat {
        let mut tape = Tape::new();
        let x = tape.constant(cloud.points().clone());
        let out = self.forward_on(&self.store, &mut tape, x, 1);
        tape.value(out).clone()
    }

    /// Mean cross-entropy over all points of a stacked batch.
    pub fn loss_on(&self, store: &ParamStore, tape: &mut Tape, x: &Mat, labels: Rc<Vec<usize>>, batch: usize) -> Var {
        let xv = tape.constant(x.clone());
        let logits = self.forward_on(store, tape, xv, batch);
        tape.softmax_xent(logits, labels)
    }

    pub fn predict_labels(&self, cloud: &PointCloud) -> SegmentationEncoding {
        labels_from_logits(&self.logits(cloud))
    }

    /// Per-point maximum softmax probability and its mean.
    pub fn predict_confidence(&self, cloud: &PointCloud) -> (Vec<f64>, f64) {
        confidence_from_logits(&self.logits(cloud))
    }
}

/// Row-wise argmax; ties go to the lowest part index.
pub fn labels_from_logits(logits: &Mat) -> SegmentationEncoding {
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    SegmentationEncoding::one_hot(labels, logits.ncols()).expect("argmax is always a valid part")
}

pub fn confidence_from_logits(logits: &Mat) -> (Vec<f64>, f64) {
    let conf: Vec<f64> = logits
        .rows()
        .into_iter()
        .map(|row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            1.0 / z
        })
        .collect();
    let mean = conf.iter().sum::<f64>() / conf.len().max(1) as f64;
    (conf, mean)
}

/// Minimises per-point cross-entropy, augmenting copies of each batch when TDA is enabled.
pub fn train_segmenter(train: &LabeledSet, cfg: &SegmenterConfig) -> Result<(Segmenter, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("cannot train a segmenter on an empty set".into()));
    }
    train.validate()?;
    let mut labels = Vec::with_capacity(train.len());
    for s in &train.samples {
        let l = s
            .mask
            .labels()
            .ok_or_else(|| Error::InvalidMask(format!("sample {} is unlabeled", s.id)))?;
        if s.mask.parts() != cfg.parts {
            return Err(Error::InvalidMask(format!("sample {} has {} parts, expected {}", s.id, s.mask.parts(), cfg.parts)));
        }
        labels.push(l.to_vec());
    }
    let n = train.samples[0].cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = Segmenter::new(cfg.clone(), &mut rng)?;
    let mut store = model.store.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut history = TrainHistory::default();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut steps = 0;
    'outer: for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut seen = 0;
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            if steps >= budget {
                break;
            }
            let mut x = Mat::zeros((idx.len() * n, 3));
            let mut target = Vec::with_capacity(idx.len() * n);
            for (k, &i) in idx.iter().enumerate() {
                let cloud = &train.samples[i].cloud;
                let pts = match &cfg.tda {
                    Some(t) => apply_tda(cloud, t, &mut rng).into_points(),
                    None => cloud.points().clone(),
                };
                x.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(&pts);
                target.extend_from_slice(&labels[i]);
            }
            let mut tape = Tape::new();
            let l = model.loss_on(&store, &mut tape, &x, Rc::new(target), idx.len());
            let v = tape.scalar(l);
            if !v.is_finite() {
                return Err(Error::Diverged { stage: "segmenter", epoch });
            }
            total += v * idx.len() as f64;
            seen += idx.len();
            let grads = tape.backward(l).params(&tape);
            opt.step(&mut store, &grads);
            steps += 1;
        }
        if seen > 0 {
            history.loss.push(total / seen as f64);
        }
        if steps >= budget {
            break 'outer;
        }
    }
    model.store = store;
    Ok((model, history))
}

/// Mean point-label mIoU of `model` over a labeled set.
pub fn evaluate_miou(model: &Segmenter, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let mut total = 0.0;
    for s in &set.samples {
        total += crate::geometry::point_label_miou(&model.predict_labels(&s.cloud), &s.mask)?;
    }
    Ok(total / set.len() as f64)
}

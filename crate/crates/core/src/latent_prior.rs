//! Conditional latent diffusion priors: `ε_z` over the global latent given the
//! part distribution, and `ε_h` over point latents given the mask and `z0`.

use partgda_tape::{Adam, Linear, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Payload};
use crate::dataset::{LabeledCloud, LabeledSet, UnlabeledSet};
use crate::diffusion::{
    ancestral_sample, diffuse_denoise, diffusion_loss, timestep_embedding, DiffuseDenoiseConfig, Denoiser, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::geometry::{part_distribution, Mat, PointCloud, SegmentationEncoding};
use crate::vae::{epoch_batches, union_set, Batch, TrainHistory, Vae};

/// Per-dimension mean and spread of the training latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
    pub h_mean: Vec<f64>,
    pub h_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-3;

fn column_stats(m: &Mat) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mean: Vec<f64> = m.columns().into_iter().map(|c| c.sum() / n).collect();
    let std: Vec<f64> = m
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, mu)| {
            let v = c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            v.sqrt().max(STD_FLOOR)
        })
        .collect();
    let f32ify = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
    (f32ify(mean), f32ify(std))
}

fn affine(m: &Mat, shift: &[f64], scale: &[f64], forward: bool) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = if forward { (*x - shift[j]) / scale[j] } else { *x * scale[j] + shift[j] };
        }
    }
    out
}

impl LatentStats {
    pub fn fit(z: &Mat, h: &Mat) -> Self {
        let (z_mean, z_std) = column_stats(z);
        let (h_mean, h_std) = column_stats(h);
        Self { z_mean, z_std, h_mean, h_std }
    }

    pub fn normalize_z(&self, z: &Mat) -> Mat {
        affine(z, &self.z_mean, &self.z_std, true)
    }

    pub fn denormalize_z(&self, z: &Mat) -> Mat {
        affine(z, &self.z_mean, &self.z_std, false)
    }

    pub fn normalize_h(&self, h: &Mat) -> Mat {
        affine(h, &self.h_mean, &self.h_std, true)
    }

    pub fn denormalize_h(&self, h: &Mat) -> Mat {
        affine(h, &self.h_mean, &self.h_std, false)
    }
}

/// Posterior-mean latents of a training set.
#[derive(Clone, Debug)]
pub struct LatentData {
    pub n: usize,
    /// `N × d_z`.
    pub z: Mat,
    /// `(N·n) × d_h`.
    pub h: Mat,
    /// `(N·n) × c`.
    pub y: Mat,
    /// `N × c` part distributions.
    pub sigma: Mat,
}

impl LatentData {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    fn rows(&self, idx: &[usize]) -> (Mat, Mat, Mat, Mat) {
        let n = self.n;
        let pick = |m: &Mat, per: usize| {
            let mut out = Mat::zeros((idx.len() * per, m.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                out.slice_mut(ndarray::s![k * per..(k + 1) * per, ..]).assign(&m.slice(ndarray::s![i * per..(i + 1) * per, ..]));
            }
            out
        };
        (pick(&self.z, 1), pick(&self.h, n), pick(&self.y, n), pick(&self.sigma, 1))
    }
}

/// Encodes every sample (labeled with its mask, unlabeled zero-padded) with the frozen VAE.
pub fn encode_dataset(vae: &Vae, labeled: &LabeledSet, unlabeled: &UnlabeledSet) -> Result<LatentData> {
    let data = union_set(labeled, unlabeled, vae.cfg.parts)?;
    let (n, c) = data.shape().ok_or_else(|| Error::Config("no samples to encode".into()))?;
    let count = data.len();
    let mut z = Mat::zeros((count, vae.cfg.d_z));
    let mut h = Mat::zeros((count * n, vae.cfg.d_h));
    let mut y = Mat::zeros((count * n, c));
    let mut sigma = Mat::zeros((count, c));
    for (start, chunk) in data.samples.chunks(16).enumerate().map(|(k, ch)| (k * 16, ch)) {
        let refs: Vec<&LabeledCloud> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let (zb, hb) = vae.encode_means(&batch.x, &batch.y, batch.size)?;
        z.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&zb);
        h.slice_mut(ndarray::s![start * n..(start + chunk.len()) * n, ..]).assign(&hb);
        y.slice_mut(ndarray::s![start * n..(start + chunk.len()) * n, ..]).assign(&batch.y);
        for (k, s) in chunk.iter().enumerate() {
            let sig = part_distribution(&s.mask).sigma;
            for (j, v) in sig.into_iter().enumerate() {
                sigma[[start + k, j]] = v;
            }
        }
    }
    Ok(LatentData { n, z, h, y, sigma })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPriorConfig {
    pub blocks: usize,
    pub width: usize,
    pub t_embed: usize,
}

impl Default for GlobalPriorConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 128,
            t_embed: 64,
        }
    }
}

/// Residual MLP on `concat(z_t, σ_y, t-embedding)`.
#[derive(Clone, Debug)]
pub struct GlobalPrior {
    pub cfg: GlobalPriorConfig,
    pub store: ParamStore,
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

impl GlobalPrior {
    pub fn new(cfg: GlobalPriorConfig, d_z: usize, parts: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.width == 0 || cfg.t_embed == 0 {
            return Err(Error::Config("global prior sizes must be positive".into()));
        }
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "eps_z.input", d_z + parts + cfg.t_embed, cfg.width, rng)?;
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            blocks.push((
                Linear::new(&mut store, &format!("eps_z.block{b}.a"), cfg.width, cfg.width, rng)?,
                Linear::new(&mut store, &format!("eps_z.block{b}.b"), cfg.width, cfg.width, rng)?,
            ));
        }
        let output = Linear::new(&mut store, "eps_z.output", cfg.width, d_z, rng)?;
        Ok(Self {
            cfg,
            store,
            input,
            blocks,
            output,
        })
    }

    pub fn predict_with(&self, store: &ParamStore, tape: &mut Tape, z_t: Var, t: &[usize], sigma: &Mat) -> Var {
        let emb = tape.constant(timestep_embedding(t, self.cfg.t_embed, 1));
        let s = tape.constant(sigma.clone());
        let u = tape.concat(&[z_t, s, emb]);
        let mut h = self.input.forward(tape, store, u);
        for (a, b) in &self.blocks {
            let r = tape.silu(h);
            let r = a.forward(tape, store, r);
            let r = tape.silu(r);
            let r = b.forward(tape, store, r);
            h = tape.add(h, r);
        }
        let h = tape.silu(h);
        self.output.forward(tape, store, h)
    }
}

impl Denoiser for GlobalPrior {
    /// `batch × c` part distributions.
    type Cond = Mat;

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], sigma: &Mat) -> Var {
        self.predict_with(&self.store, tape, x_t, t, sigma)
    }
}

/// Conditioning of the point prior: per-point mask and normalised `z0`.
pub struct PointCond {
    pub y: Mat,
    pub z0: Mat,
}

/// Point-voxel backbone denoiser placed at the denormalised latent positions.
#[derive(Clone, Debug)]
pub struct PointPrior {
    pub store: ParamStore,
    pub net: Backbone,
    pub stats: LatentStats,
}

impl PointPrior {
    /// `template` supplies levels and widths; input, output and conditioning sizes are set here.
    pub fn new(template: &BackboneConfig, d_h: usize, d_z: usize, parts: usize, stats: LatentStats, rng: &mut impl Rng) -> Result<Self> {
        let mut cfg = template.clone();
        cfg.in_width = d_h;
        cfg.out_width = d_h;
        cfg.parts = parts;
        cfg.z_width = d_z;
        if cfg.t_embed == 0 {
            cfg.t_embed = 64;
        }
        let mut store = ParamStore::new();
        let net = Backbone::new(cfg, &mut store, "eps_h", rng)?;
        Ok(Self { store, net, stats })
    }

    pub fn predict_with(&self, store: &ParamStore, tape: &mut Tape, h_t: Var, t: &[usize], cond: &PointCond) -> Var {
        let xyz = tape.slice_cols(h_t, 0, 3);
        let scale = tape.constant(Mat::from_shape_vec((1, 3), self.stats.h_std[..3].to_vec()).unwrap());
        let shift = tape.constant(Mat::from_shape_vec((1, 3), self.stats.h_mean[..3].to_vec()).unwrap());
        let pos = tape.mul_row(xyz, scale);
        let pos = tape.add_row(pos, shift);
        let z = tape.constant(cond.z0.clone());
        let payload = Payload {
            y: &cond.y,
            z: Some(z),
            t: Some(t),
        };
        self.net
            .forward(tape, store, pos, h_t, &payload, t.len())
            .expect("point prior inputs are shaped by the caller")
    }
}

impl Denoiser for PointPrior {
    type Cond = PointCond;

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &PointCond) -> Var {
        self.predict_with(&self.store, tape, x_t, t, cond)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub rng_seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1200,
            batch_size: 8,
            lr: 1e-3,
            grad_clip: Some(10.0),
            rng_seed: 0,
        }
    }
}

/// Shared epoch loop: `loss` builds the objective for a batch of sample indices.
fn fit<F>(store: &mut ParamStore, count: usize, cfg: &PriorTrainConfig, stage: &'static str, mut loss: F) -> Result<TrainHistory>
where
    F: FnMut(&ParamStore, &mut Tape, &[usize], &mut ChaCha8Rng) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut opt = Adam::new(cfg.lr);
    if let Some(c) = cfg.grad_clip {
        opt = opt.with_grad_clip(c);
    }
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(count, cfg.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let l = match loss(store, &mut tape, &idx, &mut rng) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { stage, epoch }),
                Err(e) => return Err(e),
            };
            total += tape.scalar(l) * idx.len() as f64;
            let grads = tape.backward(l).params(&tape);
            opt.step(store, &grads);
        }
        let mean = total / count as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { stage, epoch });
        }
        history.loss.push(mean);
    }
    Ok(history)
}

/// Trains `ε_z` on normalised posterior-mean global latents.
pub fn train_global_prior_on(
    latents: &LatentData,
    stats: &LatentStats,
    schedule: &NoiseSchedule,
    model_cfg: GlobalPriorConfig,
    cfg: &PriorTrainConfig,
) -> Result<(GlobalPrior, TrainHistory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5a5a);
    let mut prior = GlobalPrior::new(model_cfg, latents.z.ncols(), latents.sigma.ncols(), &mut rng)?;
    let z = stats.normalize_z(&latents.z);
    let mut store = prior.store.clone();
    let history = fit(&mut store, latents.len(), cfg, "global prior", |s, tape, idx, rng| {
        let (_, _, _, sigma) = latents.rows(idx);
        let zb = Mat::from_shape_fn((idx.len(), z.ncols()), |(k, j)| z[[idx[k], j]]);
        let view = StoreView { prior: &prior, store: s };
        diffusion_loss(&view, tape, &zb, idx.len(), &sigma, schedule, rng)
    })?;
    prior.store = store;
    Ok((prior, history))
}

/// Trains `ε_h` on normalised posterior-mean point latents conditioned on `(y, z0)`.
pub fn train_point_prior_on(
    latents: &LatentData,
    stats: &LatentStats,
    schedule: &NoiseSchedule,
    template: &BackboneConfig,
    cfg: &PriorTrainConfig,
) -> Result<(PointPrior, TrainHistory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xa5a5);
    let mut prior = PointPrior::new(template, latents.h.ncols(), latents.z.ncols(), latents.y.ncols(), stats.clone(), &mut rng)?;
    let h = stats.normalize_h(&latents.h);
    let z = stats.normalize_z(&latents.z);
    let normalized = LatentData {
        n: latents.n,
        z,
        h,
        y: latents.y.clone(),
        sigma: latents.sigma.clone(),
    };
    let mut store = prior.store.clone();
    let history = fit(&mut store, latents.len(), cfg, "point prior", |s, tape, idx, rng| {
        let (zb, hb, yb, _) = normalized.rows(idx);
        let view = StoreView { prior: &prior, store: s };
        diffusion_loss(&view, tape, &hb, idx.len(), &PointCond { y: yb, z0: zb }, schedule, rng)
    })?;
    prior.store = store;
    Ok((prior, history))
}

/// A prior evaluated against an explicit parameter store.
pub struct StoreView<'a, P> {
    pub prior: &'a P,
    pub store: &'a ParamStore,
}

impl Denoiser for StoreView<'_, GlobalPrior> {
    type Cond = Mat;

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &Mat) -> Var {
        self.prior.predict_with(self.store, tape, x_t, t, cond)
    }
}

impl Denoiser for StoreView<'_, PointPrior> {
    type Cond = PointCond;

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &PointCond) -> Var {
        self.prior.predict_with(self.store, tape, x_t, t, cond)
    }
}

pub fn train_global_prior(
    vae: &Vae,
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    schedule: &NoiseSchedule,
    model_cfg: GlobalPriorConfig,
    cfg: &PriorTrainConfig,
) -> Result<(GlobalPrior, LatentStats, TrainHistory)> {
    let latents = encode_dataset(vae, labeled, unlabeled)?;
    let stats = LatentStats::fit(&latents.z, &latents.h);
    let (prior, history) = train_global_prior_on(&latents, &stats, schedule, model_cfg, cfg)?;
    Ok((prior, stats, history))
}

pub fn train_point_prior(
    vae: &Vae,
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    schedule: &NoiseSchedule,
    template: &BackboneConfig,
    cfg: &PriorTrainConfig,
) -> Result<(PointPrior, TrainHistory)> {
    let latents = encode_dataset(vae, labeled, unlabeled)?;
    let stats = LatentStats::fit(&latents.z, &latents.h);
    train_point_prior_on(&latents, &stats, schedule, template, cfg)
}

/// The trained VAE, both priors and their shared schedule.
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub vae: Vae,
    pub global: GlobalPrior,
    pub point: PointPrior,
    pub schedule: NoiseSchedule,
}

impl GenerativeModel {
    pub fn stats(&self) -> &LatentStats {
        &self.point.stats
    }

    fn sigma_rows(y: &Mat, batch: usize) -> Mat {
        let n = y.nrows() / batch;
        let mut out = Mat::zeros((batch, y.ncols()));
        for b in 0..batch {
            let seg = y.slice(ndarray::s![b * n..(b + 1) * n, ..]);
            for j in 0..y.ncols() {
                out[[b, j]] = seg.column(j).sum() / n as f64;
            }
        }
        out
    }

    /// Hierarchical ancestral sampling of `(z0, h0)` for stacked masks `y`.
    pub fn sample_latents_batch(&self, y: &Mat, batch: usize, rng: &mut impl Rng) -> Result<(Mat, Mat)> {
        let sigma = Self::sigma_rows(y, batch);
        let zn = ancestral_sample(&self.global, (batch, self.vae.cfg.d_z), batch, &sigma, &self.schedule, true, rng)?;
        let cond = PointCond { y: y.clone(), z0: zn.clone() };
        let hn = ancestral_sample(&self.point, (y.nrows(), self.vae.cfg.d_h), batch, &cond, &self.schedule, true, rng)?;
        Ok((self.stats().denormalize_z(&zn), self.stats().denormalize_h(&hn)))
    }

    pub fn sample_latents(&self, y: &SegmentationEncoding, rng: &mut impl Rng) -> Result<(Mat, Mat)> {
        if !y.is_labeled() {
            return Err(Error::InvalidMask("sampling needs a labeled mask".into()));
        }
        self.sample_latents_batch(&y.matrix(), 1, rng)
    }

    /// A novel cloud whose rows carry the parts of `y`.
    pub fn generate(&self, y: &SegmentationEncoding, rng: &mut impl Rng) -> Result<PointCloud> {
        let (z, h) = self.sample_latents(y, rng)?;
        PointCloud::new(self.vae.decode(&h, &y.matrix(), &z, 1)?)
    }

    /// Encodes, diffuses both latents `tau` steps, denoises and decodes, for stacked clouds.
    pub fn diffuse_denoise_batch(&self, x: &Mat, y: &Mat, batch: usize, cfg: DiffuseDenoiseConfig, rng: &mut impl Rng) -> Result<Mat> {
        let (z0, h0) = self.vae.encode_means(x, y, batch)?;
        if cfg.tau == 0 {
            return self.vae.decode(&h0, y, &z0, batch);
        }
        let stats = self.stats();
        let sigma = Self::sigma_rows(y, batch);
        let zn = diffuse_denoise(&self.global, &stats.normalize_z(&z0), batch, &sigma, cfg, &self.schedule, rng)?;
        let cond = PointCond { y: y.clone(), z0: zn.clone() };
        let hn = diffuse_denoise(&self.point, &stats.normalize_h(&h0), batch, &cond, cfg, &self.schedule, rng)?;
        self.vae.decode(&stats.denormalize_h(&hn), y, &stats.denormalize_z(&zn), batch)
    }

    pub fn diffuse_denoise_latents(&self, x: &PointCloud, y: &SegmentationEncoding, cfg: DiffuseDenoiseConfig, rng: &mut impl Rng) -> Result<PointCloud> {
        let out = self.diffuse_denoise_batch(x.points(), &y.matrix(), 1, cfg, rng)?;
        PointCloud::new(out)
    }
}

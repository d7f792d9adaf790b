//! Hierarchical VAE over labeled clouds: a global encoder, a point-level
//! encoder and a point-level decoder trained on the negative ELBO.

use partgda_tape::{Adam, Linear, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Payload};
use crate::dataset::{LabeledCloud, LabeledSet, UnlabeledSet};
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::geometry::{Mat, PointCloud, SegmentationEncoding};

pub const LOGVAR_MIN: f64 = -10.0;
/// Initial point-posterior log-variance.
pub const INIT_LOGVAR: f64 = -6.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub parts: usize,
    pub d_z: usize,
    pub d_h: usize,
    /// Per-point MLP widths of the global encoder before max-pooling.
    pub global_widths: Vec<usize>,
    pub encoder: BackboneConfig,
    pub decoder: BackboneConfig,
}

impl VaeConfig {
    /// Builds encoder and decoder backbones from one level template.
    pub fn new(parts: usize, d_z: usize, d_h: usize, template: &BackboneConfig) -> Self {
        let mut encoder = template.clone();
        encoder.in_width = 3;
        encoder.out_width = 2 * d_h;
        encoder.parts = parts;
        encoder.z_width = d_z;
        encoder.t_embed = 0;
        let mut decoder = encoder.clone();
        decoder.in_width = d_h;
        decoder.out_width = 3;
        Self {
            parts,
            d_z,
            d_h,
            global_widths: vec![64, 128],
            encoder,
            decoder,
        }
    }

    pub fn desk(parts: usize) -> Self {
        Self::new(parts, 64, 4, &BackboneConfig::desk(3, 3, parts))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h < 3 {
            return Err(Error::Config(format!("point latent width {} must hold the 3 coordinates", self.d_h)));
        }
        if self.d_z == 0 || self.global_widths.is_empty() || self.global_widths.contains(&0) {
            return Err(Error::Config("global latent and encoder widths must be positive".into()));
        }
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub lambda_z: f64,
    pub lambda_h: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub rng_seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            lambda_z: 1e-2,
            lambda_h: 1e-2,
            epochs: 400,
            batch_size: 8,
            lr: 1e-3,
            grad_clip: Some(100.0),
            rng_seed: 0,
        }
    }
}

/// Diagonal Gaussian on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: Var,
    pub logvar: Var,
}

/// Diagonal Gaussian as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Mat,
    pub logvar: Mat,
}

impl GaussianPosterior {
    pub fn values(&self, tape: &Tape) -> Posterior {
        Posterior {
            mean: tape.value(self.mean).clone(),
            logvar: tape.value(self.logvar).clone(),
        }
    }
}

/// `mean + exp(logvar / 2) · ε`.
pub fn reparameterize(tape: &mut Tape, post: GaussianPosterior, eps: &Mat) -> Var {
    let half = tape.scale(post.logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e);
    tape.add(post.mean, noise)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over all entries.
pub fn kl_standard_normal(tape: &mut Tape, post: GaussianPosterior) -> Var {
    let m2 = tape.square(post.mean);
    let var = tape.exp(post.logvar);
    let s = tape.add(m2, var);
    let s = tape.sub(s, post.logvar);
    let s = tape.offset(s, -1.0);
    let s = tape.sum(s);
    tape.scale(s, 0.5)
}

#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    layers: Vec<Linear>,
    head: Linear,
    d_z: usize,
}

impl GlobalEncoder {
    fn new(cfg: &VaeConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = 3 + cfg.parts;
        for (i, &w) in cfg.global_widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("phi_z.mlp{i}"), width, w, rng)?);
            width = w;
        }
        let head = Linear::new(store, "phi_z.head", width, 2 * cfg.d_z, rng)?;
        Ok(Self { layers, head, d_z: cfg.d_z })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, y: Var, batch: usize) -> GaussianPosterior {
        let n = tape.shape(x).0 / batch;
        let mut h = tape.concat(&[x, y]);
        for l in &self.layers {
            h = l.forward(tape, store, h);
            h = tape.silu(h);
        }
        let g = tape.segment_max(h, n);
        let out = self.head.forward(tape, store, g);
        let mean = tape.slice_cols(out, 0, self.d_z);
        let lv = tape.slice_cols(out, self.d_z, self.d_z);
        let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        GaussianPosterior { mean, logvar }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboComponents {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_h: f64,
    pub total: f64,
}

/// Stacked clouds and masks of one minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Mat,
    pub y: Mat,
    pub size: usize,
}

impl Batch {
    pub fn new(samples: &[&LabeledCloud]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (n, c) = (first.cloud.len(), first.mask.parts());
        let mut x = Mat::zeros((samples.len() * n, 3));
        let mut y = Mat::zeros((samples.len() * n, c));
        for (b, s) in samples.iter().enumerate() {
            if s.cloud.len() != n || s.mask.len() != n || s.mask.parts() != c {
                return Err(Error::Shape(format!("sample {} does not match the batch shape", s.id)));
            }
            x.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(s.cloud.points());
            y.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&s.mask.matrix());
        }
        Ok(Self { x, y, size: samples.len() })
    }

    pub fn single(cloud: &PointCloud, mask: &SegmentationEncoding) -> Result<Self> {
        if cloud.len() != mask.len() {
            return Err(Error::Shape(format!("{} points but {} mask rows", cloud.len(), mask.len())));
        }
        Ok(Self {
            x: cloud.points().clone(),
            y: mask.matrix(),
            size: 1,
        })
    }

    pub fn points_per_sample(&self) -> usize {
        self.x.nrows() / self.size
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub phi_z: GlobalEncoder,
    pub phi_h: Backbone,
    pub xi_h: Backbone,
}

impl Vae {
    pub fn new(cfg: VaeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let phi_z = GlobalEncoder::new(&cfg, &mut store, rng)?;
        let phi_h = Backbone::new(cfg.encoder.clone(), &mut store, "phi_h", rng)?;
        let xi_h = Backbone::new(cfg.decoder.clone(), &mut store, "xi_h", rng)?;
        // Both point networks start as the identity map with a narrow posterior.
        for (name, width) in [("phi_h", 2 * cfg.d_h), ("xi_h", 3)] {
            let w = store.value(store.id(&format!("{name}.head.weight")).expect("backbone head")).dim();
            store.set(&format!("{name}.head.weight"), Mat::zeros(w))?;
            let mut bias = Mat::zeros((1, width));
            if name == "phi_h" {
                bias.slice_mut(ndarray::s![.., cfg.d_h..]).fill(INIT_LOGVAR);
            }
            store.set(&format!("{name}.head.bias"), bias)?;
        }
        Ok(Self {
            cfg,
            store,
            phi_z,
            phi_h,
            xi_h,
        })
    }

    fn check(&self, x: &Mat, y: &Mat, batch: usize) -> Result<()> {
        if x.ncols() != 3 || y.nrows() != x.nrows() || y.ncols() != self.cfg.parts || batch == 0 || x.nrows() % batch != 0 {
            return Err(Error::Shape(format!(
                "points {:?} and mask {:?} do not align for {batch} clouds of {} parts",
                x.dim(),
                y.dim(),
                self.cfg.parts
            )));
        }
        Ok(())
    }

    pub fn encode_global_on(&self, store: &ParamStore, tape: &mut Tape, x: Var, y: &Mat, batch: usize) -> Result<GaussianPosterior> {
        self.check(tape.value(x), y, batch)?;
        let yv = tape.constant(y.clone());
        Ok(self.phi_z.forward(tape, store, x, yv, batch))
    }

    pub fn encode_points_on(&self, store: &ParamStore, tape: &mut Tape, x: Var, y: &Mat, z: Var, batch: usize) -> Result<GaussianPosterior> {
        self.check(tape.value(x), y, batch)?;
        let payload = Payload { y, z: Some(z), t: None };
        let out = self.phi_h.forward(tape, store, x, x, &payload, batch)?;
        let d_h = self.cfg.d_h;
        let delta = tape.slice_cols(out, 0, d_h);
        let rows = tape.shape(x).0;
        let pad = if d_h > 3 {
            let zeros = tape.constant(Mat::zeros((rows, d_h - 3)));
            tape.concat(&[x, zeros])
        } else {
            x
        };
        let mean = tape.add(pad, delta);
        let lv = tape.slice_cols(out, d_h, d_h);
        let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok(GaussianPosterior { mean, logvar })
    }

    pub fn decode_on(&self, store: &ParamStore, tape: &mut Tape, h: Var, y: &Mat, z: Var, batch: usize) -> Result<Var> {
        let (rows, width) = tape.shape(h);
        if width != self.cfg.d_h || y.dim() != (rows, self.cfg.parts) {
            return Err(Error::Shape(format!("latent {:?} and mask {:?} do not align", (rows, width), y.dim())));
        }
        let pos = tape.slice_cols(h, 0, 3);
        let payload = Payload { y, z: Some(z), t: None };
        let out = self.xi_h.forward(tape, store, pos, h, &payload, batch)?;
        Ok(tape.add(pos, out))
    }

    /// Global posterior for stacked clouds.
    pub fn encode_global(&self, x: &Mat, y: &Mat, batch: usize) -> Result<Posterior> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.encode_global_on(&self.store, &mut tape, xv, y, batch)?.values(&tape))
    }

    pub fn encode_points(&self, x: &Mat, y: &Mat, z: &Mat, batch: usize) -> Result<Posterior> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z.clone());
        Ok(self.encode_points_on(&self.store, &mut tape, xv, y, zv, batch)?.values(&tape))
    }

    pub fn decode(&self, h: &Mat, y: &Mat, z: &Mat, batch: usize) -> Result<Mat> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let zv = tape.constant(z.clone());
        let out = self.decode_on(&self.store, &mut tape, hv, y, zv, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Posterior-mean latents `(z0, h0)`.
    pub fn encode_means(&self, x: &Mat, y: &Mat, batch: usize) -> Result<(Mat, Mat)> {
        let z = self.encode_global(x, y, batch)?.mean;
        let h = self.encode_points(x, y, &z, batch)?.mean;
        Ok((z, h))
    }

    /// Decoding of the posterior means.
    pub fn reconstruct(&self, x: &Mat, y: &Mat, batch: usize) -> Result<Mat> {
        let (z, h) = self.encode_means(x, y, batch)?;
        self.decode(&h, y, &z, batch)
    }

    /// Negative ELBO with fixed reparameterisation noise, averaged over the batch.
    pub fn elbo_loss_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        cfg: &VaeTrainConfig,
        eps_z: &Mat,
        eps_h: &Mat,
    ) -> Result<(Var, ElboComponents)> {
        let x = tape.constant(batch.x.clone());
        let qz = self.encode_global_on(store, tape, x, &batch.y, batch.size)?;
        let z = reparameterize(tape, qz, eps_z);
        let qh = self.encode_points_on(store, tape, x, &batch.y, z, batch.size)?;
        let h = reparameterize(tape, qh, eps_h);
        let xhat = self.decode_on(store, tape, h, &batch.y, z, batch.size)?;
        let d = tape.sub(xhat, x);
        let sq = tape.square(d);
        let rec = tape.sum(sq);
        let inv = 1.0 / batch.size as f64;
        let rec = tape.scale(rec, 0.5 * inv);
        let kz = kl_standard_normal(tape, qz);
        let kz = tape.scale(kz, inv);
        let kh = kl_standard_normal(tape, qh);
        let kh = tape.scale(kh, inv);
        let wz = tape.scale(kz, cfg.lambda_z);
        let wh = tape.scale(kh, cfg.lambda_h);
        let total = tape.add(rec, wz);
        let total = tape.add(total, wh);
        let comps = ElboComponents {
            recon: tape.scalar(rec),
            kl_z: tape.scalar(kz),
            kl_h: tape.scalar(kh),
            total: tape.scalar(total),
        };
        if !comps.total.is_finite() {
            return Err(Error::NonFinite { stage: "elbo", step: 0 });
        }
        Ok((total, comps))
    }

    pub fn elbo_loss(&self, store: &ParamStore, tape: &mut Tape, batch: &Batch, cfg: &VaeTrainConfig, rng: &mut impl Rng) -> Result<(Var, ElboComponents)> {
        let eps_z = standard_normal(rng, (batch.size, self.cfg.d_z));
        let eps_h = standard_normal(rng, (batch.x.nrows(), self.cfg.d_h));
        self.elbo_loss_with(store, tape, batch, cfg, &eps_z, &eps_h)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean loss per epoch.
    pub loss: Vec<f64>,
}

/// Union of labeled samples and zero-padded unlabeled samples.
pub fn union_set(labeled: &LabeledSet, unlabeled: &UnlabeledSet, parts: usize) -> Result<LabeledSet> {
    let mut all = labeled.clone();
    all.extend(unlabeled.zero_padded(parts)?);
    all.validate()?;
    Ok(all)
}

/// Shuffled minibatches of sample indices for one epoch.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// First training stage: minimises the mean negative ELBO.
pub fn train_vae(labeled: &LabeledSet, unlabeled: &UnlabeledSet, model_cfg: VaeConfig, cfg: &VaeTrainConfig) -> Result<(Vae, TrainHistory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let data = union_set(labeled, unlabeled, model_cfg.parts)?;
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut vae = Vae::new(model_cfg, &mut rng)?;
    let mut opt = Adam::new(cfg.lr);
    if let Some(c) = cfg.grad_clip {
        opt = opt.with_grad_clip(c);
    }
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let samples: Vec<&LabeledCloud> = idx.iter().map(|&i| &data.samples[i]).collect();
            let batch = Batch::new(&samples)?;
            let mut tape = Tape::new();
            let (loss, comps) = match vae.elbo_loss(&vae.store, &mut tape, &batch, cfg, &mut rng) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { stage: "vae", epoch }),
                Err(e) => return Err(e),
            };
            let grads = tape.backward(loss).params(&tape);
            drop(tape);
            opt.step(&mut vae.store, &grads);
            total += comps.total * batch.size as f64;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { stage: "vae", epoch });
        }
        history.loss.push(mean);
    }
    Ok((vae, history))
}

/// Mean per-point Euclidean distance between stacked clouds.
pub fn mean_point_distance(a: &Mat, b: &Mat) -> f64 {
    let d = a - b;
    d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / a.nrows() as f64
}

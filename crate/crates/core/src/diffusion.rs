//! Discrete-time denoising diffusion: schedule, forward perturbation,
//! noise-prediction loss, ancestral sampling and diffuse-denoise.

use partgda_tape::{Linear, ParamStore, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Coefficients at 1-based step `t`.
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// Linear beta schedule over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!("beta range ({beta_min}, {beta_max}) must satisfy 0 < min ≤ max < 1")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
    })
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).expect("valid defaults")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffuseDenoiseConfig {
    pub tau: usize,
    pub include_eta: bool,
}

/// Noise predictor `ε_θ(x_t, t, cond)`.
///
/// `x_t` stacks `t.len()` samples of equal row count; the output has the
/// shape of `x_t`.
pub trait Denoiser {
    type Cond: ?Sized;

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &Self::Cond) -> Var;
}

pub fn standard_normal(rng: &mut impl Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn check_t(t: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > schedule.steps {
        return Err(Error::Config(format!("timestep {t} outside 1..={}", schedule.steps)));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(x0: &Mat, t: usize, eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    check_t(t, schedule)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.dim(), eps.dim())));
    }
    let ab = schedule.alpha_bar_at(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// [`q_sample`] over stacked samples, each with its own step.
pub fn q_sample_batch(x0: &Mat, ts: &[usize], eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    if x0.dim() != eps.dim() || ts.is_empty() || x0.nrows() % ts.len() != 0 {
        return Err(Error::Shape(format!("x0 {:?}, noise {:?}, {} steps", x0.dim(), eps.dim(), ts.len())));
    }
    let seg = x0.nrows() / ts.len();
    let mut out = Mat::zeros(x0.dim());
    for (b, &t) in ts.iter().enumerate() {
        check_t(t, schedule)?;
        let ab = schedule.alpha_bar_at(t);
        for r in b * seg..(b + 1) * seg {
            for c in 0..x0.ncols() {
                out[[r, c]] = ab.sqrt() * x0[[r, c]] + (1.0 - ab).sqrt() * eps[[r, c]];
            }
        }
    }
    Ok(out)
}

/// Mean squared noise-prediction error for given steps and noise.
pub fn diffusion_loss_with<D: Denoiser>(
    model: &D,
    tape: &mut Tape,
    x0: &Mat,
    cond: &D::Cond,
    schedule: &NoiseSchedule,
    ts: &[usize],
    eps: &Mat,
) -> Result<Var> {
    let x_t = q_sample_batch(x0, ts, eps, schedule)?;
    let x_t = tape.constant(x_t);
    let pred = model.predict(tape, x_t, ts, cond);
    if tape.shape(pred) != eps.dim() {
        return Err(Error::Shape(format!("denoiser returned {:?} for state {:?}", tape.shape(pred), eps.dim())));
    }
    if tape.value(pred).iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { stage: "denoiser", step: 0 });
    }
    let target = tape.constant(eps.clone());
    let d = tape.sub(pred, target);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Single-sample estimate of `E ||ε_θ(x_t, t, cond) − ε||²` with `t` uniform
/// on `1..=T` per sample, averaged over elements.
pub fn diffusion_loss<D: Denoiser>(
    model: &D,
    tape: &mut Tape,
    x0: &Mat,
    batch: usize,
    cond: &D::Cond,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var> {
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps)).collect();
    let eps = standard_normal(rng, x0.dim());
    diffusion_loss_with(model, tape, x0, cond, schedule, &ts, &eps)
}

/// Runs the reverse update from step `from` down to 0.
pub fn reverse_chain<D: Denoiser>(
    model: &D,
    mut x: Mat,
    from: usize,
    batch: usize,
    cond: &D::Cond,
    schedule: &NoiseSchedule,
    include_eta: bool,
    rng: &mut impl Rng,
) -> Result<Mat> {
    if from > schedule.steps {
        return Err(Error::Config(format!("chain depth {from} exceeds {} steps", schedule.steps)));
    }
    for t in (1..=from).rev() {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ts = vec![t; batch];
        let eps = model.predict(&mut tape, xv, &ts, cond);
        let eps = tape.value(eps);
        let (beta, alpha, ab) = (schedule.beta_at(t), schedule.alpha_at(t), schedule.alpha_bar_at(t));
        let k = beta / (1.0 - ab).sqrt();
        x.zip_mut_with(eps, |xi, &e| *xi = (*xi - k * e) / alpha.sqrt());
        if include_eta && t > 1 {
            let sigma = beta.sqrt();
            x.mapv_inplace(|xi| xi + sigma * rng.sample::<f64, _>(StandardNormal));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "reverse chain", step: t });
        }
    }
    Ok(x)
}

/// Full `T`-step generation from `x_T ~ N(0, I)`.
pub fn ancestral_sample<D: Denoiser>(
    model: &D,
    shape: (usize, usize),
    batch: usize,
    cond: &D::Cond,
    schedule: &NoiseSchedule,
    include_eta: bool,
    rng: &mut impl Rng,
) -> Result<Mat> {
    let x_t = standard_normal(rng, shape);
    reverse_chain(model, x_t, schedule.steps, batch, cond, schedule, include_eta, rng)
}

/// Diffuses `x0` for `tau` steps, then denoises back to step 0.
pub fn diffuse_denoise<D: Denoiser>(
    model: &D,
    x0: &Mat,
    batch: usize,
    cond: &D::Cond,
    cfg: DiffuseDenoiseConfig,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Mat> {
    if cfg.tau > schedule.steps {
        return Err(Error::Config(format!("tau {} exceeds {} steps", cfg.tau, schedule.steps)));
    }
    if cfg.tau == 0 {
        return Ok(x0.clone());
    }
    let eps = standard_normal(rng, x0.dim());
    let x_tau = q_sample(x0, cfg.tau, &eps, schedule)?;
    reverse_chain(model, x_tau, cfg.tau, batch, cond, schedule, cfg.include_eta, rng)
}

/// Sinusoidal embedding of each step, repeated `repeat` times per step.
pub fn timestep_embedding(ts: &[usize], width: usize, repeat: usize) -> Mat {
    let half = width / 2;
    let mut out = Mat::zeros((ts.len() * repeat, width));
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
            let (s, c) = (t as f64 * freq).sin_cos();
            for r in b * repeat..(b + 1) * repeat {
                out[[r, i]] = s;
                out[[r, half + i]] = c;
            }
        }
    }
    out
}

/// Two-layer perceptron on `concat(x_t, t-embedding)`; a compact reference denoiser.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    pub store: ParamStore,
    pub embed_width: usize,
    pub l1: Linear,
    pub l2: Linear,
}

impl MlpDenoiser {
    pub fn new(dim: usize, hidden: usize, embed_width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", dim + embed_width, hidden, rng)?;
        let l2 = Linear::new(&mut store, "l2", hidden, dim, rng)?;
        Ok(Self {
            store,
            embed_width,
            l1,
            l2,
        })
    }

    pub fn predict_with(&self, store: &ParamStore, tape: &mut Tape, x_t: Var, t: &[usize]) -> Var {
        let per = tape.shape(x_t).0 / t.len();
        let emb = tape.constant(timestep_embedding(t, self.embed_width, per));
        let h = tape.concat(&[x_t, emb]);
        let h = self.l1.forward(tape, store, h);
        let h = tape.silu(h);
        self.l2.forward(tape, store, h)
    }
}

impl Denoiser for MlpDenoiser {
    type Cond = ();

    fn predict(&self, tape: &mut Tape, x_t: Var, t: &[usize], _: &()) -> Var {
        self.predict_with(&self.store, tape, x_t, t)
    }
}

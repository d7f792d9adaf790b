//! Part-aware point-voxel network: a U-shaped stack of levels, each applying
//! segmentation conditioning, a point-voxel convolution and global attention,
//! joined by set abstraction and feature propagation.

use std::rc::Rc;

use partgda_tape::{ConvPlan, Linear, ParamStore, Tape, TrilinearCache, Var, VoxelFrame};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::timestep_embedding;
use crate::error::{Error, Result};
use crate::geometry::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_width: usize,
    pub out_width: usize,
    pub parts: usize,
    pub y_embed: usize,
    /// Width of the broadcast global latent; 0 disables it.
    pub z_width: usize,
    /// Sinusoidal timestep embedding width; 0 disables it.
    pub t_embed: usize,
    pub widths: Vec<usize>,
    /// Voxel resolution of each level's convolution branch; `None` skips it.
    pub voxel_res: Vec<Option<usize>>,
    /// Channels scattered into the voxel grid; `None` uses the level width.
    #[serde(default)]
    pub voxel_width: Option<usize>,
    /// Point-count reduction between consecutive levels.
    pub ratio: usize,
    pub neighbors: usize,
    pub heads: usize,
}

impl BackboneConfig {
    /// Four levels as in the reference layout; the deepest has no voxel branch.
    pub fn standard(in_width: usize, out_width: usize, parts: usize) -> Self {
        Self {
            in_width,
            out_width,
            parts,
            y_embed: 16,
            z_width: 0,
            t_embed: 0,
            widths: vec![32, 64, 128, 128],
            voxel_res: vec![Some(16), Some(8), Some(4), None],
            voxel_width: None,
            ratio: 4,
            neighbors: 16,
            heads: 4,
        }
    }

    /// Three narrow levels sized for single-core training at n = 128.
    pub fn desk(in_width: usize, out_width: usize, parts: usize) -> Self {
        Self {
            in_width,
            out_width,
            parts,
            y_embed: 8,
            z_width: 0,
            t_embed: 0,
            widths: vec![32, 48, 64],
            voxel_res: vec![Some(8), Some(4), None],
            voxel_width: Some(8),
            ratio: 4,
            neighbors: 8,
            heads: 2,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Points at each level for an input of `n` points.
    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        (0..self.levels()).map(|l| n / self.ratio.pow(l as u32)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return bad("backbone widths must be positive".into());
        }
        if self.voxel_res.len() != self.levels() {
            return bad(format!("{} voxel resolutions for {} levels", self.voxel_res.len(), self.levels()));
        }
        if self.voxel_res.iter().flatten().any(|&r| r < 2) {
            return bad("voxel resolutions must be at least 2".into());
        }
        if self.levels() > 1 && self.ratio < 2 {
            return bad("downsample ratio must be at least 2".into());
        }
        if self.widths.iter().any(|w| w % self.heads != 0) || self.heads == 0 {
            return bad(format!("widths {:?} must divide into {} heads", self.widths, self.heads));
        }
        if self.voxel_width == Some(0) {
            return bad("voxel width must be positive".into());
        }
        if self.in_width == 0 || self.out_width == 0 || self.parts < 2 || self.neighbors == 0 {
            return bad("backbone input, output, part and neighbour sizes must be positive".into());
        }
        Ok(())
    }

    /// Rejects point counts whose deepest level would hold fewer than eight points.
    pub fn check_points(&self, n: usize) -> Result<()> {
        let deepest = *self.level_sizes(n).last().unwrap();
        if deepest < 8 || (self.levels() > 1 && n % self.ratio.pow(self.levels() as u32 - 1) != 0) {
            return Err(Error::Config(format!(
                "{n} points leave {deepest} at the deepest level; need at least 8 and an exact reduction"
            )));
        }
        Ok(())
    }
}

/// Per-point conditioning carried alongside the features.
pub struct Payload<'a> {
    /// Segmentation encoding, `(batch·n) × c`.
    pub y: &'a Mat,
    /// Global latent, `batch × z_width`.
    pub z: Option<Var>,
    /// One diffusion step per sample.
    pub t: Option<&'a [usize]>,
}

/// Deterministic farthest-point selection of `m` rows of one cloud.
///
/// Starts from the point farthest from the centroid; ties go to the lowest index.
pub fn farthest_point_sample(pos: &[[f64; 3]], m: usize) -> Vec<usize> {
    let n = pos.len();
    let mut centroid = [0.0; 3];
    for p in pos {
        for a in 0..3 {
            centroid[a] += p[a] / n as f64;
        }
    }
    let d2 = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    };
    let from_centre: Vec<f64> = pos.iter().map(|p| d2(p, &centroid)).collect();
    let mut chosen = vec![argmax(&from_centre)];
    let mut dist: Vec<f64> = pos.iter().map(|p| d2(p, &pos[chosen[0]])).collect();
    while chosen.len() < m.min(n) {
        let next = argmax(&dist);
        chosen.push(next);
        for (i, p) in pos.iter().enumerate() {
            dist[i] = dist[i].min(d2(p, &pos[next]));
        }
    }
    chosen
}

/// Indices of the `k` rows of `src` nearest to `q`, ordered by distance then index.
pub fn nearest(src: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = src
        .iter()
        .enumerate()
        .map(|(i, p)| ((0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>(), i))
        .collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k.saturating_sub(1), |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|x| x.1).collect()
}

fn rows_of(m: &Mat) -> Vec<[f64; 3]> {
    m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

/// Segmentation conditioning: `SiLU(W · concat(features, y_embed))`.
#[derive(Clone, Debug)]
pub struct ScBlock {
    pub fuse: Linear,
}

impl ScBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, embed: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fuse: Linear::new(store, &format!("{name}.fuse"), width + embed, width, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, y_embed: Var) -> Result<Var> {
        if tape.shape(features).0 != tape.shape(y_embed).0 {
            return Err(Error::Shape(format!(
                "{} feature rows but {} conditioning rows",
                tape.shape(features).0,
                tape.shape(y_embed).0
            )));
        }
        let u = tape.concat(&[features, y_embed]);
        let u = self.fuse.forward(tape, store, u);
        Ok(tape.silu(u))
    }
}

/// Multi-head softmax self-attention over each cloud with a residual.
#[derive(Clone, Debug)]
pub struct GaBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl GaBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::without_bias(store, &format!("{name}.q"), width, width, rng)?,
            k: Linear::without_bias(store, &format!("{name}.k"), width, width, rng)?,
            v: Linear::without_bias(store, &format!("{name}.v"), width, width, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
        })
    }

    /// Returns the output and the attention node (for inspecting weights).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, seg: usize) -> (Var, Var) {
        let q = self.q.forward(tape, store, features);
        let k = self.k.forward(tape, store, features);
        let v = self.v.forward(tape, store, features);
        let a = tape.attention(q, k, v, seg, self.heads);
        let o = self.o.forward(tape, store, a);
        (tape.add(features, o), a)
    }
}

/// Point-voxel convolution: point branch `W_p · concat(f, z)` plus a voxel
/// branch (optional channel reduction, scatter-mean, 3×3×3 convolution,
/// trilinear gather).
#[derive(Clone, Debug)]
pub struct PvcBlock {
    pub point: Linear,
    pub reduce: Option<Linear>,
    pub conv_weight: partgda_tape::ParamId,
    pub conv_bias: partgda_tape::ParamId,
    pub resolution: usize,
}

/// Voxelisation shared by every block of one level.
pub struct VoxelPlan {
    pub frame: VoxelFrame,
    pub cells: Rc<Vec<usize>>,
    pub conv: Rc<ConvPlan>,
    pub batch: usize,
}

impl VoxelPlan {
    pub fn new(pos: &Mat, resolution: usize, batch: usize) -> Self {
        let frame = VoxelFrame::new(resolution, -1.0, 1.0);
        let per = pos.nrows() / batch;
        let cells: Vec<usize> = pos
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i / per) * frame.cells() + frame.nearest_cell([r[0], r[1], r[2]]))
            .collect();
        let touched = TrilinearCache::new(pos, frame, batch).touched_cells();
        Self {
            frame,
            cells: Rc::new(cells),
            conv: Rc::new(ConvPlan::new(frame, batch, touched)),
            batch,
        }
    }
}

impl PvcBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        z_width: usize,
        resolution: usize,
        voxel_width: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let point = Linear::new(store, &format!("{name}.point"), width + z_width, width, rng)?;
        let reduce = match voxel_width {
            Some(v) if v != width => Some(Linear::without_bias(store, &format!("{name}.reduce"), width, v, rng)?),
            _ => None,
        };
        let cin = voxel_width.unwrap_or(width);
        let conv_weight = store.init_uniform(format!("{name}.conv.weight"), (27 * cin, width), 27 * cin, 1.0, rng)?;
        let conv_bias = store.zeros(format!("{name}.conv.bias"), (1, width))?;
        Ok(Self {
            point,
            reduce,
            conv_weight,
            conv_bias,
            resolution,
        })
    }

    pub fn voxel_branch(&self, tape: &mut Tape, store: &ParamStore, pos: Var, features: Var, plan: &VoxelPlan) -> Var {
        let features = match &self.reduce {
            Some(r) => r.forward(tape, store, features),
            None => features,
        };
        let grid = tape.scatter_mean(features, plan.cells.clone(), plan.batch * plan.frame.cells());
        let w = tape.param(store, self.conv_weight);
        let b = tape.param(store, self.conv_bias);
        let g = tape.conv3d(grid, w, plan.conv.clone());
        let g = tape.add_row(g, b);
        let g = tape.silu(g);
        tape.trilinear_rows(g, pos, plan.frame, plan.batch, plan.conv.rows())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pos: Var, features: Var, z: Option<Var>, plan: &VoxelPlan) -> Var {
        let u = match z {
            Some(z) => tape.concat(&[features, z]),
            None => features,
        };
        let p = self.point.forward(tape, store, u);
        let v = self.voxel_branch(tape, store, pos, features, plan);
        let s = tape.add(p, v);
        let s = tape.silu(s);
        tape.add(features, s)
    }
}

#[derive(Clone, Debug)]
struct Level {
    sc: ScBlock,
    t_proj: Option<Linear>,
    pvc: Option<PvcBlock>,
    ga: GaBlock,
    /// Set abstraction into this level (absent at level 0).
    down: Option<Linear>,
    /// Feature propagation out of the level below into this one (absent at the deepest level).
    up: Option<Linear>,
}

/// Indices describing how one forward pass resamples the point set.
pub struct Resampling {
    pub sizes: Vec<usize>,
    /// Global row indices of each level's points into the level above.
    pub centers: Vec<Rc<Vec<usize>>>,
    /// `k` neighbours per centre (global rows of the level above), flattened.
    pub groups: Vec<Rc<Vec<usize>>>,
    /// Three nearest coarse points for every fine point (global rows).
    pub interp: Vec<Rc<Vec<[usize; 3]>>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    input: Linear,
    y_embed: Linear,
    levels: Vec<Level>,
    head: Linear,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(store, &format!("{name}.input"), cfg.in_width, cfg.widths[0], rng)?;
        let y_embed = Linear::without_bias(store, &format!("{name}.y_embed"), cfg.parts, cfg.y_embed, rng)?;
        let mut levels = Vec::new();
        for (l, &w) in cfg.widths.iter().enumerate() {
            let p = format!("{name}.l{l}");
            let down = if l > 0 {
                let prev = cfg.widths[l - 1];
                Some(Linear::new(store, &format!("{p}.sa"), prev + 3, w, rng)?)
            } else {
                None
            };
            let up = if l + 1 < cfg.levels() {
                let below = cfg.widths[l + 1];
                Some(Linear::new(store, &format!("{p}.fp"), below + w + cfg.y_embed, w, rng)?)
            } else {
                None
            };
            levels.push(Level {
                sc: ScBlock::new(store, &format!("{p}.sc"), w, cfg.y_embed, rng)?,
                t_proj: if cfg.t_embed > 0 {
                    Some(Linear::new(store, &format!("{p}.t"), cfg.t_embed, w, rng)?)
                } else {
                    None
                },
                pvc: match cfg.voxel_res[l] {
                    Some(r) => Some(PvcBlock::new(store, &format!("{p}.pvc"), w, cfg.z_width, r, cfg.voxel_width, rng)?),
                    None => None,
                },
                ga: GaBlock::new(store, &format!("{p}.ga"), w, cfg.heads, rng)?,
                down,
                up,
            });
        }
        let head = Linear::new(store, &format!("{name}.head"), cfg.widths[0], cfg.out_width, rng)?;
        Ok(Self {
            cfg,
            input,
            y_embed,
            levels,
            head,
        })
    }

    pub fn y_embed_weight(&self) -> partgda_tape::ParamId {
        self.y_embed.weight
    }

    /// Selection and neighbour indices for `pos` (`(batch·n) × 3`).
    pub fn resampling(&self, pos: &Mat, batch: usize) -> Result<Resampling> {
        let n = pos.nrows() / batch;
        self.cfg.check_points(n)?;
        let sizes = self.cfg.level_sizes(n);
        let mut centers = Vec::new();
        let mut groups = Vec::new();
        let mut interp = Vec::new();
        let mut level_pos: Vec<Vec<[f64; 3]>> = (0..batch).map(|b| rows_of(&pos.slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned())).collect();
        for l in 1..sizes.len() {
            let (prev, m) = (sizes[l - 1], sizes[l]);
            let k = self.cfg.neighbors.min(prev);
            let mut c = Vec::with_capacity(batch * m);
            let mut g = Vec::with_capacity(batch * m * k);
            let mut it = Vec::with_capacity(batch * prev);
            let mut next_pos = Vec::with_capacity(batch);
            for (b, lp) in level_pos.iter().enumerate() {
                let sel = farthest_point_sample(lp, m);
                let coarse: Vec<[f64; 3]> = sel.iter().map(|&i| lp[i]).collect();
                for &i in &sel {
                    c.push(b * prev + i);
                    g.extend(nearest(lp, &lp[i], k).into_iter().map(|j| b * prev + j));
                }
                for p in lp {
                    let nb = nearest(&coarse, p, 3);
                    it.push([b * m + nb[0], b * m + nb[1], b * m + nb[2]]);
                }
                next_pos.push(coarse);
            }
            centers.push(Rc::new(c));
            groups.push(Rc::new(g));
            interp.push(Rc::new(it));
            level_pos = next_pos;
        }
        Ok(Resampling {
            sizes,
            centers,
            groups,
            interp,
        })
    }

    /// Per-point output `(batch·n) × out_width` for positions `pos` and input features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pos: Var, features: Var, payload: &Payload, batch: usize) -> Result<Var> {
        let rows = tape.shape(pos).0;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!("{rows} rows do not split into {batch} clouds")));
        }
        if tape.shape(features) != (rows, self.cfg.in_width) {
            return Err(Error::Shape(format!("features {:?}, expected ({rows}, {})", tape.shape(features), self.cfg.in_width)));
        }
        if payload.y.dim() != (rows, self.cfg.parts) {
            return Err(Error::Shape(format!("conditioning {:?}, expected ({rows}, {})", payload.y.dim(), self.cfg.parts)));
        }
        if let Some(t) = payload.t {
            if t.len() != batch || self.cfg.t_embed == 0 {
                return Err(Error::Shape("timestep conditioning does not match the configuration".into()));
            }
        }
        if let Some(z) = payload.z {
            if tape.shape(z) != (batch, self.cfg.z_width) {
                return Err(Error::Shape(format!("global latent {:?}, expected ({batch}, {})", tape.shape(z), self.cfg.z_width)));
            }
        }
        let rs = self.resampling(&tape.value(pos).clone(), batch)?;
        let y = tape.constant(payload.y.clone());
        let mut ye = self.y_embed.forward(tape, store, y);
        let temb = payload.t.map(|t| timestep_embedding(t, self.cfg.t_embed, 1));
        let mut p = pos;
        let mut f = self.input.forward(tape, store, features);
        let mut skips: Vec<(Var, Var, Var)> = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            let n_l = rs.sizes[l];
            if l > 0 {
                let centers = rs.centers[l - 1].clone();
                let group = rs.groups[l - 1].clone();
                let k = group.len() / centers.len();
                let gp = tape.gather(p, group.clone());
                let rep: Vec<usize> = centers.iter().flat_map(|&c| std::iter::repeat_n(c, k)).collect();
                let cp = tape.gather(p, Rc::new(rep));
                let rel = tape.sub(gp, cp);
                let gf = tape.gather(f, group);
                let u = tape.concat(&[gf, rel]);
                let u = level.down.as_ref().unwrap().forward(tape, store, u);
                let u = tape.silu(u);
                f = tape.segment_max(u, k);
                p = tape.gather(p, centers.clone());
                ye = tape.gather(ye, centers);
            }
            f = level.sc.forward(tape, store, f, ye)?;
            if let (Some(proj), Some(temb)) = (&level.t_proj, &temb) {
                let te = tape.constant(temb.clone());
                let te = proj.forward(tape, store, te);
                let rows: Vec<usize> = (0..batch * n_l).map(|i| i / n_l).collect();
                let te = tape.gather(te, Rc::new(rows));
                f = tape.add(f, te);
            }
            if let Some(pvc) = &level.pvc {
                let zb = payload.z.map(|z| {
                    let rows: Vec<usize> = (0..batch * n_l).map(|i| i / n_l).collect();
                    tape.gather(z, Rc::new(rows))
                });
                let plan = VoxelPlan::new(tape.value(p), pvc.resolution, batch);
                f = pvc.forward(tape, store, p, f, zb, &plan);
            }
            f = level.ga.forward(tape, store, f, n_l).0;
            skips.push((f, p, ye));
        }
        for l in (0..self.levels.len() - 1).rev() {
            let (skip, fine_pos, fine_ye) = skips[l];
            let coarse_pos = skips[l + 1].1;
            let up = tape.idw(f, coarse_pos, fine_pos, rs.interp[l].clone());
            let u = tape.concat(&[up, skip, fine_ye]);
            let u = self.levels[l].up.as_ref().unwrap().forward(tape, store, u);
            f = tape.silu(u);
        }
        Ok(self.head.forward(tape, store, f))
    }
}

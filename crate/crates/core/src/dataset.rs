//! Procedural labeled shapes, semi-supervised splits and on-disk datasets.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, Mat, PointCloud, SegmentationEncoding};

/// A point cloud with its part mask (one-hot or zero-padded).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub id: String,
    pub cloud: PointCloud,
    pub mask: SegmentationEncoding,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledSet {
    pub samples: Vec<LabeledCloud>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledCloud {
    pub id: String,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct UnlabeledSet {
    pub samples: Vec<UnlabeledCloud>,
}

impl LabeledSet {
    pub fn new(samples: Vec<LabeledCloud>) -> Result<Self> {
        let set = Self { samples };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// `(n, c)` shared by all samples, or `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.cloud.len(), s.mask.parts()))
    }

    pub fn validate(&self) -> Result<()> {
        let Some((n, c)) = self.shape() else { return Ok(()) };
        for s in &self.samples {
            if s.cloud.len() != n || s.mask.len() != n || s.mask.parts() != c {
                return Err(Error::Shape(format!(
                    "sample {} has {} points / {}×{} mask, expected {n} points and {c} parts",
                    s.id,
                    s.cloud.len(),
                    s.mask.len(),
                    s.mask.parts()
                )));
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, other: LabeledSet) {
        self.samples.extend(other.samples);
    }

    pub fn get(&self, id: &str) -> Option<&LabeledCloud> {
        self.samples.iter().find(|s| s.id == id)
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Attaches zero-padded masks with `parts` columns.
    pub fn zero_padded(&self, parts: usize) -> Result<LabeledSet> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(LabeledCloud {
                    id: s.id.clone(),
                    cloud: s.cloud.clone(),
                    mask: SegmentationEncoding::zero_padded(s.cloud.len(), parts)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet { samples })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticFamily {
    Lollipop,
    Tablet,
    TripodLamp,
}

impl SyntheticFamily {
    pub const ALL: [SyntheticFamily; 3] = [Self::Lollipop, Self::Tablet, Self::TripodLamp];

    pub fn parts(self) -> usize {
        match self {
            Self::Lollipop | Self::Tablet => 2,
            Self::TripodLamp => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lollipop => "lollipop",
            Self::Tablet => "tablet",
            Self::TripodLamp => "tripod-lamp",
        }
    }
}

impl std::str::FromStr for SyntheticFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape family `{s}`")))
    }
}

pub type Range = (f64, f64);

/// Per-family primitive dimension ranges, sampled uniformly per shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ShapeRanges {
    /// Sphere head (part 0) on a cylindrical stick (part 1).
    Lollipop {
        head_radius: Range,
        stick_length: Range,
        stick_radius: Range,
    },
    /// Box top (part 0) on four cylindrical legs (part 1).
    Tablet {
        top_width: Range,
        top_depth: Range,
        top_thickness: Range,
        leg_length: Range,
        leg_radius: Range,
        /// Leg offset from the top's edge as a fraction of the half extent.
        leg_inset: Range,
    },
    /// Conical shade (part 0), vertical pole (part 1), three splayed legs (part 2).
    TripodLamp {
        shade_radius: Range,
        shade_height: Range,
        pole_length: Range,
        pole_radius: Range,
        leg_length: Range,
        leg_radius: Range,
        /// Leg angle from vertical, radians.
        leg_splay: Range,
    },
}

impl ShapeRanges {
    pub fn family(&self) -> SyntheticFamily {
        match self {
            Self::Lollipop { .. } => SyntheticFamily::Lollipop,
            Self::Tablet { .. } => SyntheticFamily::Tablet,
            Self::TripodLamp { .. } => SyntheticFamily::TripodLamp,
        }
    }

    pub fn default_for(family: SyntheticFamily) -> Self {
        match family {
            SyntheticFamily::Lollipop => Self::Lollipop {
                head_radius: (0.15, 0.7),
                stick_length: (0.3, 2.0),
                stick_radius: (0.02, 0.12),
            },
            SyntheticFamily::Tablet => Self::Tablet {
                top_width: (0.5, 2.0),
                top_depth: (0.3, 1.4),
                top_thickness: (0.03, 0.3),
                leg_length: (0.2, 1.6),
                leg_radius: (0.02, 0.12),
                leg_inset: (0.0, 0.45),
            },
            SyntheticFamily::TripodLamp => Self::TripodLamp {
                shade_radius: (0.1, 0.6),
                shade_height: (0.1, 0.6),
                pole_length: (0.3, 1.8),
                pole_radius: (0.015, 0.08),
                leg_length: (0.15, 0.9),
                leg_radius: (0.015, 0.06),
                leg_splay: (0.2, 1.3),
            },
        }
    }

    fn ranges(&self) -> Vec<(&'static str, Range)> {
        match *self {
            Self::Lollipop {
                head_radius,
                stick_length,
                stick_radius,
            } => vec![("head_radius", head_radius), ("stick_length", stick_length), ("stick_radius", stick_radius)],
            Self::Tablet {
                top_width,
                top_depth,
                top_thickness,
                leg_length,
                leg_radius,
                leg_inset,
            } => vec![
                ("top_width", top_width),
                ("top_depth", top_depth),
                ("top_thickness", top_thickness),
                ("leg_length", leg_length),
                ("leg_radius", leg_radius),
                ("leg_inset", leg_inset),
            ],
            Self::TripodLamp {
                shade_radius,
                shade_height,
                pole_length,
                pole_radius,
                leg_length,
                leg_radius,
                leg_splay,
            } => vec![
                ("shade_radius", shade_radius),
                ("shade_height", shade_height),
                ("pole_length", pole_length),
                ("pole_radius", pole_radius),
                ("leg_length", leg_length),
                ("leg_radius", leg_radius),
                ("leg_splay", leg_splay),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub ranges: ShapeRanges,
    pub n: usize,
    pub rng_seed: u64,
}

impl SyntheticShapeSpec {
    pub fn new(family: SyntheticFamily, n: usize, rng_seed: u64) -> Self {
        Self {
            ranges: ShapeRanges::default_for(family),
            n,
            rng_seed,
        }
    }

    pub fn family(&self) -> SyntheticFamily {
        self.ranges.family()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.family().parts();
        if self.n < c {
            return Err(Error::Config(format!("{} points cannot cover {c} parts", self.n)));
        }
        for (name, (lo, hi)) in self.ranges.ranges() {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is not an ordered pair")));
            }
            let may_be_zero = matches!(name, "leg_inset" | "leg_splay");
            if lo < 0.0 || (!may_be_zero && lo <= 0.0) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) gives a part with no surface")));
            }
        }
        if let ShapeRanges::Tablet { leg_inset, .. } = self.ranges {
            if leg_inset.1 >= 1.0 {
                return Err(Error::Config("leg_inset must stay below 1".into()));
            }
        }
        Ok(())
    }
}

enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Open cylinder from `base` along unit `axis`.
    Cylinder {
        base: [f64; 3],
        axis: [f64; 3],
        length: f64,
        radius: f64,
    },
    /// Closed axis-aligned box.
    Cuboid {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// Open cone with apex above a horizontal base circle.
    Cone {
        apex: [f64; 3],
        height: f64,
        radius: f64,
    },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Self::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Self::Cylinder { length, radius, .. } => 2.0 * PI * radius * length,
            Self::Cuboid { half: [a, b, c], .. } => 8.0 * (a * b + b * c + a * c),
            Self::Cone { height, radius, .. } => PI * radius * (radius * radius + height * height).sqrt(),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            Self::Sphere { center, radius } => {
                let d = loop {
                    let v: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                    let r2 = v.iter().map(|x| x * x).sum::<f64>();
                    if r2 > 1e-6 && r2 <= 1.0 {
                        break v.map(|x| x / r2.sqrt());
                    }
                };
                [0, 1, 2].map(|a| center[a] + radius * d[a])
            }
            Self::Cylinder {
                base,
                axis,
                length,
                radius,
            } => {
                let (u, v) = orthonormal(axis);
                let theta = rng.random_range(0.0..2.0 * PI);
                let s = rng.random_range(0.0..length);
                [0, 1, 2].map(|a| base[a] + s * axis[a] + radius * (theta.cos() * u[a] + theta.sin() * v[a]))
            }
            Self::Cuboid { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, &f) in faces.iter().enumerate() {
                    if pick < f {
                        axis = a;
                        break;
                    }
                    pick -= f;
                }
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                [0, 1, 2].map(|a| {
                    if a == axis {
                        center[a] + side * half[a]
                    } else {
                        center[a] + rng.random_range(-half[a]..=half[a])
                    }
                })
            }
            Self::Cone { apex, height, radius } => {
                let s = rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..2.0 * PI);
                [apex[0] + s * radius * theta.cos(), apex[1] - s * height, apex[2] + s * radius * theta.sin()]
            }
        }
    }
}

fn orthonormal(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let u = cross(axis, helper);
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u = u.map(|x| x / norm);
    (u, cross(axis, u))
}

fn draw(rng: &mut impl Rng, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn build(ranges: &ShapeRanges, rng: &mut impl Rng) -> Vec<(usize, Primitive)> {
    match *ranges {
        ShapeRanges::Lollipop {
            head_radius,
            stick_length,
            stick_radius,
        } => {
            let r = draw(rng, head_radius);
            let len = draw(rng, stick_length);
            let sr = draw(rng, stick_radius);
            vec![
                (0, Primitive::Sphere { center: [0.0, 0.0, 0.0], radius: r }),
                (
                    1,
                    Primitive::Cylinder {
                        base: [0.0, -r, 0.0],
                        axis: [0.0, -1.0, 0.0],
                        length: len,
                        radius: sr,
                    },
                ),
            ]
        }
        ShapeRanges::Tablet {
            top_width,
            top_depth,
            top_thickness,
            leg_length,
            leg_radius,
            leg_inset,
        } => {
            let (w, d, t) = (draw(rng, top_width), draw(rng, top_depth), draw(rng, top_thickness));
            let (len, lr, inset) = (draw(rng, leg_length), draw(rng, leg_radius), draw(rng, leg_inset));
            let mut parts = vec![(
                0,
                Primitive::Cuboid {
                    center: [0.0, 0.0, 0.0],
                    half: [w / 2.0, t / 2.0, d / 2.0],
                },
            )];
            let (lx, lz) = ((w / 2.0 - lr) * (1.0 - inset), (d / 2.0 - lr) * (1.0 - inset));
            for (sx, sz) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                parts.push((
                    1,
                    Primitive::Cylinder {
                        base: [sx * lx, -t / 2.0, sz * lz],
                        axis: [0.0, -1.0, 0.0],
                        length: len,
                        radius: lr,
                    },
                ));
            }
            parts
        }
        ShapeRanges::TripodLamp {
            shade_radius,
            shade_height,
            pole_length,
            pole_radius,
            leg_length,
            leg_radius,
            leg_splay,
        } => {
            let (sr, sh) = (draw(rng, shade_radius), draw(rng, shade_height));
            let (pl, pr) = (draw(rng, pole_length), draw(rng, pole_radius));
            let (ll, lr, splay) = (draw(rng, leg_length), draw(rng, leg_radius), draw(rng, leg_splay));
            let top = pl / 2.0;
            let mut parts = vec![
                (
                    0,
                    Primitive::Cone {
                        apex: [0.0, top + sh * 0.5, 0.0],
                        height: sh,
                        radius: sr,
                    },
                ),
                (
                    1,
                    Primitive::Cylinder {
                        base: [0.0, top, 0.0],
                        axis: [0.0, -1.0, 0.0],
                        length: pl,
                        radius: pr,
                    },
                ),
            ];
            let phase = rng.random_range(0.0..2.0 * PI / 3.0);
            for k in 0..3 {
                let phi = phase + k as f64 * 2.0 * PI / 3.0;
                let axis = [splay.sin() * phi.cos(), -splay.cos(), splay.sin() * phi.sin()];
                parts.push((
                    2,
                    Primitive::Cylinder {
                        base: [0.0, -top, 0.0],
                        axis,
                        length: ll,
                        radius: lr,
                    },
                ));
            }
            parts
        }
    }
}

/// Splits `n` points across primitives in proportion to area (largest
/// remainder), then moves points so every part receives at least one.
fn allocate(prims: &[(usize, Primitive)], n: usize, parts: usize) -> Vec<usize> {
    let areas: Vec<f64> = prims.iter().map(|(_, p)| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..prims.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    for part in 0..parts {
        let has = prims.iter().zip(&counts).any(|((p, _), &k)| *p == part && k > 0);
        if !has {
            let target = (0..prims.len()).filter(|&i| prims[i].0 == part).max_by(|&a, &b| areas[a].total_cmp(&areas[b])).unwrap();
            let donor = (0..prims.len()).max_by_key(|&i| counts[i]).unwrap();
            counts[donor] -= 1;
            counts[target] += 1;
        }
    }
    counts
}

/// Expected per-part point counts under area-proportional allocation.
pub fn area_fractions(ranges: &ShapeRanges, rng: &mut impl Rng) -> Vec<f64> {
    let prims = build(ranges, rng);
    let total: f64 = prims.iter().map(|(_, p)| p.area()).sum();
    let mut out = vec![0.0; ranges.family().parts()];
    for (part, p) in &prims {
        out[*part] += p.area() / total;
    }
    out
}

fn sample_shape(spec: &SyntheticShapeSpec, rng: &mut impl Rng) -> Result<(PointCloud, SegmentationEncoding)> {
    let c = spec.family().parts();
    let prims = build(&spec.ranges, rng);
    let counts = allocate(&prims, spec.n, c);
    let mut rows: Vec<([f64; 3], usize)> = Vec::with_capacity(spec.n);
    for ((part, prim), &k) in prims.iter().zip(&counts) {
        for _ in 0..k {
            rows.push((prim.sample(rng), *part));
        }
    }
    rows.shuffle(rng);
    let pts: Vec<[f64; 3]> = rows.iter().map(|r| r.0).collect();
    let (cloud, _) = normalize_cloud(&PointCloud::from_points(&pts)?)?;
    let cloud = PointCloud::new(cloud.into_points().mapv(|x| x as f32 as f64))?;
    let mask = SegmentationEncoding::one_hot(rows.iter().map(|r| r.1).collect(), c)?;
    Ok((cloud, mask))
}

/// `count` labeled shapes; sample `i` draws from its own stream of the spec seed.
pub fn generate_synthetic(spec: &SyntheticShapeSpec, count: usize) -> Result<LabeledSet> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        rng.set_stream(i as u64);
        let (cloud, mask) = sample_shape(spec, &mut rng)?;
        if mask.counts().contains(&0) {
            return Err(Error::Config(format!("sample {i} left a part without points")));
        }
        samples.push(LabeledCloud {
            id: format!("{}-{}-{i:04}", spec.family().name(), spec.rng_seed),
            cloud,
            mask,
        });
    }
    Ok(LabeledSet { samples })
}

/// Which ids went to the labeled and unlabeled sides of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub labeled_fraction_permille: u32,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Ids that appear in more than one role.
    pub fn overlaps(&self) -> Vec<String> {
        let l: BTreeSet<&String> = self.labeled.iter().collect();
        let u: BTreeSet<&String> = self.unlabeled.iter().collect();
        let t: BTreeSet<&String> = self.test.iter().collect();
        let mut out: BTreeSet<String> = BTreeSet::new();
        out.extend(l.intersection(&u).map(|s| s.to_string()));
        out.extend(l.intersection(&t).map(|s| s.to_string()));
        out.extend(u.intersection(&t).map(|s| s.to_string()));
        out.into_iter().collect()
    }
}

/// Keeps `round(fraction · N)` randomly chosen samples labeled and strips the rest.
pub fn make_split(set: &LabeledSet, labeled_fraction: f64, rng: &mut impl Rng) -> Result<(LabeledSet, UnlabeledSet, SplitManifest)> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::Config(format!("labeled fraction {labeled_fraction} must lie in (0, 1)")));
    }
    let k = (labeled_fraction * set.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::Config(format!("fraction {labeled_fraction} of {} samples labels none", set.len())));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let chosen: BTreeSet<usize> = chosen.into_iter().collect();
    let mut labeled = LabeledSet::default();
    let mut unlabeled = UnlabeledSet::default();
    for (i, s) in set.samples.iter().enumerate() {
        if chosen.contains(&i) {
            labeled.samples.push(s.clone());
        } else {
            unlabeled.samples.push(UnlabeledCloud {
                id: s.id.clone(),
                cloud: s.cloud.clone(),
            });
        }
    }
    let manifest = SplitManifest {
        seed: 0,
        labeled_fraction_permille: (labeled_fraction * 1000.0).round() as u32,
        labeled: labeled.ids(),
        unlabeled: unlabeled.ids(),
        test: Vec::new(),
    };
    Ok((labeled, unlabeled, manifest))
}

pub fn zero_pad_labels(n: usize, c: usize, count: usize) -> Result<Vec<SegmentationEncoding>> {
    if n == 0 {
        return Err(Error::Config("zero padding needs n ≥ 1".into()));
    }
    (0..count).map(|_| SegmentationEncoding::zero_padded(n, c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub file: String,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub c: usize,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticShapeSpec>,
    pub samples: Vec<DatasetEntry>,
}

const UNLABELED: u8 = 255;

fn sample_file(id: &str) -> String {
    let safe: String = id.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' }).collect();
    format!("{safe}.bin")
}

fn encode_sample(cloud: &PointCloud, mask: &SegmentationEncoding) -> Vec<u8> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(n * 13);
    for x in cloud.points().iter() {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    match mask.labels() {
        Some(l) => buf.extend(l.iter().map(|&k| k as u8)),
        None => buf.extend(std::iter::repeat_n(UNLABELED, n)),
    }
    buf
}

/// Writes `manifest.json` plus one binary file per sample.
pub fn save_dataset(
    dir: &Path,
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    seed: Option<u64>,
    spec: Option<&SyntheticShapeSpec>,
) -> Result<DatasetManifest> {
    let (n, c) = labeled
        .shape()
        .or_else(|| unlabeled.samples.first().map(|s| (s.cloud.len(), spec.map(|s| s.family().parts()).unwrap_or(2))))
        .ok_or_else(|| Error::Config("cannot save an empty dataset".into()))?;
    if c > UNLABELED as usize {
        return Err(Error::Config(format!("{c} parts do not fit the byte label format")));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut write = |id: &str, cloud: &PointCloud, mask: &SegmentationEncoding| -> Result<()> {
        if cloud.len() != n {
            return Err(Error::Shape(format!("sample {id} has {} points, expected {n}", cloud.len())));
        }
        let file = sample_file(id);
        fs::write(dir.join(&file), encode_sample(cloud, mask))?;
        entries.push(DatasetEntry {
            id: id.to_string(),
            file,
            labeled: mask.is_labeled(),
        });
        Ok(())
    };
    for s in &labeled.samples {
        write(&s.id, &s.cloud, &s.mask)?;
    }
    for s in &unlabeled.samples {
        write(&s.id, &s.cloud, &SegmentationEncoding::zero_padded(n, c)?)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        n,
        c,
        seed,
        spec: spec.cloned(),
        samples: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn json_offset(text: &str, e: &serde_json::Error) -> u64 {
    let line_start: usize = text.split_inclusive('\n').take(e.line().saturating_sub(1)).map(str::len).sum();
    (line_start + e.column().saturating_sub(1)) as u64
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: json_offset(&text, &e),
        path,
        message: e.to_string(),
    })
}

fn decode_sample(path: &Path, bytes: &[u8], n: usize, c: usize) -> Result<(PointCloud, Option<Vec<usize>>)> {
    let parse = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let coords = n * 12;
    if bytes.len() < coords {
        return Err(parse(bytes.len(), format!("coordinate block ends early, expected {coords} bytes")));
    }
    if bytes.len() != coords + n {
        return Err(parse(bytes.len().min(coords + n), format!("expected {} bytes, found {}", coords + n, bytes.len())));
    }
    let vals: Vec<f64> = bytes[..coords].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    if let Some(k) = vals.iter().position(|x| !x.is_finite()) {
        return Err(parse(k * 4, "non-finite coordinate".into()));
    }
    let cloud = PointCloud::new(Mat::from_shape_vec((n, 3), vals).map_err(|e| parse(0, e.to_string()))?)?;
    let labels = &bytes[coords..];
    if labels.iter().all(|&l| l == UNLABELED) {
        return Ok((cloud, None));
    }
    if let Some(k) = labels.iter().position(|&l| l as usize >= c) {
        return Err(parse(coords + k, format!("label {} out of range for {c} parts", labels[k])));
    }
    Ok((cloud, Some(labels.iter().map(|&l| l as usize).collect())))
}

/// Reads a directory written by [`save_dataset`], restoring labeled flags from the manifest.
pub fn load_dataset(dir: &Path) -> Result<(LabeledSet, UnlabeledSet, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let mut labeled = LabeledSet::default();
    let mut unlabeled = UnlabeledSet::default();
    for e in &manifest.samples {
        let path: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&path)?;
        let (cloud, labels) = decode_sample(&path, &bytes, manifest.n, manifest.c)?;
        match (e.labeled, labels) {
            (true, Some(l)) => labeled.samples.push(LabeledCloud {
                id: e.id.clone(),
                cloud,
                mask: SegmentationEncoding::one_hot(l, manifest.c)?,
            }),
            (false, None) => unlabeled.samples.push(UnlabeledCloud { id: e.id.clone(), cloud }),
            (flag, _) => {
                return Err(Error::Parse {
                    path,
                    offset: (manifest.n * 12) as u64,
                    message: format!("manifest marks labeled={flag} but the label block disagrees"),
                })
            }
        }
    }
    Ok((labeled, unlabeled, manifest))
}

/// Reads a ShapeNetPart-style text file (`x y z [...] label` per line),
/// shifts labels by `label_offset`, subsamples to `n` points and normalises.
pub fn load_shapenet_part_txt(
    path: &Path,
    label_offset: usize,
    parts: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(PointCloud, SegmentationEncoding)> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0usize;
    for line in text.lines() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if !tok.is_empty() {
            let err = |m: &str| Error::Parse {
                path: path.to_path_buf(),
                offset: offset as u64,
                message: m.to_string(),
            };
            if tok.len() < 4 {
                return Err(err("expected at least four fields"));
            }
            let mut xyz = [0.0; 3];
            for a in 0..3 {
                xyz[a] = tok[a].parse().map_err(|_| err("bad coordinate"))?;
            }
            let raw: f64 = tok[tok.len() - 1].parse().map_err(|_| err("bad label"))?;
            let label = (raw as usize).checked_sub(label_offset).filter(|&l| l < parts).ok_or_else(|| err("label out of range"))?;
            pts.push(xyz);
            labels.push(label);
        }
        offset += line.len() + 1;
    }
    if pts.is_empty() {
        return Err(Error::InvalidCloud(format!("{} holds no points", path.display())));
    }
    let pick: Vec<usize> = if pts.len() >= n {
        rand::seq::index::sample(rng, pts.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pts.len())).collect()
    };
    let cloud = PointCloud::from_points(&pick.iter().map(|&i| pts[i]).collect::<Vec<_>>())?;
    let (cloud, _) = normalize_cloud(&cloud)?;
    let mask = SegmentationEncoding::one_hot(pick.iter().map(|&i| labels[i]).collect(), parts)?;
    Ok((cloud, mask))
}

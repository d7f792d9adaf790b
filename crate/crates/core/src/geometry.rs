//! Point clouds, segmentation masks, voxelised part occupancy and the
//! metrics and augmentations built on them.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Fixed-cardinality point set, `n × 3`, all coordinates finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Mat,
}

impl PointCloud {
    pub fn new(points: Mat) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::InvalidCloud(format!("expected 3 columns, found {}", points.ncols())));
        }
        if points.nrows() == 0 {
            return Err(Error::InvalidCloud("empty cloud".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCloud("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let m = Mat::from_shape_vec((points.len(), 3), flat).map_err(|e| Error::InvalidCloud(e.to_string()))?;
        Self::new(m)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &Mat {
        &self.points
    }

    pub fn into_points(self) -> Mat {
        self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.points[[i, 0]], self.points[[i, 1]], self.points[[i, 2]]]
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Mat::zeros((perm.len(), 3));
        for (i, &j) in perm.iter().enumerate() {
            out.row_mut(i).assign(&self.points.row(j));
        }
        Self { points: out }
    }

    pub fn bounds(&self) -> Bounds {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for row in self.points.rows() {
            for a in 0..3 {
                lo[a] = lo[a].min(row[a]);
                hi[a] = hi[a].max(row[a]);
            }
        }
        Bounds { lo, hi }
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.points.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Per-point part assignment over `c` parts: one-hot rows when labeled,
/// all-zero rows (zero padding) when not.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationEncoding {
    parts: usize,
    len: usize,
    labels: Option<Vec<usize>>,
}

impl SegmentationEncoding {
    pub fn one_hot(labels: Vec<usize>, parts: usize) -> Result<Self> {
        if parts < 2 {
            return Err(Error::InvalidMask(format!("part count must be at least 2, got {parts}")));
        }
        if labels.is_empty() {
            return Err(Error::InvalidMask("no points".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= parts) {
            return Err(Error::InvalidMask(format!("label {bad} out of range for {parts} parts")));
        }
        Ok(Self {
            parts,
            len: labels.len(),
            labels: Some(labels),
        })
    }

    pub fn zero_padded(len: usize, parts: usize) -> Result<Self> {
        if parts < 2 {
            return Err(Error::InvalidMask(format!("part count must be at least 2, got {parts}")));
        }
        Ok(Self { parts, len, labels: None })
    }

    /// Parses an `n × c` binary matrix: every row one-hot, or every entry zero.
    pub fn from_matrix(mask: &Mat) -> Result<Self> {
        let (n, c) = mask.dim();
        if mask.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidMask("entries must be 0 or 1".into()));
        }
        if mask.iter().all(|&x| x == 0.0) {
            return Self::zero_padded(n, c);
        }
        let mut labels = Vec::with_capacity(n);
        for (i, row) in mask.rows().into_iter().enumerate() {
            if row.sum() != 1.0 {
                return Err(Error::InvalidMask(format!("row {i} is neither one-hot nor part of an all-zero mask")));
            }
            labels.push(row.iter().position(|&x| x == 1.0).unwrap());
        }
        Self::one_hot(labels, c)
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Dense `n × c` representation.
    pub fn matrix(&self) -> Mat {
        let mut m = Mat::zeros((self.len, self.parts));
        if let Some(labels) = &self.labels {
            for (i, &l) in labels.iter().enumerate() {
                m[[i, l]] = 1.0;
            }
        }
        m
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            parts: self.parts,
            len: perm.len(),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&j| l[j]).collect()),
        }
    }

    /// Per-part point counts; all zero for a zero-padded mask.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.parts];
        if let Some(labels) = &self.labels {
            for &l in labels {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Fraction of points per part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartDistribution {
    pub sigma: Vec<f64>,
}

pub fn part_distribution(mask: &SegmentationEncoding) -> PartDistribution {
    let n = mask.len() as f64;
    PartDistribution {
        sigma: mask.counts().into_iter().map(|k| k as f64 / n).collect(),
    }
}

/// Record of the similarity transform applied by [`normalize_cloud`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    /// Maps a normalised cloud back to the original frame.
    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        let mut p = cloud.points.clone();
        for mut row in p.rows_mut() {
            for a in 0..3 {
                row[a] = row[a] * self.scale + self.center[a];
            }
        }
        PointCloud { points: p }
    }
}

/// Centres on the centroid and scales so the farthest point sits at radius 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let n = cloud.len() as f64;
    let mut center = [0.0; 3];
    for row in cloud.points.rows() {
        for a in 0..3 {
            center[a] += row[a];
        }
    }
    center.iter_mut().for_each(|c| *c /= n);
    let mut p = cloud.points.clone();
    let mut radius: f64 = 0.0;
    for mut row in p.rows_mut() {
        for a in 0..3 {
            row[a] -= center[a];
        }
        radius = radius.max(row.dot(&row).sqrt());
    }
    if radius == 0.0 {
        return Err(Error::ZeroScale);
    }
    p /= radius;
    Ok((PointCloud { points: p }, NormalizeTransform { center, scale: radius }))
}

/// Axis-aligned box used to quantise points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Bounds {
    pub fn unit() -> Self {
        Self {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        }
    }

    pub fn union(&self, other: &Bounds) -> Bounds {
        let mut b = *self;
        for a in 0..3 {
            b.lo[a] = b.lo[a].min(other.lo[a]);
            b.hi[a] = b.hi[a].max(other.hi[a]);
        }
        b
    }

    /// Cell index along `axis` at resolution `r`; out-of-box values clamp to the boundary cell.
    pub fn quantize(&self, x: f64, axis: usize, r: usize) -> usize {
        let extent = self.hi[axis] - self.lo[axis];
        if extent <= 0.0 {
            return 0;
        }
        let u = ((x - self.lo[axis]) / extent * r as f64).floor();
        if u < 0.0 {
            0
        } else {
            (u as usize).min(r - 1)
        }
    }
}

/// Binary occupancy grids, one per part, over a shared box.
#[derive(Clone, Debug, PartialEq)]
pub struct PartVoxelGrid {
    resolution: usize,
    bounds: Bounds,
    occupancy: Vec<Vec<bool>>,
}

impl PartVoxelGrid {
    pub fn empty(resolution: usize, parts: usize, bounds: Bounds) -> Self {
        Self {
            resolution,
            bounds,
            occupancy: vec![vec![false; resolution.pow(3)]; parts],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn parts(&self) -> usize {
        self.occupancy.len()
    }

    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn get(&self, part: usize, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[part][self.flat(i, j, k)]
    }

    pub fn set(&mut self, part: usize, i: usize, j: usize, k: usize, value: bool) {
        let f = self.flat(i, j, k);
        self.occupancy[part][f] = value;
    }

    pub fn occupancy(&self, part: usize) -> &[bool] {
        &self.occupancy[part]
    }

    pub fn occupied(&self, part: usize) -> usize {
        self.occupancy[part].iter().filter(|&&b| b).count()
    }

    /// Run-length text encoding: a header line, a bounds line, then one line
    /// per part of alternating run lengths starting with an empty run.
    pub fn to_rle(&self) -> String {
        let mut s = format!("voxels {} {}\n", self.resolution, self.parts());
        let b = &self.bounds;
        writeln!(s, "bounds {} {} {} {} {} {}", b.lo[0], b.lo[1], b.lo[2], b.hi[0], b.hi[1], b.hi[2]).unwrap();
        for occ in &self.occupancy {
            let mut runs = Vec::new();
            let mut current = false;
            let mut len = 0usize;
            for &v in occ {
                if v == current {
                    len += 1;
                } else {
                    runs.push(len);
                    current = v;
                    len = 1;
                }
            }
            runs.push(len);
            let line: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn from_rle(text: &str) -> Result<Self> {
        let bad = |offset: usize, msg: &str| Error::Parse {
            path: "<rle>".into(),
            offset: offset as u64,
            message: msg.to_string(),
        };
        let mut offset = 0usize;
        let mut lines = text.lines();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            let line = lines.next().ok_or_else(|| bad(offset, &format!("missing {what}")))?;
            let at = offset;
            offset += line.len() + 1;
            Ok((at, line))
        };
        let (at, header) = next("header")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 || h[0] != "voxels" {
            return Err(bad(at, "expected `voxels <resolution> <parts>`"));
        }
        let resolution: usize = h[1].parse().map_err(|_| bad(at, "bad resolution"))?;
        let parts: usize = h[2].parse().map_err(|_| bad(at, "bad part count"))?;
        let (at, bline) = next("bounds")?;
        let bv: Vec<&str> = bline.split_whitespace().collect();
        if bv.len() != 7 || bv[0] != "bounds" {
            return Err(bad(at, "expected `bounds` followed by six numbers"));
        }
        let mut nums = [0.0; 6];
        for (k, tok) in bv[1..].iter().enumerate() {
            nums[k] = tok.parse().map_err(|_| bad(at, "bad bound"))?;
        }
        let bounds = Bounds {
            lo: [nums[0], nums[1], nums[2]],
            hi: [nums[3], nums[4], nums[5]],
        };
        let cells = resolution.pow(3);
        let mut occupancy = Vec::with_capacity(parts);
        for _ in 0..parts {
            let (at, line) = next("part line")?;
            let mut occ = Vec::with_capacity(cells);
            let mut value = false;
            for tok in line.split_whitespace() {
                let run: usize = tok.parse().map_err(|_| bad(at, "bad run length"))?;
                occ.extend(std::iter::repeat_n(value, run));
                value = !value;
            }
            if occ.len() != cells {
                return Err(bad(at, &format!("runs cover {} cells, expected {cells}", occ.len())));
            }
            occupancy.push(occ);
        }
        Ok(Self {
            resolution,
            bounds,
            occupancy,
        })
    }
}

/// Marks every voxel that receives at least one point of each part.
pub fn voxelize_per_part(
    cloud: &PointCloud,
    mask: &SegmentationEncoding,
    resolution: usize,
    bounds: Bounds,
) -> Result<PartVoxelGrid> {
    let labels = mask
        .labels()
        .ok_or_else(|| Error::InvalidMask("per-part voxelisation needs a labeled mask".into()))?;
    if resolution < 2 {
        return Err(Error::Config(format!("voxel resolution must be at least 2, got {resolution}")));
    }
    if labels.len() != cloud.len() {
        return Err(Error::Shape(format!("{} points but {} labels", cloud.len(), labels.len())));
    }
    let mut grid = PartVoxelGrid::empty(resolution, mask.parts(), bounds);
    for (i, &part) in labels.iter().enumerate() {
        let p = cloud.point(i);
        let c = [0, 1, 2].map(|a| bounds.quantize(p[a], a, resolution));
        grid.set(part, c[0], c[1], c[2], true);
    }
    Ok(grid)
}

/// Per-part IoU (`None` where the part is empty in both grids) and their mean.
pub fn per_part_voxel_iou(a: &PartVoxelGrid, b: &PartVoxelGrid) -> Result<(Vec<Option<f64>>, f64)> {
    if a.resolution != b.resolution || a.parts() != b.parts() || a.bounds != b.bounds {
        return Err(Error::Shape("voxel grids differ in resolution, part count or bounds".into()));
    }
    let ious: Vec<Option<f64>> = a
        .occupancy
        .iter()
        .zip(&b.occupancy)
        .map(|(x, y)| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &q) in x.iter().zip(y) {
                inter += (p && q) as usize;
                union += (p || q) as usize;
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptyIou);
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok((ious, miou))
}

/// Point-label mIoU over the parts that occur in either mask.
pub fn point_label_miou(pred: &SegmentationEncoding, gt: &SegmentationEncoding) -> Result<f64> {
    let (p, g) = match (pred.labels(), gt.labels()) {
        (Some(p), Some(g)) => (p, g),
        _ => return Err(Error::InvalidMask("mIoU needs two labeled masks".into())),
    };
    if p.len() != g.len() || pred.parts() != gt.parts() {
        return Err(Error::Shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            p.len(),
            pred.parts(),
            g.len(),
            gt.parts()
        )));
    }
    let c = gt.parts();
    let mut inter = vec![0usize; c];
    let mut union = vec![0usize; c];
    for (&a, &b) in p.iter().zip(g) {
        if a == b {
            inter[a] += 1;
            union[a] += 1;
        } else {
            union[a] += 1;
            union[b] += 1;
        }
    }
    let ious: Vec<f64> = (0..c).filter(|&k| union[k] > 0).map(|k| inter[k] as f64 / union[k] as f64).collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Random geometric augmentation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdaConfig {
    pub rescale_range: (f64, f64),
    pub translate_range: (f64, f64),
    pub jitter_range: (f64, f64),
    pub flip_enabled: bool,
    /// Axes eligible for mirroring when flipping is enabled.
    pub flip_axes: [bool; 3],
    pub rng_seed: u64,
}

impl Default for TdaConfig {
    fn default() -> Self {
        Self {
            rescale_range: (0.8, 1.2),
            translate_range: (-0.1, 0.1),
            jitter_range: (-0.005, 0.005),
            flip_enabled: true,
            // y is the up axis of the synthetic shapes
            flip_axes: [true, false, true],
            rng_seed: 0,
        }
    }
}

impl TdaConfig {
    pub fn identity() -> Self {
        Self {
            rescale_range: (1.0, 1.0),
            translate_range: (0.0, 0.0),
            jitter_range: (0.0, 0.0),
            flip_enabled: false,
            flip_axes: [false; 3],
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("rescale", self.rescale_range),
            ("translate", self.translate_range),
            ("jitter", self.jitter_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is not an ordered pair")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Rescale, translate, jitter, then flip; labels are untouched.
pub fn apply_tda(cloud: &PointCloud, cfg: &TdaConfig, rng: &mut impl Rng) -> PointCloud {
    let scale = uniform(rng, cfg.rescale_range);
    let shift = [0; 3].map(|_| uniform(rng, cfg.translate_range));
    let mut p = cloud.points.clone();
    for mut row in p.rows_mut() {
        for a in 0..3 {
            row[a] = row[a] * scale + shift[a];
        }
    }
    if cfg.jitter_range != (0.0, 0.0) {
        p.mapv_inplace(|x| x + uniform(rng, cfg.jitter_range));
    }
    if cfg.flip_enabled {
        for a in 0..3 {
            if cfg.flip_axes[a] && rng.random_bool(0.5) {
                p.column_mut(a).mapv_inplace(|x| -x);
            }
        }
    }
    PointCloud { points: p }
}

/// ASCII PLY with `x y z` floats and a `part` byte per vertex (255 when unlabeled).
pub fn write_labeled_ply(path: &Path, cloud: &PointCloud, mask: &SegmentationEncoding) -> Result<()> {
    if mask.len() != cloud.len() {
        return Err(Error::Shape(format!("{} points but {} labels", cloud.len(), mask.len())));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "{}", ply_header(cloud.len()))?;
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let part = mask.labels().map(|l| l[i] as u8).unwrap_or(255);
        writeln!(out, "{} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, part)?;
    }
    out.flush()?;
    Ok(())
}

fn ply_header(n: usize) -> String {
    format!(
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar part\nend_header\n"
    )
}

/// Reads a file written by [`write_labeled_ply`].
pub fn read_labeled_ply(path: &Path, parts: usize) -> Result<(PointCloud, SegmentationEncoding)> {
    let text = std::fs::read_to_string(path)?;
    let err = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    let end = text.find("end_header\n").ok_or_else(|| err(0, "missing end_header"))?;
    let header = &text[..end];
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| err(0, "missing vertex count"))?;
    let mut offset = end + "end_header\n".len();
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for line in text[offset..].lines().take(n) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 4 {
            return Err(err(offset, "expected four fields"));
        }
        let mut xyz = [0.0; 3];
        for a in 0..3 {
            xyz[a] = tok[a].parse::<f32>().map_err(|_| err(offset, "bad coordinate"))? as f64;
        }
        pts.push(xyz);
        labels.push(tok[3].parse::<u8>().map_err(|_| err(offset, "bad part"))?);
        offset += line.len() + 1;
    }
    if pts.len() != n {
        return Err(err(text.len(), "truncated vertex list"));
    }
    let cloud = PointCloud::from_points(&pts)?;
    let mask = if labels.iter().all(|&l| l == 255) {
        SegmentationEncoding::zero_padded(n, parts)?
    } else {
        SegmentationEncoding::one_hot(labels.into_iter().map(usize::from).collect(), parts)?
    };
    Ok((cloud, mask))
}

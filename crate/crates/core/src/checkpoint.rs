//! Single-file checkpoints: magic, version, a JSON header, then named
//! shape-prefixed little-endian `f32` parameter blocks.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geometry::Mat;
use crate::latent_prior::{GenerativeModel, GlobalPrior, GlobalPriorConfig, LatentStats, PointPrior};
use crate::segmentation::{Segmenter, SegmenterConfig};
use crate::tape::ParamStore;
use crate::vae::{Vae, VaeConfig};

pub const MAGIC: &[u8; 8] = b"PGDACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub blocks: Vec<(String, Mat)>,
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u64).to_le_bytes());
        for (name, m) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut take = |len: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < len {
                return Err(parse_err(path, pos, format!("truncated {what}")));
            }
            pos += len;
            Ok(&bytes[pos - len..pos])
        };
        if take(8, "magic")? != MAGIC {
            return Err(parse_err(path, 0, "not a checkpoint"));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(parse_err(path, 8, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(take(8, "header length")?.try_into().unwrap()) as usize;
        let header = serde_json::from_slice(take(hlen, "header")?).map_err(|e| parse_err(path, 20, e.to_string()))?;
        let count = u64::from_le_bytes(take(8, "block count")?.try_into().unwrap()) as usize;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(4, "name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(nlen, "name")?.to_vec()).map_err(|e| parse_err(path, 0, e.to_string()))?;
            let rows = u64::from_le_bytes(take(8, "shape")?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(8, "shape")?.try_into().unwrap()) as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| parse_err(path, 0, "block too large"))?;
            let data = take(len, "block data")?;
            let vals = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            blocks.push((name, Mat::from_shape_vec((rows, cols), vals).expect("length checked")));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn push_store(&mut self, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.blocks.push((name.to_string(), m.clone()));
        }
    }

    /// Overwrites every parameter of `store` from the block of the same name.
    pub fn fill_store(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let (_, m) = self
                .blocks
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            store.set(&name, m.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GenerativeHeader {
    kind: String,
    vae: VaeConfig,
    global: GlobalPriorConfig,
    point: BackboneConfig,
    stats: LatentStats,
    schedule: NoiseSchedule,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PartialHeader {
    kind: String,
}

pub fn generative_checkpoint(model: &GenerativeModel) -> Checkpoint {
    let header = GenerativeHeader {
        kind: "generative".into(),
        vae: model.vae.cfg.clone(),
        global: model.global.cfg.clone(),
        point: model.point.net.cfg.clone(),
        stats: model.point.stats.clone(),
        schedule: model.schedule.clone(),
    };
    let mut ck = Checkpoint {
        header: serde_json::to_value(header).expect("header serializes"),
        blocks: Vec::new(),
    };
    ck.push_store(&model.vae.store);
    ck.push_store(&model.global.store);
    ck.push_store(&model.point.store);
    ck
}

/// A VAE-only checkpoint left by the first training stage.
pub fn vae_checkpoint(vae: &Vae) -> Checkpoint {
    let mut ck = Checkpoint {
        header: serde_json::json!({ "kind": "vae", "vae": vae.cfg }),
        blocks: Vec::new(),
    };
    ck.push_store(&vae.store);
    ck
}

/// Rebuilds a VAE from a VAE or full generative checkpoint.
pub fn load_vae(ck: &Checkpoint) -> Result<Vae> {
    let cfg: VaeConfig = serde_json::from_value(ck.header["vae"].clone())?;
    let mut vae = Vae::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.fill_store(&mut vae.store)?;
    Ok(vae)
}

pub fn load_generative(ck: &Checkpoint) -> Result<GenerativeModel> {
    let kind: PartialHeader = serde_json::from_value(ck.header.clone())?;
    if kind.kind != "generative" {
        return Err(Error::Untrained("generative model"));
    }
    let h: GenerativeHeader = serde_json::from_value(ck.header.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vae = load_vae(ck)?;
    let mut global = GlobalPrior::new(h.global, h.vae.d_z, h.vae.parts, &mut rng)?;
    ck.fill_store(&mut global.store)?;
    let mut point = PointPrior::new(&h.point, h.vae.d_h, h.vae.d_z, h.vae.parts, h.stats, &mut rng)?;
    ck.fill_store(&mut point.store)?;
    Ok(GenerativeModel {
        vae,
        global,
        point,
        schedule: h.schedule,
    })
}

pub fn segmenter_checkpoint(model: &Segmenter) -> Checkpoint {
    let mut ck = Checkpoint {
        header: serde_json::json!({ "kind": "segmenter", "segmenter": model.cfg }),
        blocks: Vec::new(),
    };
    ck.push_store(&model.store);
    ck
}

pub fn load_segmenter(ck: &Checkpoint) -> Result<Segmenter> {
    let kind: PartialHeader = serde_json::from_value(ck.header.clone())?;
    if kind.kind != "segmenter" {
        return Err(Error::Config(format!("expected a segmenter checkpoint, found {}", kind.kind)));
    }
    let cfg: SegmenterConfig = serde_json::from_value(ck.header["segmenter"].clone())?;
    let mut model = Segmenter::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.fill_store(&mut model.store)?;
    Ok(model)
}

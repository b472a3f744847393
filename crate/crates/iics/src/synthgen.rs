//! Camera-partitioned synthetic datasets with ground-truth identities.
//!
//! Each sample realizes an additive appearance model: a per-identity base
//! signal, a per-camera channel offset and gain, and elementwise noise. The
//! camera terms create a systematic cross-camera gap that raw clustering
//! cannot bridge, which is exactly the regime the training loop targets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::core::{CameraId, Dataset, DatasetMeta, Rng, Sample};
use crate::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"IICSDS01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_identities: usize,
    pub num_cameras: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub channels: usize,
    pub length: usize,
    pub identity_scale: f64,
    pub camera_offset_scale: f64,
    pub noise_scale: f64,
    pub gain_lo: f64,
    pub gain_hi: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_identities: 64,
            num_cameras: 4,
            samples_min: 3,
            samples_max: 5,
            channels: 6,
            length: 12,
            identity_scale: 1.0,
            camera_offset_scale: 1.9,
            noise_scale: 0.45,
            gain_lo: 0.7,
            gain_hi: 1.3,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str| Err(Error::InvalidConfig(format!("invalid value for {field}")));
        if self.num_identities < 2 {
            return bad("num_identities");
        }
        if self.num_cameras < 2 {
            return bad("num_cameras");
        }
        if self.samples_min < 1 || self.samples_min > self.samples_max {
            return bad("samples_min");
        }
        if self.channels < 1 {
            return bad("channels");
        }
        if self.length < 1 {
            return bad("length");
        }
        if !(self.identity_scale > 0.0) {
            return bad("identity_scale");
        }
        if !(self.camera_offset_scale >= 0.0) {
            return bad("camera_offset_scale");
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale");
        }
        if !self.gain_lo.is_finite() || !self.gain_hi.is_finite() || self.gain_lo > self.gain_hi {
            return bad("gain_lo");
        }
        Ok(())
    }
}

/// Generate a dataset from `cfg`. Deterministic: same config (including seed)
/// gives a bit-identical dataset.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let (p_count, c_count) = (cfg.num_identities, cfg.num_cameras);
    let elems = cfg.channels * cfg.length;

    // Identity appearances: [Cc, L] tensors.
    let appearances: Vec<Vec<f64>> = (0..p_count)
        .map(|_| (0..elems).map(|_| rng.normal() * cfg.identity_scale).collect())
        .collect();
    // Per-camera channel offsets and gains.
    let offsets: Vec<Vec<f64>> = (0..c_count)
        .map(|_| {
            (0..cfg.channels)
                .map(|_| rng.normal() * cfg.camera_offset_scale)
                .collect()
        })
        .collect();
    let gains: Vec<Vec<f64>> = (0..c_count)
        .map(|_| {
            (0..cfg.channels)
                .map(|_| rng.uniform_range(cfg.gain_lo, cfg.gain_hi))
                .collect()
        })
        .collect();

    let mut samples = Vec::new();
    for p in 0..p_count {
        for c in 0..c_count {
            let count = if cfg.samples_min == cfg.samples_max {
                cfg.samples_min
            } else {
                rng.gen_range(cfg.samples_min, cfg.samples_max + 1)
            };
            for _ in 0..count {
                let mut signal = vec![0.0; elems];
                for ch in 0..cfg.channels {
                    for l in 0..cfg.length {
                        let i = ch * cfg.length + l;
                        let noise = if cfg.noise_scale > 0.0 {
                            rng.normal() * cfg.noise_scale
                        } else {
                            0.0
                        };
                        signal[i] = gains[c][ch] * (appearances[p][i] + offsets[c][ch]) + noise;
                    }
                }
                samples.push(Sample {
                    id: samples.len(),
                    camera: CameraId(c),
                    signal,
                    true_identity: Some(p),
                });
            }
        }
    }
    Dataset::new(
        samples,
        c_count,
        cfg.channels,
        cfg.length,
        DatasetMeta::Synthetic { seed: cfg.seed },
    )
}

/// Partition sample indices by camera, preserving dataset order.
pub fn split_by_camera(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); ds.num_cameras];
    for s in &ds.samples {
        parts[s.camera.0].push(s.id);
    }
    parts
}

/// Deterministic query/gallery split. Only identities seen by more than one
/// camera contribute queries; every query keeps at least one same-identity
/// gallery item in a different camera.
pub fn make_query_gallery(
    ds: &Dataset,
    rng: &mut Rng,
    query_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::InvalidConfig("query_fraction must be in (0, 1)".into()));
    }
    let identities = ds
        .identities()
        .ok_or_else(|| Error::InvalidDataset("query/gallery split needs identities".into()))?;
    let max_id = identities.iter().max().copied().unwrap_or(0);
    let mut by_identity = vec![Vec::new(); max_id + 1];
    for (i, &p) in identities.iter().enumerate() {
        by_identity[p].push(i);
    }

    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for members in &by_identity {
        if members.is_empty() {
            continue;
        }
        let cameras: std::collections::BTreeSet<usize> =
            members.iter().map(|&i| ds.samples[i].camera.0).collect();
        if cameras.len() < 2 {
            gallery.extend_from_slice(members);
            continue;
        }
        let target = ((query_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        let mut order = members.clone();
        rng.shuffle(&mut order);
        let mut chosen = Vec::new();
        for &cand in &order {
            if chosen.len() >= target {
                break;
            }
            // Accept only if the remaining gallery keeps a cross-camera item.
            let cand_cam = ds.samples[cand].camera.0;
            let cross_left = members.iter().any(|&i| {
                i != cand && !chosen.contains(&i) && ds.samples[i].camera.0 != cand_cam
            });
            if cross_left {
                chosen.push(cand);
            }
        }
        for &i in members {
            if chosen.contains(&i) {
                query.push(i);
            } else {
                gallery.push(i);
            }
        }
    }
    query.sort_unstable();
    gallery.sort_unstable();
    Ok((query, gallery))
}

/// Write the dataset binary format: magic, u32 n/C/Cc/L, u8 has_identity,
/// then per-sample records of camera, optional identity, f32 signal.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(ds.len() as u32)?;
    w.write_u32::<LittleEndian>(ds.num_cameras as u32)?;
    w.write_u32::<LittleEndian>(ds.channels as u32)?;
    w.write_u32::<LittleEndian>(ds.length as u32)?;
    let has_identity = ds.samples.iter().all(|s| s.true_identity.is_some());
    w.write_u8(has_identity as u8)?;
    for s in &ds.samples {
        w.write_u32::<LittleEndian>(s.camera.0 as u32)?;
        if has_identity {
            w.write_u32::<LittleEndian>(s.true_identity.unwrap() as u32)?;
        }
        for &v in &s.signal {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let c = r.read_u32::<LittleEndian>()? as usize;
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let length = r.read_u32::<LittleEndian>()? as usize;
    let has_identity = r.read_u8()? != 0;
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let camera = r.read_u32::<LittleEndian>()? as usize;
        let true_identity = if has_identity {
            Some(r.read_u32::<LittleEndian>()? as usize)
        } else {
            None
        };
        let mut signal = vec![0.0; channels * length];
        for v in signal.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        samples.push(Sample { id, camera: CameraId(camera), signal, true_identity });
    }
    Dataset::new(
        samples,
        c,
        channels,
        length,
        DatasetMeta::Imported { source: path.display().to_string() },
    )
}

/// Seed derived from dataset contents, used for the evaluation split so that
/// `eval` is deterministic given the dataset file alone.
pub fn dataset_split_seed(ds: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    mix(ds.len() as u64);
    mix(ds.num_cameras as u64);
    for s in &ds.samples {
        mix(s.camera.0 as u64);
        mix(s.true_identity.map(|p| p as u64 + 1).unwrap_or(0));
    }
    h
}

//! Encoder checkpoint format: magic "IICSCK01", u32 version, dimension
//! header, then parameter tensors and running statistics as little-endian
//! f32 in a fixed order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::nn::{AibnState, AlphaSharing, Arch, EncoderModel, NeckState};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"IICSCK01";
const VERSION: u32 = 1;

fn sharing_code(s: AlphaSharing) -> u32 {
    match s {
        AlphaSharing::PerChannel => 0,
        AlphaSharing::PerBlock => 1,
        AlphaSharing::PerLayer => 2,
    }
}

fn sharing_from(code: u32) -> Result<AlphaSharing> {
    match code {
        0 => Ok(AlphaSharing::PerChannel),
        1 => Ok(AlphaSharing::PerBlock),
        2 => Ok(AlphaSharing::PerLayer),
        _ => Err(Error::Format(format!("unknown alpha sharing code {code}"))),
    }
}

fn write_tensor(w: &mut impl Write, t: &[f64]) -> Result<()> {
    for &v in t {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(match model.arch {
        Arch::Full => 0,
        Arch::NeckOnly => 1,
    })?;
    w.write_u32::<LittleEndian>(model.c_in as u32)?;
    w.write_u32::<LittleEndian>(model.c_mid as u32)?;
    w.write_u32::<LittleEndian>(model.length as u32)?;
    w.write_u32::<LittleEndian>(model.d as u32)?;
    w.write_u32::<LittleEndian>(sharing_code(model.aibn.sharing))?;
    w.write_u32::<LittleEndian>(model.aibn.alpha.len() as u32)?;
    w.write_u8(model.aibn.alpha_learnable as u8)?;
    w.write_f32::<LittleEndian>(model.aibn.epsilon as f32)?;
    w.write_f32::<LittleEndian>(model.aibn.momentum as f32)?;
    write_tensor(&mut w, &model.mix)?;
    write_tensor(&mut w, &model.aibn.gamma)?;
    write_tensor(&mut w, &model.aibn.beta)?;
    write_tensor(&mut w, &model.aibn.alpha)?;
    write_tensor(&mut w, &model.aibn.running_mean)?;
    write_tensor(&mut w, &model.aibn.running_var)?;
    write_tensor(&mut w, &model.proj)?;
    write_tensor(&mut w, &model.proj_bias)?;
    write_tensor(&mut w, &model.neck.scale)?;
    write_tensor(&mut w, &model.neck.running_mean)?;
    write_tensor(&mut w, &model.neck.running_var)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = match r.read_u32::<LittleEndian>()? {
        0 => Arch::Full,
        1 => Arch::NeckOnly,
        a => return Err(Error::Format(format!("unknown arch code {a}"))),
    };
    let c_in = r.read_u32::<LittleEndian>()? as usize;
    let c_mid = r.read_u32::<LittleEndian>()? as usize;
    let length = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let sharing = sharing_from(r.read_u32::<LittleEndian>()?)?;
    let n_alpha = r.read_u32::<LittleEndian>()? as usize;
    let alpha_learnable = r.read_u8()? != 0;
    let epsilon = r.read_f32::<LittleEndian>()? as f64;
    let momentum = r.read_f32::<LittleEndian>()? as f64;

    let mix = read_tensor(&mut r, c_mid * c_in)?;
    let gamma = read_tensor(&mut r, c_mid)?;
    let beta = read_tensor(&mut r, c_mid)?;
    let alpha = read_tensor(&mut r, n_alpha)?;
    let running_mean = read_tensor(&mut r, c_mid)?;
    let running_var = read_tensor(&mut r, c_mid)?;
    let proj = read_tensor(&mut r, d * c_mid * length)?;
    let proj_bias = read_tensor(&mut r, if matches!(arch, Arch::Full) { d } else { 0 })?;
    let neck_scale = read_tensor(&mut r, d)?;
    let neck_mean = read_tensor(&mut r, d)?;
    let neck_var = read_tensor(&mut r, d)?;

    Ok(EncoderModel {
        arch,
        c_in,
        c_mid,
        length,
        d,
        mix,
        aibn: AibnState {
            alpha,
            sharing,
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
            momentum,
            alpha_learnable,
        },
        proj,
        proj_bias,
        neck: NeckState {
            scale: neck_scale,
            running_mean: neck_mean,
            running_var: neck_var,
            epsilon: 1e-5,
            momentum: 0.1,
        },
    })
}

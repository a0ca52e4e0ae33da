//! Weight checkpoint format.
//!
//! Layout: magic `SDGW`, version u32, encoder config (vocab_size, embed_dim,
//! num_layers, num_heads, ff_dim as u32, seed as u64), unet config
//! (latent_channels, base_channels, context_dim, head_dim, time_dim as u32,
//! seed as u64), then every tensor of the encoder followed by every tensor of
//! the unet, row-major little-endian f32, in the order declared by each
//! weight struct's `tensors` method. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{init_encoder, EncoderConfig, EncoderWeights};
use crate::error::{Result, SdgError};
use crate::unet::{init_unet, UnetConfig, UnetWeights};
use crate::Real;

pub const MAGIC: &[u8; 4] = b"SDGW";
pub const VERSION: u32 = 1;

/// Jointly trained model: text encoder plus denoiser.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub encoder: EncoderWeights<Real>,
    pub unet: UnetWeights<Real>,
}

/// Freshly initialized model, deterministic in the two config seeds.
pub fn init_model(encoder: &EncoderConfig, unet: &UnetConfig) -> Result<ModelWeights> {
    Ok(ModelWeights { encoder: init_encoder(encoder)?, unet: init_unet(unet)? })
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, model: &ModelWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let e = &model.encoder.config;
    for v in [e.vocab_size, e.embed_dim, e.num_layers, e.num_heads, e.ff_dim] {
        write_u32(&mut w, v as u32)?;
    }
    write_u64(&mut w, e.seed)?;
    let u = &model.unet.config;
    for v in [u.latent_channels, u.base_channels, u.context_dim, u.head_dim, u.time_dim] {
        write_u32(&mut w, v as u32)?;
    }
    write_u64(&mut w, u.seed)?;
    for (_, t) in model.encoder.tensors().into_iter().chain(model.unet.tensors()) {
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SdgError::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(SdgError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let enc_cfg = EncoderConfig {
        vocab_size: read_u32(&mut r)? as usize,
        embed_dim: read_u32(&mut r)? as usize,
        num_layers: read_u32(&mut r)? as usize,
        num_heads: read_u32(&mut r)? as usize,
        ff_dim: read_u32(&mut r)? as usize,
        seed: read_u64(&mut r)?,
    };
    let unet_cfg = UnetConfig {
        latent_channels: read_u32(&mut r)? as usize,
        base_channels: read_u32(&mut r)? as usize,
        context_dim: read_u32(&mut r)? as usize,
        head_dim: read_u32(&mut r)? as usize,
        time_dim: read_u32(&mut r)? as usize,
        seed: read_u64(&mut r)?,
    };
    let mut encoder = init_encoder::<Real>(&enc_cfg)
        .map_err(|e| SdgError::Checkpoint(format!("invalid encoder config: {e}")))?;
    let mut unet = init_unet::<Real>(&unet_cfg)
        .map_err(|e| SdgError::Checkpoint(format!("invalid unet config: {e}")))?;
    for (name, t) in encoder.tensors_mut().into_iter().chain(unet.tensors_mut()) {
        let mut buf = vec![0u8; t.data.len() * 4];
        r.read_exact(&mut buf).map_err(|_| {
            SdgError::Checkpoint(format!("truncated checkpoint at tensor {name}"))
        })?;
        for (x, c) in t.data.iter_mut().zip(buf.chunks_exact(4)) {
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(SdgError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(ModelWeights { encoder, unet })
}

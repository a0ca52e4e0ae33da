//! Generation artifacts on disk: `SDGT` tensor dumps, the JSON manifest for a
//! generation record, and the layout-invariance comparison between two runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdgError};
use crate::mat::pearson;
use crate::pipeline::GenerationRecord;
use crate::Real;

const MAGIC: &[u8; 4] = b"SDGT";
const VERSION: u32 = 1;

pub fn write_tensor_dump(path: &Path, dims: &[usize], data: &[Real]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_dump(path: &Path) -> Result<(Vec<usize>, Vec<Real>)> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |msg: &str| SdgError::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u).map_err(|_| bad("truncated header"))?;
    if u32::from_le_bytes(u) != VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u).map_err(|_| bad("truncated header"))?;
    let ndim = u32::from_le_bytes(u) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut u).map_err(|_| bad("truncated dims"))?;
        dims.push(u32::from_le_bytes(u) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u).map_err(|_| bad("truncated data"))?;
        data.push(Real::from_le_bytes(u));
    }
    if r.read(&mut u).map_err(SdgError::Io)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((dims, data))
}

/// One attention dump: step `t`, cross-attention layer index, map index
/// within the layer (0 = prompt, 1.. = concepts under MultiKey).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnDumpEntry {
    pub t: usize,
    pub layer: usize,
    pub map: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordManifest {
    pub prompt: String,
    pub mode: String,
    pub concepts: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: Real,
    pub image: String,
    pub attention: Vec<AttnDumpEntry>,
    pub latents: Vec<String>,
}

/// Writes the image, all recorded attention maps and latents, and a JSON
/// manifest tying them together. Returns the manifest path.
pub fn export_record(record: &GenerationRecord, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let image_file = format!("{stem}.png");
    crate::imageio::write_image(&dir.join(&image_file), &record.image)?;

    let mut attention = Vec::new();
    for step in &record.attention {
        for (layer, maps) in step.layers.iter().enumerate() {
            for (mi, m) in maps.iter().enumerate() {
                let file = format!("{stem}_attn_t{:03}_l{layer}_m{mi}.sdgt", step.t);
                let (d0, d1, d2) = m.dims();
                write_tensor_dump(&dir.join(&file), &[d0, d1, d2], m.data())?;
                attention.push(AttnDumpEntry { t: step.t, layer, map: mi, file });
            }
        }
    }
    let mut latents = Vec::new();
    for (t, z) in &record.latents {
        let file = format!("{stem}_z_t{t:03}.sdgt");
        write_tensor_dump(&dir.join(&file), &[4, 16, 16], z)?;
        latents.push(file);
    }
    let file = format!("{stem}_z_final.sdgt");
    write_tensor_dump(&dir.join(&file), &[4, 16, 16], &record.z0)?;
    latents.push(file);

    let manifest = RecordManifest {
        prompt: record.prompt.clone(),
        mode: record.mode.clone(),
        concepts: record.concepts.clone(),
        seed: record.seed,
        steps: record.steps,
        guidance_scale: record.guidance_scale,
        image: image_file,
        attention,
        latents,
    };
    let path = dir.join(format!("{stem}.json"));
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| SdgError::Config(format!("manifest serialization: {e}")))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutCheck {
    /// Maps at the first (largest-t) recorded step are bitwise identical.
    pub first_step_bitwise: bool,
    /// Mean per-map Pearson correlation at each later recorded step.
    pub step_correlations: Vec<(usize, f64)>,
}

impl LayoutCheck {
    pub fn min_correlation(&self) -> f64 {
        self.step_correlations
            .iter()
            .map(|&(_, c)| c)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Compares the recorded attention maps of two runs with shared z^T. The
/// prompt map (index 0 per layer) is compared; structured modes keep extra
/// per-concept maps that have no Baseline counterpart.
pub fn layout_invariance_check(a: &GenerationRecord, b: &GenerationRecord) -> Result<LayoutCheck> {
    if a.attention.len() != b.attention.len() || a.attention.is_empty() {
        return Err(SdgError::Config("records disagree on recorded steps".into()));
    }
    let mut first_step_bitwise = true;
    let mut step_correlations = Vec::new();
    for (si, (sa, sb)) in a.attention.iter().zip(b.attention.iter()).enumerate() {
        if sa.t != sb.t || sa.layers.len() != sb.layers.len() {
            return Err(SdgError::Config(format!("step {si}: incompatible map sets")));
        }
        let mut corr_sum = 0.0f64;
        let mut corr_n = 0usize;
        for (la, lb) in sa.layers.iter().zip(sb.layers.iter()) {
            let (ma, mb) = (&la[0], &lb[0]);
            if ma.dims() != mb.dims() {
                return Err(SdgError::Config(format!("step {si}: map shape mismatch")));
            }
            if si == 0 && ma.data() != mb.data() {
                first_step_bitwise = false;
            }
            corr_sum += pearson(ma.data(), mb.data()) as f64;
            corr_n += 1;
        }
        if si > 0 {
            step_correlations.push((sa.t, corr_sum / corr_n as f64));
        }
    }
    Ok(LayoutCheck { first_step_bitwise, step_correlations })
}

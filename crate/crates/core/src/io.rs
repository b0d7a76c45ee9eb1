//! Artifact persistence: bulk numbers as raw little-endian f64 (`.bin`) with
//! a JSON sidecar (`.json`) describing shape and provenance. Writes are
//! atomic (temp file + rename) and byte-deterministic for identical inputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DomainKind, LipschitzGraphDomain};
use crate::error::{Error, Result};
use crate::grid::{FormField, GridSpec, KernelLattice};

pub const SCHEMA: &str = "conewise/v1";

fn sidecar(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn binfile(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

/// Write bytes to `path` atomically: a temp file in the same directory is
/// renamed over the target, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.to_path_buf();
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParam("artifact path has no file name".into()))?;
    tmp.set_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn f64s_to_bytes(chunks: &[&[f64]]) -> Vec<u8> {
    let total: usize = chunks.iter().map(|c| c.len()).sum();
    let mut out = Vec::with_capacity(total * 8);
    for chunk in chunks {
        for v in *chunk {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParam(
            "binary artifact length is not a multiple of 8".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Sidecar for a form field: the grid, the degree, and the component count;
/// the `.bin` holds the components concatenated in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMeta {
    pub schema: String,
    pub kind: String,
    pub grid: GridSpec,
    pub degree: usize,
    pub comps: usize,
}

pub fn write_field(base: &Path, u: &FormField) -> Result<()> {
    let meta = FieldMeta {
        schema: SCHEMA.into(),
        kind: "form_field".into(),
        grid: u.grid.clone(),
        degree: u.degree,
        comps: u.comps.len(),
    };
    let chunks: Vec<&[f64]> = u.comps.iter().map(|c| c.as_slice()).collect();
    atomic_write(&binfile(base), &f64s_to_bytes(&chunks))?;
    atomic_write(&sidecar(base), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_field(base: &Path) -> Result<FormField> {
    let meta: FieldMeta = serde_json::from_slice(&fs::read(sidecar(base))?)?;
    if meta.schema != SCHEMA || meta.kind != "form_field" {
        return Err(Error::InvalidParam(format!(
            "unexpected artifact schema/kind: {}/{}",
            meta.schema, meta.kind
        )));
    }
    let vals = bytes_to_f64s(&fs::read(binfile(base))?)?;
    let cells = meta.grid.num_cells();
    if vals.len() != cells * meta.comps {
        return Err(Error::InvalidParam(format!(
            "field artifact holds {} values, expected {}",
            vals.len(),
            cells * meta.comps
        )));
    }
    let comps = vals.chunks_exact(cells).map(|c| c.to_vec()).collect();
    Ok(FormField {
        grid: meta.grid,
        degree: meta.degree,
        comps,
    })
}

/// Sidecar for a sampled kernel; the `.bin` holds the value block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelMeta {
    pub schema: String,
    pub kind: String,
    pub n: usize,
    pub h: f64,
    pub lo: Vec<i64>,
    pub sizes: Vec<usize>,
}

pub fn write_kernel(base: &Path, k: &KernelLattice) -> Result<()> {
    let meta = KernelMeta {
        schema: SCHEMA.into(),
        kind: "kernel".into(),
        n: k.n,
        h: k.h,
        lo: k.lo.clone(),
        sizes: k.sizes.clone(),
    };
    atomic_write(&binfile(base), &f64s_to_bytes(&[&k.values]))?;
    atomic_write(&sidecar(base), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_kernel(base: &Path) -> Result<KernelLattice> {
    let meta: KernelMeta = serde_json::from_slice(&fs::read(sidecar(base))?)?;
    if meta.schema != SCHEMA || meta.kind != "kernel" {
        return Err(Error::InvalidParam("artifact is not a kernel".into()));
    }
    let values = bytes_to_f64s(&fs::read(binfile(base))?)?;
    let cells: usize = meta.sizes.iter().product();
    if values.len() != cells {
        return Err(Error::InvalidParam("kernel artifact size mismatch".into()));
    }
    Ok(KernelLattice {
        n: meta.n,
        h: meta.h,
        lo: meta.lo,
        sizes: meta.sizes,
        values,
    })
}

/// Sidecar for a domain; the `.bin` holds the graph samples, then the
/// distance field, then the inside mask as one byte per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainMeta {
    pub schema: String,
    pub kind: String,
    pub grid: GridSpec,
    pub domain_kind: DomainKind,
    pub lipschitz_a: f64,
    pub lambda_len: usize,
}

pub fn write_domain(base: &Path, d: &LipschitzGraphDomain) -> Result<()> {
    let meta = DomainMeta {
        schema: SCHEMA.into(),
        kind: "domain".into(),
        grid: d.grid.clone(),
        domain_kind: d.kind,
        lipschitz_a: d.lipschitz_a,
        lambda_len: d.lambda.len(),
    };
    let mut bytes = f64s_to_bytes(&[&d.lambda, &d.dist_to_complement]);
    bytes.extend(d.inside.iter().map(|&b| b as u8));
    atomic_write(&binfile(base), &bytes)?;
    atomic_write(&sidecar(base), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_domain(base: &Path) -> Result<LipschitzGraphDomain> {
    let meta: DomainMeta = serde_json::from_slice(&fs::read(sidecar(base))?)?;
    if meta.schema != SCHEMA || meta.kind != "domain" {
        return Err(Error::InvalidParam("artifact is not a domain".into()));
    }
    let bytes = fs::read(binfile(base))?;
    let cells = meta.grid.num_cells();
    let f64_part = (meta.lambda_len + cells) * 8;
    if bytes.len() != f64_part + cells {
        return Err(Error::InvalidParam("domain artifact size mismatch".into()));
    }
    let vals = bytes_to_f64s(&bytes[..f64_part])?;
    let lambda = vals[..meta.lambda_len].to_vec();
    let dist = vals[meta.lambda_len..].to_vec();
    let inside = bytes[f64_part..].iter().map(|&b| b != 0).collect();
    Ok(LipschitzGraphDomain {
        grid: meta.grid,
        kind: meta.domain_kind,
        lambda,
        lipschitz_a: meta.lipschitz_a,
        inside,
        dist_to_complement: dist,
    })
}

//! Field archives: `SDAFARCH`, a little-endian `u64` header length, a JSON
//! header, then raw little-endian arrays in header order. Complex arrays
//! are stored as interleaved `(re, im)` pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use sdaf_core::domain::DomainSpec;
use sdaf_core::target::TargetManifold;
use sdaf_core::{HomotopyClass, MapField, PlainSpinorField, SurfaceDomain, Target};

use crate::error::{ArchiveError, CliError, Result};

pub const MAGIC: &[u8; 8] = b"SDAFARCH";
pub const FORMAT: &str = "sdaf-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F64,
    C64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::C64 => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format: String,
    pub domain: DomainSpec,
    pub target: Target,
    pub class: HomotopyClass,
    pub config_fingerprint: String,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldArchive {
    pub domain: DomainSpec,
    pub config_fingerprint: u64,
    pub seed: u64,
    pub phi: MapField,
    pub psi: Option<PlainSpinorField>,
    /// Extra real arrays, such as a second map or a profile.
    pub aux: BTreeMap<String, Vec<f64>>,
}

/// Write `bytes` next to `path` and rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let werr = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(werr)?;
    tmp.write_all(bytes).map_err(werr)?;
    tmp.as_file().sync_all().map_err(werr)?;
    tmp.persist(path).map_err(|e| werr(e.error))?;
    Ok(())
}

impl FieldArchive {
    pub fn new(domain: &SurfaceDomain, phi: MapField, psi: Option<PlainSpinorField>, config_fingerprint: u64, seed: u64) -> Self {
        Self {
            domain: domain.spec(),
            config_fingerprint,
            seed,
            phi,
            psi,
            aux: BTreeMap::new(),
        }
    }

    fn header(&self) -> ArchiveHeader {
        let mut arrays = vec![ArrayEntry {
            name: "phi".into(),
            dtype: DType::F64,
            len: self.phi.values.len(),
        }];
        if let Some(psi) = &self.psi {
            arrays.push(ArrayEntry {
                name: "psi".into(),
                dtype: DType::C64,
                len: psi.values.len(),
            });
        }
        for (k, v) in &self.aux {
            arrays.push(ArrayEntry {
                name: format!("aux.{k}"),
                dtype: DType::F64,
                len: v.len(),
            });
        }
        ArchiveHeader {
            format: FORMAT.into(),
            domain: self.domain,
            target: self.phi.target,
            class: self.phi.class,
            config_fingerprint: format!("{:016x}", self.config_fingerprint),
            seed: self.seed,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.phi.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in &self.phi.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(psi) = &self.psi {
            for z in &psi.values {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        for v in self.aux.values() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| {
            CliError::Archive(ArchiveError::Corrupt {
                path: path.to_path_buf(),
                reason,
            })
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing SDAFARCH magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if hlen > body.len() as u64 {
            return Err(corrupt(format!("header length {hlen} exceeds the {} bytes present", body.len())));
        }
        let hlen = hlen as usize;
        let raw: serde_json::Value =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header is not JSON: {e}")))?;
        let found = raw.get("format").and_then(|f| f.as_str()).unwrap_or("").to_string();
        if found != FORMAT {
            return Err(ArchiveError::Version {
                path: path.to_path_buf(),
                found,
                expected: FORMAT,
            }
            .into());
        }
        let header: ArchiveHeader = serde_json::from_value(raw).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let data = &body[hlen..];
        let need: usize = header.arrays.iter().map(|a| a.len * a.dtype.width()).sum();
        if data.len() != need {
            return Err(corrupt(format!("expected {need} data bytes, found {}", data.len())));
        }
        let n = header.domain.n;
        let vertices = n * n;
        let l = header.target.ambient_dim();
        let f64_at = |k: usize| f64::from_le_bytes(data[8 * k..8 * k + 8].try_into().expect("8 bytes"));
        let mut pos = 0usize;
        let mut phi = None;
        let mut psi = None;
        let mut aux = BTreeMap::new();
        for a in &header.arrays {
            let words = a.len * a.dtype.width() / 8;
            match (a.name.as_str(), a.dtype) {
                ("phi", DType::F64) => {
                    if a.len != vertices * l {
                        return Err(corrupt(format!("phi has {} values, header implies {}", a.len, vertices * l)));
                    }
                    phi = Some((pos..pos + words).map(f64_at).collect::<Vec<_>>());
                }
                ("psi", DType::C64) => {
                    if a.len != vertices * l * 2 {
                        return Err(corrupt(format!("psi has {} values, header implies {}", a.len, vertices * l * 2)));
                    }
                    psi = Some(
                        (0..a.len)
                            .map(|i| Complex64::new(f64_at(pos + 2 * i), f64_at(pos + 2 * i + 1)))
                            .collect::<Vec<_>>(),
                    );
                }
                (name, DType::F64) if name.starts_with("aux.") => {
                    aux.insert(name[4..].to_string(), (pos..pos + words).map(f64_at).collect());
                }
                (name, _) => return Err(corrupt(format!("unexpected array `{name}`"))),
            }
            pos += words;
        }
        let values = phi.ok_or_else(|| corrupt("no phi array".into()))?;
        let config_fingerprint = u64::from_str_radix(&header.config_fingerprint, 16)
            .map_err(|_| corrupt(format!("bad fingerprint `{}`", header.config_fingerprint)))?;
        Ok(Self {
            domain: header.domain,
            config_fingerprint,
            seed: header.seed,
            phi: MapField {
                target: header.target,
                class: header.class,
                values,
            },
            psi: psi.map(|values| PlainSpinorField { ambient_dim: l, values }),
            aux,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Rejects archives written on a different grid than `domain`.
    pub fn check_domain(&self, domain: &SurfaceDomain, path: &Path) -> Result<()> {
        if self.domain.n != domain.n() {
            let l = self.phi.ambient_dim();
            return Err(ArchiveError::Shape {
                path: path.to_path_buf(),
                archive_n: self.domain.n,
                archive_len: self.phi.values.len(),
                run_n: domain.n(),
                run_len: domain.vertex_count() * l,
            }
            .into());
        }
        if self.domain.side_length != domain.side_length() {
            return Err(CliError::key(
                "initial.path",
                format!(
                    "archive side length {} differs from the configured {}",
                    self.domain.side_length,
                    domain.side_length()
                ),
            ));
        }
        Ok(())
    }
}

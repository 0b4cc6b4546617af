//! Bit-exact binary containers and JSON manifests.
//!
//! All containers are little-endian with a 4-byte magic and a u32
//! version:
//!
//! - `LOLW` (weights): layer count u32, then per layer: name length u32,
//!   UTF-8 name, n u32, m u32, r u32, n*r f32 row-major U, m*r f32 V.
//! - `LOLF` (features): row count u32, dim u32, then count*dim f32
//!   row-major; a JSON layout descriptor travels beside it.
//! - `LOLM` (models): length-prefixed JSON architecture descriptor, then
//!   f32 parameter blobs in declaration order.
//!
//! Entries are stored as f32 (matching typical checkpoint precision)
//! while all in-memory compute is f64; a round-trip is exact up to that
//! quantization. Parse failures report the byte offset at which they
//! were detected.

use crate::error::{Error, ParseErrorKind, Result};
use crate::featurize::{FeatureVector, Featurizer, FeaturizerConfig};
use crate::glnet::{EquivariantLayer, GlNetParams, Nonlinearity};
use crate::learn::{MlpLayer, MlpParams, Predictor, PredictorModel, Standardizer};
use crate::lora::{LayerShape, LoraLayer, LoraUpdate, TaskDataset, TaskDescriptor, TaskItem};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const VERSION: u32 = 1;
// Sanity bound on any single declared blob; rejects absurd headers
// before allocation.
const MAX_BLOB_BYTES: u64 = 1 << 33;

// ── Low-level reader with offset tracking ───────────────────────────

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Parse { kind: ParseErrorKind::Truncated, offset: at }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f32_block(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; count * 4];
        self.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset;
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        if &b != magic {
            return Err(Error::Parse { kind: ParseErrorKind::BadMagic, offset: at });
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<()> {
        let at = self.offset;
        let v = self.read_u32()?;
        if v != VERSION {
            return Err(Error::Parse {
                kind: ParseErrorKind::VersionMismatch { found: v },
                offset: at,
            });
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Parse {
                kind: ParseErrorKind::TrailingBytes,
                offset: self.offset,
            }),
            Err(e) => Err(Error::Io(e)),
        }
    }

    /// Guard a declared element count before any allocation happens.
    fn check_blob(&self, elems_a: u64, elems_b: u64) -> Result<()> {
        let bytes = elems_a
            .checked_mul(elems_b)
            .and_then(|e| e.checked_mul(4))
            .unwrap_or(u64::MAX);
        if bytes > MAX_BLOB_BYTES {
            return Err(Error::Parse {
                kind: ParseErrorKind::ShapeOverflow,
                offset: self.offset,
            });
        }
        Ok(())
    }
}

fn write_f32_block<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Write bytes to a temp file in the target directory, then rename into
/// place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ── LOLW: weight updates ────────────────────────────────────────────

pub fn write_update<W: Write>(x: &LoraUpdate, w: &mut W) -> Result<()> {
    w.write_all(b"LOLW")?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(x.layers().len() as u32).to_le_bytes())?;
    for layer in x.layers() {
        let name = layer.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let s = layer.shape();
        w.write_all(&(s.n as u32).to_le_bytes())?;
        w.write_all(&(s.m as u32).to_le_bytes())?;
        w.write_all(&(s.r as u32).to_le_bytes())?;
        write_f32_block(w, layer.u.data())?;
        write_f32_block(w, layer.v.data())?;
    }
    Ok(())
}

pub fn read_update<R: Read>(r: R) -> Result<LoraUpdate> {
    let mut c = Counted::new(r);
    c.expect_magic(b"LOLW")?;
    c.expect_version()?;
    let layer_count = c.read_u32()?;
    c.check_blob(layer_count as u64, 4)?;
    let mut layers = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let name_len = c.read_u32()?;
        c.check_blob(name_len as u64, 1)?;
        let mut name_bytes = vec![0u8; name_len as usize];
        let name_at = c.offset;
        c.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Parse {
            kind: ParseErrorKind::InvalidName,
            offset: name_at,
        })?;
        let n = c.read_u32()? as u64;
        let m = c.read_u32()? as u64;
        let rank = c.read_u32()? as u64;
        c.check_blob(n.max(m), rank)?;
        let u = c.read_f32_block((n * rank) as usize)?;
        let v = c.read_f32_block((m * rank) as usize)?;
        layers.push(LoraLayer {
            name,
            u: Matrix::new(n as usize, rank as usize, u)?,
            v: Matrix::new(m as usize, rank as usize, v)?,
        });
    }
    c.expect_eof()?;
    LoraUpdate::new(layers)
}

pub fn save_update(x: &LoraUpdate, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_update(x, &mut bytes)?;
    write_atomic(path, &bytes)
}

pub fn load_update(path: &Path) -> Result<LoraUpdate> {
    read_update(std::io::BufReader::new(std::fs::File::open(path)?))
}

// ── LOLF: feature dumps ─────────────────────────────────────────────

/// Sidecar descriptor for a feature dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDumpLayout {
    pub method: crate::featurize::FeatureMethod,
    pub rows: usize,
    pub dim: usize,
    pub offsets: Vec<usize>,
}

pub fn write_features<W: Write>(features: &[FeatureVector], w: &mut W) -> Result<()> {
    let dim = features.first().map(|f| f.values.len()).unwrap_or(0);
    for f in features {
        if f.values.len() != dim {
            return Err(Error::Shape {
                op: "write_features",
                detail: "feature rows have inconsistent dimensions".into(),
            });
        }
    }
    w.write_all(b"LOLF")?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(features.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for f in features {
        write_f32_block(w, &f.values)?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut c = Counted::new(r);
    c.expect_magic(b"LOLF")?;
    c.expect_version()?;
    let rows = c.read_u32()? as u64;
    let dim = c.read_u32()? as u64;
    c.check_blob(rows, dim)?;
    let data = c.read_f32_block((rows * dim) as usize)?;
    c.expect_eof()?;
    Ok((rows as usize, dim as usize, data))
}

pub fn save_features(features: &[FeatureVector], path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_features(features, &mut bytes)?;
    write_atomic(path, &bytes)
}

// ── Dataset manifests ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub label: Vec<f64>,
}

/// The JSON sidecar next to a directory of LOLW files: keeps the tensor
/// container pure and labels human-inspectable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskDescriptor,
    pub items: Vec<ManifestItem>,
}

/// Write one split directory: `item_#####.lolw` files plus
/// `manifest.json`.
pub fn save_split(ds: &TaskDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(ds.len());
    for (i, item) in ds.items.iter().enumerate() {
        let file = format!("item_{i:05}.lolw");
        save_update(&item.update, &dir.join(&file))?;
        items.push(ManifestItem { file, label: item.label.clone() });
    }
    let manifest = DatasetManifest { task: ds.task.clone(), items };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn load_split(dir: &Path) -> Result<TaskDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    let items = manifest
        .items
        .iter()
        .map(|mi| {
            Ok(TaskItem { update: load_update(&dir.join(&mi.file))?, label: mi.label.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = TaskDataset { items, task: manifest.task };
    ds.validate()?;
    Ok(ds)
}

// ── LOLM: model checkpoints ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ArchDescriptor {
    FeatMlp {
        task: TaskDescriptor,
        shapes: Vec<(usize, usize, usize)>,
        feat: FeaturizerConfig,
        standardize: bool,
        mlp_dims: Vec<usize>,
    },
    GlNet {
        task: TaskDescriptor,
        shapes: Vec<(usize, usize, usize)>,
        nonlinearity: Nonlinearity,
        hidden_width: usize,
        equivariant_layers: usize,
        head_dims: Vec<usize>,
        product_cap: usize,
    },
}

pub fn save_checkpoint(p: &Predictor, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(p, &mut bytes)?;
    write_atomic(path, &bytes)
}

pub fn write_checkpoint<W: Write>(p: &Predictor, w: &mut W) -> Result<()> {
    let shapes: Vec<(usize, usize, usize)> =
        p.train_shapes.iter().map(|s| (s.n, s.m, s.r)).collect();
    let (descriptor, blobs): (ArchDescriptor, Vec<&[f64]>) = match &p.model {
        PredictorModel::FeatMlp { featurizer, standardizer, mlp } => {
            let mut blobs: Vec<&[f64]> = Vec::new();
            if let Some(s) = standardizer {
                blobs.push(&s.mean);
                blobs.push(&s.std);
            }
            for layer in mlp.layers() {
                blobs.push(layer.weight.data());
                blobs.push(&layer.bias);
            }
            (
                ArchDescriptor::FeatMlp {
                    task: p.task.clone(),
                    shapes,
                    feat: featurizer.config().clone(),
                    standardize: standardizer.is_some(),
                    mlp_dims: mlp.dims(),
                },
                blobs,
            )
        }
        PredictorModel::GlNet(g) => {
            let mut blobs: Vec<&[f64]> = Vec::new();
            for stack in &g.stacks {
                for phi in &stack.phis {
                    blobs.push(phi.data());
                }
                for psi in &stack.psis {
                    blobs.push(psi.data());
                }
            }
            for layer in g.head.layers() {
                blobs.push(layer.weight.data());
                blobs.push(&layer.bias);
            }
            let hidden_width =
                g.stacks.first().map(|s| s.phis[0].rows()).unwrap_or(0);
            (
                ArchDescriptor::GlNet {
                    task: p.task.clone(),
                    shapes,
                    nonlinearity: g.nonlinearity,
                    hidden_width,
                    equivariant_layers: g.stacks.len(),
                    head_dims: g.head.dims(),
                    product_cap: g.product_cap,
                },
                blobs,
            )
        }
    };
    let json = serde_json::to_vec(&descriptor)?;
    w.write_all(b"LOLM")?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for blob in blobs {
        write_f32_block(w, blob)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Predictor> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Predictor> {
    let mut c = Counted::new(r);
    c.expect_magic(b"LOLM")?;
    c.expect_version()?;
    let json_len = c.read_u32()?;
    c.check_blob(json_len as u64, 1)?;
    let mut json = vec![0u8; json_len as usize];
    c.read_exact(&mut json)?;
    let descriptor: ArchDescriptor = serde_json::from_slice(&json)?;
    let predictor = match descriptor {
        ArchDescriptor::FeatMlp { task, shapes, feat, standardize, mlp_dims } => {
            let shapes: Vec<LayerShape> =
                shapes.iter().map(|&(n, m, r)| LayerShape { n, m, r }).collect();
            let featurizer = Featurizer::new(feat, &shapes)?;
            let standardizer = if standardize {
                let dim = mlp_dims[0];
                let mean = c.read_f32_block(dim)?;
                let std = c.read_f32_block(dim)?;
                Some(Standardizer { mean, std })
            } else {
                None
            };
            let mut layers = Vec::new();
            for pair in mlp_dims.windows(2) {
                c.check_blob(pair[0] as u64, pair[1] as u64)?;
                let weight =
                    Matrix::new(pair[1], pair[0], c.read_f32_block(pair[0] * pair[1])?)?;
                let bias = c.read_f32_block(pair[1])?;
                layers.push(MlpLayer { weight, bias });
            }
            Predictor {
                model: PredictorModel::FeatMlp {
                    featurizer,
                    standardizer,
                    mlp: MlpParams::from_layers(layers)?,
                },
                task,
                train_shapes: shapes,
            }
        }
        ArchDescriptor::GlNet {
            task,
            shapes,
            nonlinearity,
            hidden_width,
            equivariant_layers,
            head_dims,
            product_cap,
        } => {
            let lshapes: Vec<LayerShape> =
                shapes.iter().map(|&(n, m, r)| LayerShape { n, m, r }).collect();
            let mut stacks = Vec::with_capacity(equivariant_layers);
            for t in 0..equivariant_layers {
                let mut phis = Vec::new();
                let mut psis = Vec::new();
                for &(n, _, _) in &shapes {
                    let cols = if t == 0 { n } else { hidden_width };
                    c.check_blob(hidden_width as u64, cols as u64)?;
                    phis.push(Matrix::new(
                        hidden_width,
                        cols,
                        c.read_f32_block(hidden_width * cols)?,
                    )?);
                }
                for &(_, m, _) in &shapes {
                    let cols = if t == 0 { m } else { hidden_width };
                    psis.push(Matrix::new(
                        hidden_width,
                        cols,
                        c.read_f32_block(hidden_width * cols)?,
                    )?);
                }
                stacks.push(EquivariantLayer { phis, psis });
            }
            let mut layers = Vec::new();
            for pair in head_dims.windows(2) {
                c.check_blob(pair[0] as u64, pair[1] as u64)?;
                let weight =
                    Matrix::new(pair[1], pair[0], c.read_f32_block(pair[0] * pair[1])?)?;
                let bias = c.read_f32_block(pair[1])?;
                layers.push(MlpLayer { weight, bias });
            }
            Predictor {
                model: PredictorModel::GlNet(GlNetParams {
                    stacks,
                    nonlinearity,
                    head: MlpParams::from_layers(layers)?,
                    product_cap,
                }),
                task,
                train_shapes: lshapes,
            }
        }
    };
    c.expect_eof()?;
    Ok(predictor)
}

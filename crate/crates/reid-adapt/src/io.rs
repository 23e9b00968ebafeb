//! File formats.
//!
//! * `EMBD` — binary embedding sets (canonical, bitwise round-trip).
//! * CSV embedding sets — text alternative, round-trips through the shortest
//!   decimal representation of each `f32`.
//! * `DMAT` — distance-matrix dumps for external cross-checks.
//! * `ENCM` — encoder checkpoints.
//! * CSV dumps for cluster assignments, per-iteration reports and retrieval
//!   results.
//!
//! All multi-byte fields are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::cluster::ClusterAssignment;
use crate::data::{DistanceKind, DistanceMatrix, DomainTag, EmbeddingSet, SampleMeta};
use crate::encoder::{Activation, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::RetrievalResult;
use crate::mat::Mat;
use crate::selftrain::IterationReport;

/// On-disk representation of an embedding set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Binary,
    Csv,
}

const EMBD_MAGIC: &[u8; 4] = b"EMBD";
const EMBD_VERSION: u16 = 1;
const DMAT_MAGIC: &[u8; 4] = b"DMAT";
const ENCM_MAGIC: &[u8; 4] = b"ENCM";
const ENCM_VERSION: u16 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn header_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn stem_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".to_string())
}

/// Loads an embedding set. The domain tag is not part of the file format;
/// the caller states which domain the file belongs to.
pub fn load_embeddings(path: &Path, format: FileFormat, domain: DomainTag) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    match format {
        FileFormat::Binary => decode_binary(path, &bytes, domain),
        FileFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|e| header_err(path, format!("file is not valid UTF-8: {e}")))?;
            decode_csv(path, &text, domain)
        }
    }
}

/// Saves an embedding set so that [`load_embeddings`] reproduces it exactly
/// (bitwise for [`FileFormat::Binary`]).
pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Binary => encode_binary(set),
        FileFormat::Csv => encode_csv(set).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn encode_binary(set: &EmbeddingSet) -> Vec<u8> {
    let has_ids = set.meta().iter().any(|m| m.identity.is_some());
    let has_cams = set.meta().iter().any(|m| m.camera.is_some());
    let flags: u16 = (has_ids as u16) | ((has_cams as u16) << 1);
    let (n, d) = (set.len(), set.dim());

    let mut out = Vec::with_capacity(16 + n * d * 4 + n * 16);
    out.extend_from_slice(EMBD_MAGIC);
    out.extend_from_slice(&EMBD_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in set.features_raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if has_ids {
        for m in set.meta() {
            out.extend_from_slice(&m.identity.unwrap_or(-1).to_le_bytes());
        }
    }
    if has_cams {
        for m in set.meta() {
            out.extend_from_slice(&m.camera.unwrap_or(-1).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(len)?;
        if end > self.bytes.len() {
            return None;
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i64(&mut self) -> Option<i64> {
        self.take(8)
            .map(|b| i64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

fn decode_binary(path: &Path, bytes: &[u8], domain: DomainTag) -> Result<EmbeddingSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(4)
        .ok_or_else(|| header_err(path, "file shorter than the magic bytes"))?;
    if magic != EMBD_MAGIC {
        return Err(header_err(path, format!("bad magic {magic:?}, expected \"EMBD\"")));
    }
    let version = cur.u16().ok_or_else(|| header_err(path, "truncated version"))?;
    if version != EMBD_VERSION {
        return Err(header_err(path, format!("unsupported version {version}")));
    }
    let flags = cur.u16().ok_or_else(|| header_err(path, "truncated flags"))?;
    if flags & !0b11 != 0 {
        return Err(header_err(path, format!("unknown flag bits 0x{flags:04x}")));
    }
    let n = cur.u32().ok_or_else(|| header_err(path, "truncated sample count"))? as usize;
    let d = cur.u32().ok_or_else(|| header_err(path, "truncated dimension"))? as usize;
    if n == 0 || d == 0 {
        return Err(header_err(path, format!("need n >= 1 and d >= 1, got n={n}, d={d}")));
    }

    let mut features = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let v = cur
                .f32()
                .ok_or_else(|| header_err(path, format!("feature data truncated at row {i}")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: i, col: j });
            }
            features.push(v);
        }
    }

    let read_i64_column = |cur: &mut Cursor, what: &str| -> Result<Vec<i64>> {
        let mut col = Vec::with_capacity(n);
        for i in 0..n {
            col.push(
                cur.i64()
                    .ok_or_else(|| header_err(path, format!("{what} column truncated at row {i}")))?,
            );
        }
        Ok(col)
    };

    let ids = if flags & 1 != 0 {
        Some(read_i64_column(&mut cur, "identity")?)
    } else {
        None
    };
    let cams = if flags & 2 != 0 {
        Some(read_i64_column(&mut cur, "camera")?)
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(header_err(
            path,
            format!("{} trailing bytes after the declared payload", bytes.len() - cur.pos),
        ));
    }

    let meta = (0..n)
        .map(|i| SampleMeta {
            identity: ids.as_ref().and_then(|v| (v[i] >= 0).then_some(v[i])),
            camera: cams.as_ref().and_then(|v| (v[i] >= 0).then_some(v[i])),
            domain,
        })
        .collect();
    EmbeddingSet::new(stem_name(path), n, d, features, meta)
}

fn encode_csv(set: &EmbeddingSet) -> String {
    let has_ids = set.meta().iter().any(|m| m.identity.is_some());
    let has_cams = set.meta().iter().any(|m| m.camera.is_some());
    let mut out = format!(
        "dim={},labels={},cameras={}\n",
        set.dim(),
        has_ids as u8,
        has_cams as u8
    );
    for i in 0..set.len() {
        let mut fields: Vec<String> = set.feature_row(i).iter().map(|v| format!("{v}")).collect();
        if has_ids {
            fields.push(format!("{}", set.meta()[i].identity.unwrap_or(-1)));
        }
        if has_cams {
            fields.push(format!("{}", set.meta()[i].camera.unwrap_or(-1)));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn decode_csv(path: &Path, text: &str, domain: DomainTag) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| header_err(path, "empty file"))?
        .trim();

    let mut dim: Option<usize> = None;
    let mut labels: Option<bool> = None;
    let mut cameras: Option<bool> = None;
    for part in header.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| header_err(path, format!("bad header field `{part}`")))?;
        match key.trim() {
            "dim" => {
                dim = Some(value.trim().parse().map_err(|_| {
                    header_err(path, format!("bad dim value `{value}`"))
                })?)
            }
            "labels" => labels = Some(parse_header_bool(path, "labels", value)?),
            "cameras" => cameras = Some(parse_header_bool(path, "cameras", value)?),
            other => return Err(header_err(path, format!("unknown header key `{other}`"))),
        }
    }
    let d = dim.ok_or_else(|| header_err(path, "header misses dim="))?;
    let has_ids = labels.ok_or_else(|| header_err(path, "header misses labels="))?;
    let has_cams = cameras.ok_or_else(|| header_err(path, "header misses cameras="))?;
    if d == 0 {
        return Err(header_err(path, "dim must be >= 1"));
    }

    let expected = d + has_ids as usize + has_cams as usize;
    let mut features = Vec::new();
    let mut meta = Vec::new();
    let mut row = 0usize;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "row {row}: expected {expected} fields (dim {d}{}{}), got {}",
                    if has_ids { " + identity" } else { "" },
                    if has_cams { " + camera" } else { "" },
                    fields.len()
                ),
            });
        }
        for (j, tok) in fields[..d].iter().enumerate() {
            let v: f32 = tok
                .trim()
                .parse()
                .map_err(|_| Error::NonFiniteValue { row, col: j })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row, col: j });
            }
            features.push(v);
        }
        let mut next = d;
        let identity = if has_ids {
            let v: i64 = fields[next]
                .trim()
                .parse()
                .map_err(|_| Error::NonFiniteValue { row, col: next })?;
            next += 1;
            (v >= 0).then_some(v)
        } else {
            None
        };
        let camera = if has_cams {
            let v: i64 = fields[next]
                .trim()
                .parse()
                .map_err(|_| Error::NonFiniteValue { row, col: next })?;
            (v >= 0).then_some(v)
        } else {
            None
        };
        meta.push(SampleMeta {
            identity,
            camera,
            domain,
        });
        row += 1;
    }
    EmbeddingSet::new(stem_name(path), row, d, features, meta)
}

fn parse_header_bool(path: &Path, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(header_err(path, format!("{key} must be 0 or 1, got `{other}`"))),
    }
}

/// Dumps a distance matrix: `DMAT`, kind byte, `n` as u32, then `n*n`
/// entries as little-endian `f32` row-major.
pub fn write_dmat(dm: &DistanceMatrix, path: &Path) -> Result<()> {
    let n = dm.len();
    let mut out = Vec::with_capacity(9 + n * n * 4);
    out.extend_from_slice(DMAT_MAGIC);
    out.push(dm.kind().code());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for v in dm.mat().data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads back a `DMAT` dump (entries promoted to `f64`).
pub fn read_dmat(path: &Path) -> Result<(DistanceKind, Mat)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur
        .take(4)
        .ok_or_else(|| header_err(path, "file shorter than the magic bytes"))?;
    if magic != DMAT_MAGIC {
        return Err(header_err(path, format!("bad magic {magic:?}, expected \"DMAT\"")));
    }
    let code = cur.take(1).ok_or_else(|| header_err(path, "truncated kind byte"))?[0];
    let kind = DistanceKind::from_code(code)
        .ok_or_else(|| header_err(path, format!("unknown kind code {code}")))?;
    let n = cur.u32().ok_or_else(|| header_err(path, "truncated size"))? as usize;
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        data.push(cur.f32().ok_or_else(|| header_err(path, "matrix data truncated"))? as f64);
    }
    Ok((kind, Mat::from_vec(n, n, data)))
}

/// Saves an encoder checkpoint: `ENCM`, version, activation byte, layer
/// count, then per layer the dims as u32 and the row-major weights plus the
/// bias as little-endian `f64`.
pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(ENCM_MAGIC);
    out.extend_from_slice(&ENCM_VERSION.to_le_bytes());
    out.push(match model.activation() {
        Activation::None => 0,
        Activation::Relu => 1,
    });
    out.extend_from_slice(&(model.layers().len() as u16).to_le_bytes());
    for (w, b) in model.layers() {
        out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur
        .take(4)
        .ok_or_else(|| header_err(path, "file shorter than the magic bytes"))?;
    if magic != ENCM_MAGIC {
        return Err(header_err(path, format!("bad magic {magic:?}, expected \"ENCM\"")));
    }
    let version = cur.u16().ok_or_else(|| header_err(path, "truncated version"))?;
    if version != ENCM_VERSION {
        return Err(header_err(path, format!("unsupported version {version}")));
    }
    let activation = match cur.take(1).ok_or_else(|| header_err(path, "truncated activation"))?[0] {
        0 => Activation::None,
        1 => Activation::Relu,
        other => return Err(header_err(path, format!("unknown activation code {other}"))),
    };
    let layer_count = cur.u16().ok_or_else(|| header_err(path, "truncated layer count"))?;
    let mut layers = Vec::with_capacity(layer_count as usize);
    for l in 0..layer_count {
        let d_in = cur
            .u32()
            .ok_or_else(|| header_err(path, format!("layer {l}: truncated dims")))? as usize;
        let d_out = cur
            .u32()
            .ok_or_else(|| header_err(path, format!("layer {l}: truncated dims")))? as usize;
        let mut w = Vec::with_capacity(d_in * d_out);
        for _ in 0..d_in * d_out {
            w.push(
                cur.f64()
                    .ok_or_else(|| header_err(path, format!("layer {l}: truncated weights")))?,
            );
        }
        let mut b = Vec::with_capacity(d_out);
        for _ in 0..d_out {
            b.push(
                cur.f64()
                    .ok_or_else(|| header_err(path, format!("layer {l}: truncated bias")))?,
            );
        }
        layers.push((Mat::from_vec(d_out, d_in, w), b));
    }
    if cur.pos != bytes.len() {
        return Err(header_err(
            path,
            format!("{} trailing bytes after the declared payload", bytes.len() - cur.pos),
        ));
    }
    EncoderModel::from_layers(layers, activation)
}

/// Cluster assignment dump: `index,label` rows with `-1` for noise.
pub fn write_assignment_csv(a: &ClusterAssignment, path: &Path) -> Result<()> {
    let mut out = String::from("index,label\n");
    for (i, label) in a.labels.iter().enumerate() {
        let l = label.map(|c| c as i64).unwrap_or(-1);
        out.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Per-iteration report CSV; absent optional metrics stay empty.
pub fn write_reports_csv(reports: &[IterationReport], path: &Path) -> Result<()> {
    let mut out = String::from("iter,tau,clusters,noise,l_intra,l_inter,l_wr,rank1,rank5,rank10,map,ari\n");
    for r in reports {
        let eval = match &r.eval {
            Some(e) => format!("{},{},{},{}", e.rank1, e.rank5, e.rank10, e.map),
            None => ",,,".to_string(),
        };
        let ari = r.ari.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration, r.tau, r.num_clusters, r.noise_count, r.l_intra, r.l_inter, r.l_wr, eval, ari
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Retrieval report CSV: `rank,cmc` rows plus a trailing `map,<value>` row.
pub fn write_retrieval_csv(result: &RetrievalResult, path: &Path) -> Result<()> {
    let mut out = String::from("rank,cmc\n");
    for (i, v) in result.cmc.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, v));
    }
    out.push_str(&format!("map,{}\n", result.map));
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a whole file to a string with the crate's error type.
pub fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| io_err(path, e))?;
    Ok(s)
}

/// Writes text with the crate's error type.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| io_err(path, e))
}

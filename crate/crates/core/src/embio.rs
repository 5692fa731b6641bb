//! On-disk formats: EMB1 embedding files with `.ids.jsonl` sidecars, adapter
//! checkpoints, JSONL manifests and `key = value` config files.
//!
//! EMB1 layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMB1"
//! 4       1     version = 1
//! 5       1     dtype = 0 (f32)
//! 6       2     reserved = 0
//! 8       8     rows (u64)
//! 16      8     dim (u64)
//! 24      ...   rows * dim f32 values, row-major
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterKind, AdapterState};
use crate::filtering::FilterConfig;
use crate::harness::{HarnessConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RowVector, DEFAULT_EPSILON};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 24;

/// Row-identified embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    matrix: Matrix,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, matrix: Matrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::shape("EmbeddingMatrix ids", ids.len(), matrix.rows()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate embedding id `{dup}`")));
        }
        Ok(Self { ids, matrix })
    }

    /// Ids are the decimal row indices.
    pub fn with_row_ids(matrix: Matrix) -> Self {
        let ids = (0..matrix.rows()).map(|i| i.to_string()).collect();
        Self { ids, matrix }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn into_parts(self) -> (Vec<String>, Matrix) {
        (self.ids, self.matrix)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            matrix: self.matrix.select_rows(indices),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbFileHeader {
    pub rows: u64,
    pub dim: u64,
}

impl EmbFileHeader {
    pub fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = DTYPE_F32;
        out[8..16].copy_from_slice(&self.rows.to_le_bytes());
        out[16..24].copy_from_slice(&self.dim.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected: format!("at least {HEADER_LEN}"),
                actual: bytes.len() as u64,
            });
        }
        if bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype {}", bytes[5])));
        }
        if bytes[6..8] != [0, 0] {
            return Err(bad("reserved bytes must be zero".into()));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let dim = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        Ok(Self { rows, dim })
    }

    /// Payload size in bytes, or `None` on overflow.
    pub fn payload_len(self) -> Option<u64> {
        self.rows.checked_mul(self.dim)?.checked_mul(4)
    }
}

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids.jsonl");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct IdLine {
    row: usize,
    id: String,
}

/// Writes to a sibling temp file and renames it into place, so a failed
/// write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);

    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Writes an EMB1 file plus its `.ids.jsonl` sidecar.
pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_matrix(m.matrix(), path)?;
    write_atomic(&ids_path(path), |w| {
        for (row, id) in m.ids.iter().enumerate() {
            serde_json::to_writer(&mut *w, &IdLine { row, id: id.clone() })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Writes the EMB1 payload only; values are narrowed to f32.
pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let header = EmbFileHeader {
        rows: m.rows() as u64,
        dim: m.cols() as u64,
    };
    write_atomic(path.as_ref(), |w| {
        w.write_all(&header.to_bytes())?;
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    })
}

/// Reads an EMB1 file. The header and the file length are validated before
/// any payload memory is allocated.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);

    let mut head = Vec::with_capacity(HEADER_LEN);
    (&mut reader)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let header = EmbFileHeader::parse(&head, path)?;

    let expected = header
        .payload_len()
        .and_then(|p| p.checked_add(HEADER_LEN as u64));
    if expected != Some(actual) {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: match expected {
                Some(n) => n.to_string(),
                None => format!("{} x {} x 4 (overflows)", header.rows, header.dim),
            },
            actual,
        });
    }
    let (rows, dim) = (header.rows as usize, header.dim as usize);

    let mut data = Vec::with_capacity(rows * dim);
    let mut buf = vec![0u8; dim * 4];
    for row in 0..rows {
        reader.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        for chunk in buf.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    row,
                });
            }
            data.push(f64::from(v));
        }
    }
    Matrix::from_vec(rows, dim, data)
}

/// Reads an EMB1 file and its id sidecar. Without a sidecar, ids default to
/// the row indices.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let matrix = read_matrix(path)?;
    let sidecar = ids_path(path);
    if !sidecar.exists() {
        return Ok(EmbeddingMatrix::with_row_ids(matrix));
    }
    let ids = read_ids(&sidecar, matrix.rows())?;
    EmbeddingMatrix::new(ids, matrix)
}

fn read_ids(path: &Path, rows: usize) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids: Vec<Option<String>> = vec![None; rows];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: IdLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        let slot = ids.get_mut(parsed.row).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: row {} out of range for {rows} rows", n + 1, parsed.row),
        })?;
        *slot = Some(parsed.id);
    }
    ids.into_iter()
        .enumerate()
        .map(|(row, id)| {
            id.ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing id for row {row}"),
            })
        })
        .collect()
}

/// One retained pair in a filter manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub self_sim: f64,
    pub rank: usize,
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_manifest_to(entries, w))
}

pub fn write_manifest_to(entries: &[ManifestEntry], w: &mut impl Write) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

/// Scalars and shapes stored next to the tensors of an adapter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub d_in: usize,
    pub d_out: usize,
}

const CHECKPOINT_TENSORS: [&str; 4] = ["w0", "b", "a", "mag"];

/// Saves an adapter as a directory holding `header.json` and one EMB1 file
/// per tensor (`w0.emb`, `b.emb`, `a.emb`, `mag.emb`). Tensors are stored
/// as f32; the scalars keep full precision in the header.
pub fn save_checkpoint(state: &AdapterState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mag = Matrix::from_vec(1, state.mag.len(), state.mag.data().to_vec())?;
    for (name, m) in CHECKPOINT_TENSORS.iter().zip([&state.w0, &state.b, &state.a, &mag]) {
        write_matrix(m, dir.join(format!("{name}.emb")))?;
    }
    let header = CheckpointHeader {
        kind: state.kind,
        rank: state.rank,
        alpha: state.alpha,
        beta: state.beta,
        epsilon: state.epsilon,
        d_in: state.d_in(),
        d_out: state.d_out(),
    };
    write_json(&header, dir.join("header.json"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<AdapterState> {
    let dir = dir.as_ref();
    let header_path = dir.join("header.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    let load = |name: &str| read_matrix(dir.join(format!("{name}.emb")));
    let mag = load("mag")?;
    if mag.rows() != 1 {
        return Err(Error::shape("checkpoint magnitude", format!("{}x{}", mag.rows(), mag.cols()), "1xd_out"));
    }
    let state = AdapterState {
        w0: load("w0")?,
        b: load("b")?,
        a: load("a")?,
        mag: RowVector::new(mag.into_data())?,
        alpha: header.alpha,
        beta: header.beta,
        rank: header.rank,
        kind: header.kind,
        epsilon: header.epsilon,
    };
    if state.w0.shape() != (header.d_in, header.d_out) {
        return Err(Error::shape(
            "checkpoint w0",
            format!("{}x{}", state.w0.rows(), state.w0.cols()),
            format!("{}x{}", header.d_in, header.d_out),
        ));
    }
    state.validate()?;
    Ok(state)
}

/// Settings read from a `key = value` file. Every field has a default, so an
/// empty file is valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunConfig {
    pub filter: FilterConfig,
    pub alpha: f64,
    pub beta: f64,
    pub rank: usize,
    pub eta: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub n_pairs: usize,
    pub noise_std: f64,
    pub corrupt_fraction: f64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let harness = HarnessConfig::default();
        let spec = SyntheticSpec::default();
        Self {
            filter: FilterConfig::default(),
            alpha: adapters::DEFAULT_ALPHA,
            beta: adapters::DEFAULT_BETA,
            rank: adapters::DEFAULT_RANK,
            eta: harness.eta,
            epsilon: DEFAULT_EPSILON,
            epochs: harness.epochs,
            batch_size: harness.batch_size,
            lr: harness.lr,
            weight_decay: harness.weight_decay,
            temperature: harness.temperature,
            n_pairs: spec.n_pairs,
            noise_std: spec.noise_std,
            corrupt_fraction: spec.corrupt_fraction,
            threads: 0,
        }
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "rank_threshold" => self.filter.rank_threshold = num(key, value)?,
            "distractor_count" => self.filter.distractor_count = num(key, value)?,
            "seed" => self.filter.seed = num(key, value)?,
            "shared_sample" => self.filter.shared_sample = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "rank" => self.rank = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "n_pairs" => self.n_pairs = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "corrupt_fraction" => self.corrupt_fraction = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.filter.seed
    }

    /// Parses config text. `#` starts a comment; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(reason) => Error::Parse { line: n + 1, reason },
                other => other,
            })?;
        }
        Ok(cfg)
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

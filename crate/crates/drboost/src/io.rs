//! Binary file formats.
//!
//! Three magics, all little-endian, all carrying a u32 format version:
//!
//! * `DRBM` — one encoder model: featurizer config, dims, layer-norm
//!   flag and epsilon, then parameters as f32 in row-major order.
//! * `DRBE` — an ensemble: component count, then (alpha, model body)
//!   per component.
//! * `DRBX` — an index, tagged EXACT, IVF, or PQ. EXACT is the raw
//!   embedding matrix with row ids; IVF adds centroids and inverted
//!   lists; PQ stores codebooks and one byte per subspace per row.
//!
//! Model parameters are f64 in memory but stored as f32, so a
//! save/load round trip quantizes once; saving the same model twice is
//! byte-identical. The exact field layout is documented in the README.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::boosting::Ensemble;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::featurizer::FeaturizerConfig;
use crate::index::kmeans::Centroids;
use crate::index::{EmbeddingMatrix, IvfIndex, PqIndex};

pub const MODEL_MAGIC: &[u8; 4] = b"DRBM";
pub const ENSEMBLE_MAGIC: &[u8; 4] = b"DRBE";
pub const INDEX_MAGIC: &[u8; 4] = b"DRBX";
pub const FORMAT_VERSION: u32 = 1;

const TAG_EXACT: u8 = 0;
const TAG_IVF: u8 = 1;
const TAG_PQ: u8 = 2;

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn read_magic(r: &mut impl Read, path: &Path, expect: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != expect {
        return Err(fmt_err(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(expect)
            ),
        ));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, format!("unsupported format version {version}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// model body
// ---------------------------------------------------------------------------

fn write_model_body(w: &mut impl Write, model: &EncoderModel, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    w.write_u64::<LittleEndian>(model.featurizer.num_buckets)
        .map_err(io)?;
    w.write_u8(model.featurizer.use_bigrams as u8).map_err(io)?;
    w.write_u8(model.featurizer.lowercase as u8).map_err(io)?;
    w.write_u64::<LittleEndian>(model.featurizer.hash_seed)
        .map_err(io)?;
    w.write_u32::<LittleEndian>(model.dim as u32).map_err(io)?;
    w.write_u8(model.use_layer_norm as u8).map_err(io)?;
    w.write_f32::<LittleEndian>(model.ln_epsilon as f32)
        .map_err(io)?;
    for &v in &model.weights {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    for &v in &model.ln_gain {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    for &v in &model.ln_bias {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    Ok(())
}

fn read_model_body(r: &mut impl Read, path: &Path) -> Result<EncoderModel> {
    let io = |e| Error::io(path, e);
    let num_buckets = r.read_u64::<LittleEndian>().map_err(io)?;
    let use_bigrams = r.read_u8().map_err(io)? != 0;
    let lowercase = r.read_u8().map_err(io)? != 0;
    let hash_seed = r.read_u64::<LittleEndian>().map_err(io)?;
    let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let use_layer_norm = r.read_u8().map_err(io)? != 0;
    let ln_epsilon = f64::from(r.read_f32::<LittleEndian>().map_err(io)?);

    let featurizer = FeaturizerConfig {
        num_buckets,
        use_bigrams,
        lowercase,
        hash_seed,
    };
    featurizer.validate()?;
    if dim == 0 {
        return Err(fmt_err(path, "zero embedding dim"));
    }

    let n = num_buckets as usize * dim;
    let mut weights = vec![0.0f64; n];
    for v in weights.iter_mut() {
        *v = f64::from(r.read_f32::<LittleEndian>().map_err(io)?);
    }
    let mut ln_gain = vec![0.0f64; dim];
    for v in ln_gain.iter_mut() {
        *v = f64::from(r.read_f32::<LittleEndian>().map_err(io)?);
    }
    let mut ln_bias = vec![0.0f64; dim];
    for v in ln_bias.iter_mut() {
        *v = f64::from(r.read_f32::<LittleEndian>().map_err(io)?);
    }

    let model = EncoderModel {
        featurizer,
        dim,
        weights,
        ln_gain,
        ln_bias,
        ln_epsilon,
        use_layer_norm,
    };
    model.validate()?;
    Ok(model)
}

/// Save one encoder model (`DRBM`).
pub fn save_model(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    w.write_all(MODEL_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)
        .map_err(|e| Error::io(path, e))?;
    write_model_body(&mut w, model, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let mut r = open_reader(path)?;
    read_magic(&mut r, path, MODEL_MAGIC)?;
    read_model_body(&mut r, path)
}

/// Save an ensemble (`DRBE`).
pub fn save_ensemble(ensemble: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(ENSEMBLE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(ensemble.len() as u32)
        .map_err(io)?;
    for (model, alpha) in ensemble.components() {
        w.write_f32::<LittleEndian>(*alpha as f32).map_err(io)?;
        write_model_body(&mut w, model, path)?;
    }
    w.flush().map_err(io)
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<Ensemble> {
    let path = path.as_ref();
    let mut r = open_reader(path)?;
    read_magic(&mut r, path, ENSEMBLE_MAGIC)?;
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    if count == 0 {
        return Err(fmt_err(path, "ensemble with zero components"));
    }
    let mut components = Vec::with_capacity(count);
    for _ in 0..count {
        let alpha = f64::from(
            r.read_f32::<LittleEndian>()
                .map_err(|e| Error::io(path, e))?,
        );
        let model = read_model_body(&mut r, path)?;
        components.push((model, alpha));
    }
    Ensemble::from_components(components)
}

/// A model file of either flavor, detected by magic.
pub enum ModelFile {
    Single(EncoderModel),
    Ensemble(Ensemble),
}

impl ModelFile {
    /// View either flavor as an ensemble (a single model keeps its
    /// identity as one component with weight 1).
    pub fn into_ensemble(self) -> Ensemble {
        match self {
            ModelFile::Single(model) => Ensemble::new(model),
            ModelFile::Ensemble(e) => e,
        }
    }
}

/// Load a `DRBM` or `DRBE` file, dispatching on the magic.
pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let mut probe = [0u8; 4];
    {
        let mut r = open_reader(path)?;
        r.read_exact(&mut probe).map_err(|e| Error::io(path, e))?;
    }
    match &probe {
        m if m == MODEL_MAGIC => Ok(ModelFile::Single(load_model(path)?)),
        m if m == ENSEMBLE_MAGIC => Ok(ModelFile::Ensemble(load_ensemble(path)?)),
        other => Err(fmt_err(
            path,
            format!("not a model file (magic {:?})", String::from_utf8_lossy(other)),
        )),
    }
}

// ---------------------------------------------------------------------------
// index files
// ---------------------------------------------------------------------------

fn write_matrix_body(w: &mut impl Write, matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    w.write_u64::<LittleEndian>(matrix.num_rows as u64)
        .map_err(io)?;
    w.write_u32::<LittleEndian>(matrix.dim as u32).map_err(io)?;
    for id in &matrix.row_ids {
        let bytes = id.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
    }
    for &v in &matrix.data {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    Ok(())
}

fn read_matrix_body(r: &mut impl Read, path: &Path) -> Result<EmbeddingMatrix> {
    let io = |e| Error::io(path, e);
    let num_rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut row_ids = Vec::with_capacity(num_rows);
    for _ in 0..num_rows {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        row_ids.push(
            String::from_utf8(buf).map_err(|_| fmt_err(path, "row id is not utf-8"))?,
        );
    }
    let mut data = vec![0.0f32; num_rows * dim];
    for v in data.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(io)?;
    }
    EmbeddingMatrix::new(dim, data, row_ids)
}

/// An index file of any type.
pub enum IndexFile {
    Exact(EmbeddingMatrix),
    Ivf(EmbeddingMatrix, IvfIndex),
    Pq(PqIndex),
}

impl IndexFile {
    pub fn type_name(&self) -> &'static str {
        match self {
            IndexFile::Exact(_) => "exact",
            IndexFile::Ivf(..) => "ivf",
            IndexFile::Pq(_) => "pq",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            IndexFile::Exact(m) => m.dim,
            IndexFile::Ivf(m, _) => m.dim,
            IndexFile::Pq(pq) => pq.dim,
        }
    }
}

/// Save a bare embedding matrix as an EXACT index.
pub fn save_exact_index(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(INDEX_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    w.write_u8(TAG_EXACT).map_err(io)?;
    write_matrix_body(&mut w, matrix, path)?;
    w.flush().map_err(io)
}

/// Save an IVF index together with its matrix (self-contained file).
pub fn save_ivf_index(
    matrix: &EmbeddingMatrix,
    ivf: &IvfIndex,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if matrix.num_rows > u32::MAX as usize {
        return Err(Error::Argument("too many rows for the IVF file format".to_string()));
    }
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(INDEX_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    w.write_u8(TAG_IVF).map_err(io)?;
    write_matrix_body(&mut w, matrix, path)?;
    w.write_u32::<LittleEndian>(ivf.k() as u32).map_err(io)?;
    for &v in &ivf.centroids.data {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    for list in &ivf.lists {
        w.write_u64::<LittleEndian>(list.len() as u64).map_err(io)?;
        for &row in list {
            w.write_u32::<LittleEndian>(row).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Save a PQ index (`codes` plus codebooks; no raw vectors).
pub fn save_pq_index(pq: &PqIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(INDEX_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    w.write_u8(TAG_PQ).map_err(io)?;
    w.write_u64::<LittleEndian>(pq.num_rows() as u64).map_err(io)?;
    w.write_u32::<LittleEndian>(pq.dim as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(pq.sub_dim as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(pq.num_centroids as u32)
        .map_err(io)?;
    for id in &pq.row_ids {
        let bytes = id.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
    }
    for &v in &pq.codebooks {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.write_all(&pq.codes).map_err(io)?;
    w.flush().map_err(io)
}

/// Load any `DRBX` file, dispatching on the type tag.
pub fn load_index(path: impl AsRef<Path>) -> Result<IndexFile> {
    let path = path.as_ref();
    let mut r = open_reader(path)?;
    read_magic(&mut r, path, INDEX_MAGIC)?;
    let io = |e| Error::io(path, e);
    let tag = r.read_u8().map_err(io)?;
    match tag {
        TAG_EXACT => Ok(IndexFile::Exact(read_matrix_body(&mut r, path)?)),
        TAG_IVF => {
            let matrix = read_matrix_body(&mut r, path)?;
            let k = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut data = vec![0.0f32; k * matrix.dim];
            for v in data.iter_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(io)?;
            }
            let mut lists = Vec::with_capacity(k);
            for _ in 0..k {
                let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
                let mut list = Vec::with_capacity(len);
                for _ in 0..len {
                    list.push(r.read_u32::<LittleEndian>().map_err(io)?);
                }
                lists.push(list);
            }
            let ivf = IvfIndex {
                centroids: Centroids {
                    k,
                    dim: matrix.dim,
                    data,
                },
                lists,
            };
            Ok(IndexFile::Ivf(matrix, ivf))
        }
        TAG_PQ => {
            let num_rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let sub_dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let num_centroids = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            if sub_dim == 0 || dim % sub_dim != 0 {
                return Err(fmt_err(path, "pq sub_dim does not divide dim"));
            }
            let m = dim / sub_dim;
            let mut row_ids = Vec::with_capacity(num_rows);
            for _ in 0..num_rows {
                let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf).map_err(io)?;
                row_ids.push(
                    String::from_utf8(buf)
                        .map_err(|_| fmt_err(path, "row id is not utf-8"))?,
                );
            }
            let mut codebooks = vec![0.0f32; m * num_centroids * sub_dim];
            for v in codebooks.iter_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(io)?;
            }
            let mut codes = vec![0u8; num_rows * m];
            r.read_exact(&mut codes).map_err(io)?;
            Ok(IndexFile::Pq(PqIndex {
                dim,
                sub_dim,
                num_centroids,
                codebooks,
                codes,
                row_ids,
            }))
        }
        other => Err(fmt_err(path, format!("unknown index type tag {other}"))),
    }
}

/// Hex sha256 of a file, for run manifests.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

/// Write a training history table (`round<TAB>dev_metric<TAB>train_nll`).
pub fn write_history(history: &[crate::boosting::RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("round\tdev_metric\ttrain_nll\n");
    for record in history {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            record.round, record.dev_metric, record.train_nll
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

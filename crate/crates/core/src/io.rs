//! File formats.
//!
//! Tensor file (`FCT1`), little-endian:
//!
//! ```text
//! magic  4 bytes  "FCT1"
//! rank   u32
//! dims   rank x u32
//! data   prod(dims) x f32, row-major
//! ```
//!
//! A model is a concatenation of tensor records (`W_1, b_1, ..., W_L, b_L`,
//! `W_k` stored as `[inputs, outputs]`) plus a JSON sidecar at `<path>.json`
//! with the layer sizes and time-embedding dimension. Optimizer state for resumable training
//! lives at `<path>.state` (`FCS1`, full f64 precision).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, Sinogram};
use crate::velocity::{Adam, Dense, NeuralVelocity, Params, T_FLOOR};

pub const TENSOR_MAGIC: &[u8; 4] = b"FCT1";
pub const STATE_MAGIC: &[u8; 4] = b"FCS1";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn write_tensor(w: &mut impl Write, dims: &[usize], values: &[f64], path: &Path) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != values.len() {
        return Err(Error::dims(
            format!("{count} values for dims {dims:?}"),
            values.len(),
        ));
    }
    let io = |e| Error::io(path, e);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())
        .map_err(io)?;
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(4 * values.len());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(path, what.to_string()),
        _ => Error::io(path, e),
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, path, "truncated header")?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor record; `Ok(None)` at a clean end of file.
fn read_tensor(r: &mut impl Read, path: &Path) -> Result<Option<(Vec<usize>, Vec<f64>)>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < 4 || &magic != TENSOR_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let rank = read_u32(r, path)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r, path)? as usize);
    }
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; 4 * count];
    read_exact_or(r, &mut bytes, path, "payload length mismatch")?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Some((dims, values)))
}

pub fn save_tensor(path: impl AsRef<Path>, dims: &[usize], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_tensor(&mut w, dims, values, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let tensor = read_tensor(&mut r, path)?.ok_or_else(|| Error::format(path, "empty file"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "payload length mismatch"));
    }
    Ok(tensor)
}

pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    save_tensor(path, &[img.height(), img.width()], img.values())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let (dims, values) = load_tensor(path)?;
    match dims[..] {
        [h, w] => Image::from_vec(w, h, values),
        _ => Err(Error::format(
            path,
            format!("expected a rank-2 image, got dims {dims:?}"),
        )),
    }
}

pub fn save_sinogram(path: impl AsRef<Path>, y: &Sinogram) -> Result<()> {
    save_tensor(path, &[y.n_angles(), y.n_detectors()], y.values())
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    let path = path.as_ref();
    let (dims, values) = load_tensor(path)?;
    match dims[..] {
        [a, d] => Sinogram::from_vec(a, d, values),
        _ => Err(Error::format(
            path,
            format!("expected a rank-2 sinogram, got dims {dims:?}"),
        )),
    }
}

/// Plain-text header stored next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format: String,
    pub image_pixels: usize,
    pub time_embed_dim: usize,
    pub activation: String,
    /// `[inputs, outputs]` of each layer, input layer first.
    pub layers: Vec<[usize; 2]>,
    /// Time floor of the velocity scaling `(x - D) / max(t, t_floor)`.
    pub t_floor: f64,
}

const MODEL_FORMAT: &str = "flowct-mlp-v1";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn state_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

pub fn save_model(path: impl AsRef<Path>, model: &NeuralVelocity) -> Result<()> {
    let path = path.as_ref();
    let params = model.params();
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        image_pixels: model.image_pixels(),
        time_embed_dim: model.embed_dim(),
        activation: "silu".into(),
        layers: params
            .layers
            .iter()
            .map(|l| [l.inputs(), l.outputs()])
            .collect(),
        t_floor: T_FLOOR,
    };
    let mut w = create(path)?;
    for (dims, values) in params.tensors() {
        write_tensor(&mut w, &dims, values, path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

fn expect_tensor(r: &mut impl Read, path: &Path, dims: &[usize]) -> Result<Vec<f64>> {
    match read_tensor(r, path)? {
        Some((got, values)) if got == dims => Ok(values),
        Some((got, _)) => Err(Error::ShapeMismatch(format!(
            "{}: tensor dims {got:?}, header expects {dims:?}",
            path.display()
        ))),
        None => Err(Error::ShapeMismatch(format!(
            "{}: fewer tensors than the header lists",
            path.display()
        ))),
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NeuralVelocity> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: ModelHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if header.format != MODEL_FORMAT {
        return Err(Error::format(
            &side,
            format!("unknown model format {:?}", header.format),
        ));
    }
    if header.activation != "silu" {
        return Err(Error::format(
            &side,
            format!("unsupported activation {:?}", header.activation),
        ));
    }
    if header.layers.is_empty() {
        return Err(Error::ShapeMismatch("no layers".into()));
    }
    if header.t_floor != T_FLOOR {
        return Err(Error::format(
            &side,
            format!("t_floor {} unsupported, expected {T_FLOOR}", header.t_floor),
        ));
    }

    let mut r = open(path)?;
    let mut read_dense = |[i, o]: [usize; 2]| -> Result<Dense> {
        let w = expect_tensor(&mut r, path, &[i, o])?;
        let b = expect_tensor(&mut r, path, &[o])?;
        Ok(Dense {
            weight: Array2::from_shape_vec((i, o), w).expect("checked dims"),
            bias: Array1::from(b),
        })
    };
    let layers = header
        .layers
        .iter()
        .map(|&shape| read_dense(shape))
        .collect::<Result<Vec<_>>>()?;
    if read_tensor(&mut r, path)?.is_some() {
        return Err(Error::ShapeMismatch(format!(
            "{}: more tensors than the header lists",
            path.display()
        )));
    }
    NeuralVelocity::from_params(
        header.image_pixels,
        header.time_embed_dim,
        Params { layers },
    )
}

/// Writes full-precision parameters and optimizer moments.
pub fn save_train_state(path: impl AsRef<Path>, model: &NeuralVelocity, opt: &Adam) -> Result<()> {
    let path = path.as_ref();
    let flat = model.params().to_flat();
    if opt.m.len() != flat.len() {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match the model".into(),
        ));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(STATE_MAGIC).map_err(io)?;
    w.write_all(&opt.step.to_le_bytes()).map_err(io)?;
    w.write_all(&(flat.len() as u64).to_le_bytes())
        .map_err(io)?;
    for v in [&opt.learning_rate, &opt.beta1, &opt.beta2, &opt.eps] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for block in [&flat, &opt.m, &opt.v] {
        for v in block.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Restores parameters into `model` (architecture must match) and returns
/// the optimizer.
pub fn load_train_state(path: impl AsRef<Path>, model: &mut NeuralVelocity) -> Result<Adam> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path, "truncated header")?;
    if &magic != STATE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
        read_exact_or(r, &mut word, path, "payload length mismatch")?;
        Ok(word)
    };
    let step = u64::from_le_bytes(next(&mut r)?);
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    if n != model.params().len() {
        return Err(Error::ShapeMismatch(format!(
            "state holds {n} parameters, model has {}",
            model.params().len()
        )));
    }
    let mut hyper = [0.0; 4];
    for h in &mut hyper {
        *h = f64::from_le_bytes(next(&mut r)?);
    }
    let mut blocks = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for block in &mut blocks {
        for v in block.iter_mut() {
            *v = f64::from_le_bytes(next(&mut r)?);
        }
    }
    let [flat, m, v] = blocks;
    model.params_mut().assign_flat(&flat)?;
    Ok(Adam {
        learning_rate: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        step,
        m,
        v,
    })
}

/// 8-bit binary PGM with linear windowing; values outside `window` clip.
pub fn export_pgm(img: &Image, path: impl AsRef<Path>, window: (f64, f64)) -> Result<()> {
    let (lo, hi) = window;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "window low ({lo}) must be below high ({hi})"
        )));
    }
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "P5\n{} {}\n255\n", img.width(), img.height()).map_err(io)?;
    let bytes: Vec<u8> = img
        .values()
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

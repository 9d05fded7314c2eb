//! On-disk formats: the `IDF1` field container, PNG export with a fixed
//! value mapping, and the `IDCK` checkpoint holding named parameter tensors,
//! optimizer moments, and an embedded run description.
//!
//! Numeric payloads are stored as little-endian `f32`; loading widens back
//! to `f64`, so a save/load round trip is a single, idempotent truncation.

use crate::error::{Error, Result};
use crate::field::{Field, RegularGrid};
use crate::grad::{ParamSet, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const FIELD_MAGIC: &[u8; 4] = b"IDF1";
const CKPT_MAGIC: &[u8; 4] = b"IDCK";
const CKPT_VERSION: u32 = 1;
/// Name prefix of the zero-size tensor that carries `key=value` run
/// description lines inside a checkpoint.
const META_PREFIX: &str = "_meta.cfg:";

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write a field: header, grid dims or explicit coordinates, then values.
pub fn save_field(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    write_u32(&mut w, field.ndim())?;
    write_u32(&mut w, field.channels())?;
    write_u32(&mut w, field.num_points())?;
    match field.grid() {
        Some(grid) => {
            write_u32(&mut w, 1)?;
            for d in grid.dims() {
                write_u32(&mut w, *d)?;
            }
        }
        None => {
            write_u32(&mut w, 0)?;
            write_f32s(&mut w, field.coords())?;
        }
    }
    write_f32s(&mut w, field.values())?;
    w.flush()?;
    Ok(())
}

/// Read a field written by [`save_field`].
pub fn load_field(path: impl AsRef<Path>) -> Result<Field> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Format(format!("bad field magic {magic:?}, expected {FIELD_MAGIC:?}")));
    }
    let ndim = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let m = read_u32(&mut r)? as usize;
    let grid_flag = read_u32(&mut r)?;
    match grid_flag {
        1 => {
            let dims: Vec<usize> = (0..ndim).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
            let grid = RegularGrid::new(&dims)?;
            if grid.num_points() != m {
                return Err(Error::Format(format!("grid {dims:?} holds {} points, header says {m}", grid.num_points())));
            }
            let values = read_f32s(&mut r, m * channels)?;
            Field::on_grid(grid, values, channels)
        }
        0 => {
            let coords = read_f32s(&mut r, m * ndim)?;
            let values = read_f32s(&mut r, m * channels)?;
            Field::scattered(coords, ndim, values, channels)
        }
        other => Err(Error::Format(format!("grid flag must be 0 or 1, got {other}"))),
    }
}

/// Byte for a field value: `[-1, 1]` maps linearly onto `[0, 255]`.
pub fn value_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Field value for a byte; inverse of [`value_to_byte`] up to quantization.
pub fn byte_to_value(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Export a 2-d grid field with 1 (grayscale) or 3 (RGB) channels.
pub fn save_png(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    let grid = field.grid().ok_or(Error::NotOnGrid)?;
    if field.ndim() != 2 {
        return Err(Error::invalid("png export needs a 2-d grid field"));
    }
    let (h, w) = (grid.dims()[0] as u32, grid.dims()[1] as u32);
    let bytes: Vec<u8> = field.values().iter().map(|v| value_to_byte(*v)).collect();
    match field.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .ok_or_else(|| Error::Format("pixel buffer size mismatch".into()))?
            .save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes)
            .ok_or_else(|| Error::Format("pixel buffer size mismatch".into()))?
            .save(path)?,
        d => return Err(Error::invalid(format!("png export supports 1 or 3 channels, got {d}"))),
    }
    Ok(())
}

/// Import a PNG as a 2-d grid field with values in `[-1, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Field> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grid = RegularGrid::new(&[h, w])?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let values = g.into_raw().into_iter().map(byte_to_value).collect();
            Field::on_grid(grid, values, 1)
        }
        other => {
            let rgb = other.into_rgb8();
            let values = rgb.into_raw().into_iter().map(byte_to_value).collect();
            Field::on_grid(grid, values, 3)
        }
    }
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len())?;
    for d in t.shape() {
        write_u32(w, *d)?;
    }
    write_f32s(w, t.data())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf).map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
    let rank = read_u32(r)? as usize;
    let shape: Vec<usize> = (0..rank).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
    let data = read_f32s(r, shape.iter().product())?;
    Ok((name, Tensor::new(&shape, data)?))
}

/// A loaded checkpoint: parameters, the embedded run description, and
/// optimizer moments when the run was saved mid-training.
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: Vec<(String, String)>,
    /// `(step_count, first_moments, second_moments)` in parameter order.
    pub optimizer: Option<(u64, Vec<Tensor>, Vec<Tensor>)>,
}

fn encode_meta(meta: &[(String, String)]) -> String {
    let body: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{META_PREFIX}{}", body.join("\n"))
}

fn decode_meta(name: &str) -> Result<Vec<(String, String)>> {
    let body = &name[META_PREFIX.len()..];
    body.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("malformed run description line '{line}'")))
        })
        .collect()
}

/// Save parameters with an embedded run description and, optionally, Adam
/// moments (`step count, m, v` aligned with the parameters).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamSet,
    meta: &[(String, String)],
    optimizer: Option<(u64, &[Tensor], &[Tensor])>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION as usize)?;
    write_u32(&mut w, params.len() + 1)?;
    // The run description rides along as a zero-size tensor whose name holds
    // the key=value lines; f64 values survive exactly via Display.
    write_tensor(&mut w, &encode_meta(meta), &Tensor::new(&[0], Vec::new())?)?;
    for (name, t) in params.iter() {
        write_tensor(&mut w, name, t)?;
    }
    match optimizer {
        Some((t, m, v)) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::shape(
                    "save_checkpoint",
                    format!("{} moment pairs for {} parameters", m.len().min(v.len()), params.len()),
                ));
            }
            write_u32(&mut w, 1)?;
            w.write_all(&t.to_le_bytes())?;
            for (i, (mt, vt)) in m.iter().zip(v).enumerate() {
                write_tensor(&mut w, &format!("{}.m", params.name(i)), mt)?;
                write_tensor(&mut w, &format!("{}.v", params.name(i)), vt)?;
            }
        }
        None => write_u32(&mut w, 0)?,
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected {CKPT_MAGIC:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    let mut meta = Vec::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if let Some(_stripped) = name.strip_prefix(META_PREFIX) {
            meta = decode_meta(&name)?;
        } else {
            params.push(name, t);
        }
    }
    let optimizer = match read_u32(&mut r)? {
        0 => None,
        1 => {
            let t = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for i in 0..params.len() {
                let (mn, mt) = read_tensor(&mut r)?;
                let (vn, vt) = read_tensor(&mut r)?;
                let base = params.name(i);
                if mn != format!("{base}.m") || vn != format!("{base}.v") {
                    return Err(Error::Format(format!("moment tensors for '{base}' are misnamed ({mn}, {vn})")));
                }
                m.push(mt);
                v.push(vt);
            }
            Some((t, m, v))
        }
        other => return Err(Error::Format(format!("optimizer flag must be 0 or 1, got {other}"))),
    };
    Ok(Checkpoint { params, meta, optimizer })
}

/// Fetch a run-description value by key.
pub fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

//! File formats: raw tensors (`UFT0`), checkpoints (`UFLD`), corpus files and
//! PPM image dumps.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::codec::ToyImage;
use crate::data::{Color, Example, Position, SceneSpec, Shape, Size, Split};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"UFT0";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UFLD";
/// Checkpoint version with an f32 payload.
pub const VERSION_F32: u32 = 1;
/// Same layout with an f64 payload, written in 64-bit mode.
pub const VERSION_F64: u32 = 2;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt_err("tensor size overflows"))
}

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| T::of(x as f64)).collect())
    }
}

fn write_shape<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len()).map_err(|_| fmt_err("rank above 255"))?;
    w.write_all(&[rank])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| fmt_err("dimension above u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_shape<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let [rank] = read_exact::<_, 1>(r)?;
    (0..rank).map(|_| Ok(read_u32(r)? as usize)).collect()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &RawTensor) -> Result<()> {
    if numel(&t.shape)? != t.data.len() {
        return Err(fmt_err(format!("shape {:?} does not hold {} values", t.shape, t.data.len())));
    }
    w.write_all(TENSOR_MAGIC)?;
    write_shape(w, &t.shape)?;
    let mut buf = Vec::with_capacity(4 * t.data.len());
    for x in &t.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<RawTensor> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt_err(format!("bad tensor magic {magic:?}")));
    }
    let shape = read_shape(r)?;
    let n = numel(&shape)?;
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawTensor { shape, data })
}

pub fn image_to_raw(img: &ToyImage) -> RawTensor {
    RawTensor {
        shape: vec![img.height, img.width, 3],
        data: img.pixels.iter().map(|&x| x as f32).collect(),
    }
}

pub fn raw_to_image(t: &RawTensor) -> Result<ToyImage> {
    match t.shape[..] {
        [h, w, 3] => ToyImage::from_pixels(h, w, t.data.iter().map(|&x| x as f64).collect()),
        _ => Err(fmt_err(format!("image tensor must be [h, w, 3], got {:?}", t.shape))),
    }
}

/// Binary PPM (P6, maxval 255); values are clamped to `[0, 1]` and rounded.
pub fn write_ppm<W: Write>(w: &mut W, img: &ToyImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.pixels.iter().map(|&x| (255.0 * x.clamp(0.0, 1.0)).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let [b] = read_exact::<_, 1>(r)?;
        match b {
            b'#' if tok.is_empty() => {
                let mut line = String::new();
                r.read_line(&mut line)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            b => tok.push(b as char),
        }
    }
}

pub fn read_ppm<R: Read>(r: R) -> Result<ToyImage> {
    let mut r = BufReader::new(r);
    if ppm_token(&mut r)? != "P6" {
        return Err(fmt_err("not a binary PPM (P6)"));
    }
    let mut num = || -> Result<usize> {
        let t = ppm_token(&mut r)?;
        t.parse().map_err(|_| fmt_err(format!("bad PPM header field `{t}`")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(fmt_err(format!("unsupported PPM maxval {max}")));
    }
    let mut buf = vec![0u8; w * h * 3];
    r.read_exact(&mut buf)?;
    ToyImage::from_pixels(h, w, buf.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn save_ppm(path: &Path, img: &ToyImage) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(&mut buf, img)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads an image from a PPM file, or from a `UFT0` tensor file.
pub fn load_image(path: &Path) -> Result<ToyImage> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        raw_to_image(&read_tensor(&mut &bytes[..])?)
    } else {
        read_ppm(&bytes[..])
    }
}

/// Writes one record line (`shape=… color=… position=… size=… split=…`)
/// and one image tensor per example.
pub fn write_corpus<W: Write>(w: &mut W, examples: &[Example]) -> Result<()> {
    for e in examples {
        writeln!(w, "{} split={}", e.spec.to_record_line(), e.split.word())?;
        write_tensor(w, &image_to_raw(&e.image))?;
    }
    Ok(())
}

fn parse_record(line: &str) -> Result<(SceneSpec, Split)> {
    let bad = || fmt_err(format!("bad corpus record `{line}`"));
    let (mut shape, mut color, mut position, mut size, mut split) = (None, None, None, None, None);
    for kv in line.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(bad)?;
        match k {
            "shape" => shape = Shape::from_word(v),
            "color" => color = Color::from_word(v),
            "position" => position = Position::from_word(v),
            "size" => size = Size::from_word(v),
            "split" => {
                split = match v {
                    "train" => Some(Split::Train),
                    "heldout" => Some(Split::Heldout),
                    _ => None,
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok((
        SceneSpec {
            shape: shape.ok_or_else(bad)?,
            color: color.ok_or_else(bad)?,
            position: position.ok_or_else(bad)?,
            size: size.ok_or_else(bad)?,
        },
        split.ok_or_else(bad)?,
    ))
}

pub fn read_corpus<R: Read>(r: R) -> Result<Vec<Example>> {
    let mut r = BufReader::new(r);
    let mut out = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Ok(out);
        }
        let (spec, split) = parse_record(line.trim_end())?;
        let img = raw_to_image(&read_tensor(&mut r)?)?;
        out.push(Example::new(spec, img, split));
    }
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// The run configuration text, stored verbatim.
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| fmt_err(format!("checkpoint has no tensor `{name}`")))
    }

    /// Serializes with an f32 payload, or f64 when `wide`.
    pub fn to_bytes(&self, wide: bool) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&(if wide { VERSION_F64 } else { VERSION_F32 }).to_le_bytes());
        let cfg = self.config.as_bytes();
        if !self.config.is_ascii() {
            return Err(fmt_err("config blob must be ASCII"));
        }
        b.extend_from_slice(&u32::try_from(cfg.len()).map_err(|_| fmt_err("config too long"))?.to_le_bytes());
        b.extend_from_slice(cfg);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            b.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| fmt_err("tensor name too long"))?.to_le_bytes());
            b.extend_from_slice(nb);
            write_shape(&mut b, &t.shape)?;
            for x in &t.data {
                if wide {
                    b.extend_from_slice(&x.as_f64().to_le_bytes());
                } else {
                    b.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(fmt_err("checkpoint truncated"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = payload;
        let magic: [u8; 4] = read_exact(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt_err(format!("bad checkpoint magic {magic:?}")));
        }
        let wide = match read_u32(&mut r)? {
            VERSION_F32 => false,
            VERSION_F64 => true,
            v => return Err(fmt_err(format!("unsupported checkpoint version {v}"))),
        };
        let n = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; n];
        r.read_exact(&mut cfg)?;
        let config = String::from_utf8(cfg).map_err(|_| fmt_err("config blob is not ASCII"))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
            let shape = read_shape(&mut r)?;
            let n = numel(&shape)?;
            let width = if wide { 8 } else { 4 };
            if r.len() < n * width {
                return Err(fmt_err(format!("tensor `{name}` truncated")));
            }
            let (data, rest) = r.split_at(n * width);
            r = rest;
            let data = if wide {
                data.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect()
            } else {
                data.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            };
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        if !r.is_empty() {
            return Err(fmt_err("trailing bytes after tensors"));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path, wide: bool) -> Result<u32> {
        let bytes = self.to_bytes(wide)?;
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(crc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// The CRC stored at the end of a checkpoint file.
pub fn checkpoint_crc(path: &Path) -> Result<u32> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(fmt_err("checkpoint truncated"));
    }
    Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()))
}

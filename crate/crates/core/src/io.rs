//! PNG ingestion/export and the binary model format.
//!
//! Model layout, all little-endian:
//!
//! ```text
//! magic "LIG1" | version u32 = 1 | full_w u32 | full_h u32 | channels u8 | level_count u8
//! per level:  render_w u32 | render_h u32 | n u64
//!             positions 2n × f32 | covariances (a, b, c) 3n × f32 | colors C·n × f32
//! res_min f32 | res_max f32
//! ```
//!
//! Two-level files store the coarse level first. Single-level files carry
//! `level_count = 1` with `res_min = 0`, `res_max = 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{CovUT, GaussianCloud};
use crate::pipeline::{Level, LogModel};
use crate::plane::ImagePlane;

pub const MAGIC: [u8; 4] = *b"LIG1";
pub const VERSION: u32 = 1;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Reads an 8-bit grayscale or RGB PNG into `[0, 1]` samples (`v / 255`).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_png(&bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImagePlane<f32>> {
    let corrupt = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::CorruptImage(io.to_string()),
        other => Error::CorruptImage(other.to_string()),
    };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let info = reader.info();
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedColorType(format!("{other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(info.bit_depth as u8));
    }
    if info.trns.is_some() {
        return Err(Error::UnsupportedColorType("transparency chunk".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or(Error::LengthOverflow("png frame"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(corrupt)?;
    let line = frame.line_size;
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(line).take(h) {
        data.extend(row[..w * channels].iter().map(|&v| v as f32 / 255.0));
    }
    ImagePlane::from_vec(w, h, channels, data)
}

/// `round(clamp(v, 0, 1) · 255)` with halves rounded up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v as f64 * 255.0 + 0.5).floor() as u8
}

pub fn encode_png(img: &ImagePlane<f32>) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::UnsupportedColorType(format!(
                "{c}-channel image cannot be written as PNG"
            )))
        }
    };
    if !img.is_finite() {
        return Err(Error::NonFiniteInput("image to save"));
    }
    let w = u32::try_from(img.width()).map_err(|_| Error::LengthOverflow("png width"))?;
    let h = u32::try_from(img.height()).map_err(|_| Error::LengthOverflow("png height"))?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let bytes: Vec<u8> = img.as_slice().iter().map(|&v| quantize(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

/// Clamps to `[0, 1]`, quantizes to 8 bits, writes a PNG.
pub fn save_image(img: &ImagePlane<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::LengthOverflow(what))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vals: impl Iterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &LogModel) -> Result<Vec<u8>> {
    model.validate()?;
    let channels =
        u8::try_from(model.channels).map_err(|_| Error::LengthOverflow("channel count"))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.full_w, "image width")?;
    put_u32(&mut out, model.full_h, "image height")?;
    out.push(channels);
    out.push(model.levels().count() as u8);
    for level in model.levels() {
        let cloud = &level.cloud;
        put_u32(&mut out, level.width, "level width")?;
        put_u32(&mut out, level.height, "level height")?;
        out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
        put_f32s(&mut out, cloud.mu().iter().flatten().copied());
        put_f32s(&mut out, cloud.cov().iter().flat_map(|k| [k.a, k.b, k.c]));
        put_f32s(&mut out, cloud.color().iter().copied());
    }
    put_f32s(&mut out, [model.res_min, model.res_max].into_iter());
    Ok(out)
}

/// Bounds-checked little-endian cursor. Never allocates from a declared size
/// before confirming the bytes exist.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                needed: (self.pos as u64).saturating_add(n as u64),
                available: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or(Error::LengthOverflow("f32 array"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_level(r: &mut Reader<'_>, channels: usize) -> Result<Level> {
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let n = r.u64()?;
    let n = usize::try_from(n).map_err(|_| Error::LengthOverflow("point count"))?;
    let per_point = (5 + channels) * 4;
    let need = n
        .checked_mul(per_point)
        .ok_or(Error::LengthOverflow("level payload"))?;
    if need > r.remaining() {
        return Err(Error::Truncated {
            needed: (r.pos as u64).saturating_add(need as u64),
            available: r.buf.len() as u64,
        });
    }
    let mu: Vec<[f32; 2]> = r.f32s(2 * n)?.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
    let cov: Vec<CovUT<f32>> = r
        .f32s(3 * n)?
        .chunks_exact(3)
        .map(|k| CovUT::new(k[0], k[1], k[2]))
        .collect();
    let color = r.f32s(channels * n)?;
    Ok(Level {
        width,
        height,
        cloud: GaussianCloud::from_parts(channels, mu, cov, color)?,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<LogModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let full_w = r.u32()? as usize;
    let full_h = r.u32()? as usize;
    let channels = r.u8()? as usize;
    if channels == 0 {
        return Err(Error::InvalidModel("zero channels".into()));
    }
    let level_count = r.u8()?;
    let mut levels = match level_count {
        1 | 2 => Vec::with_capacity(level_count as usize),
        k => return Err(Error::InvalidModel(format!("level count {k} (expected 1 or 2)"))),
    };
    for _ in 0..level_count {
        levels.push(read_level(&mut r, channels)?);
    }
    let bounds = r.f32s(2)?;
    if r.remaining() != 0 {
        return Err(Error::InvalidModel(format!(
            "{} trailing bytes after payload",
            r.remaining()
        )));
    }
    let fine = levels.pop().expect("at least one level");
    let model = LogModel {
        full_w,
        full_h,
        channels,
        coarse: levels.pop(),
        fine,
        res_min: bounds[0],
        res_max: bounds[1],
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &LogModel, path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let bytes = encode_model(model)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LogModel> {
    use std::io::Read;
    let mut bytes = Vec::new();
    BufReader::new(open(path.as_ref())?).read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian2D;

    fn tiny_model(two_levels: bool) -> LogModel {
        let mut fine = GaussianCloud::new(3);
        for i in 0..5 {
            let f = i as f32;
            fine.push(Gaussian2D::new(
                [f * 1.5, 2.0 - f],
                CovUT::new(1.0 + f, -0.25 * f, 2.0),
                vec![0.1 * f, -3.0, f32::MIN_POSITIVE],
            ))
            .unwrap();
        }
        let coarse = two_levels.then(|| Level {
            width: 3,
            height: 2,
            cloud: fine.clone(),
        });
        LogModel {
            full_w: 10,
            full_h: 7,
            channels: 3,
            coarse,
            fine: Level {
                width: 10,
                height: 7,
                cloud: fine,
            },
            res_min: if two_levels { -0.125 } else { 0.0 },
            res_max: if two_levels { 0.75 } else { 1.0 },
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        for two in [false, true] {
            let m = tiny_model(two);
            let bytes = encode_model(&m).unwrap();
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back).unwrap(), bytes);
            assert_eq!(bytes[17], if two { 2 } else { 1 });
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_model(&tiny_model(true)).unwrap();
        assert_eq!(&bytes[0..4], b"LIG1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 7);
        assert_eq!(bytes[16], 3);
        // per level 16 header bytes + 5 points × 8 floats × 4 bytes; then two bounds
        assert_eq!(bytes.len(), 18 + 2 * (16 + 5 * 8 * 4) + 8);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode_model(&tiny_model(false)).unwrap();
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));
        bytes[4] = 9;
        assert!(matches!(decode_model(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn huge_declared_count_is_truncation_not_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LIG1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.push(3);
        bytes.push(1);
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&1_000_000_000u64.to_le_bytes());
        bytes.resize(100, 0);
        assert!(matches!(decode_model(&bytes), Err(Error::Truncated { .. })));

        let mut overflow = bytes[..38].to_vec();
        overflow[30..38].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            decode_model(&overflow),
            Err(Error::LengthOverflow(_)) | Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn rejects_trailing_bytes_and_bad_level_count() {
        let mut bytes = encode_model(&tiny_model(false)).unwrap();
        bytes.push(0);
        assert!(matches!(decode_model(&bytes), Err(Error::InvalidModel(_))));
        let mut bytes = encode_model(&tiny_model(false)).unwrap();
        bytes[17] = 3;
        assert!(matches!(decode_model(&bytes), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn png_round_trip_within_half_step() {
        let img = ImagePlane::<f32>::from_fn(7, 5, 3, |x, y, c| ((x * 37 + y * 11 + c * 5) % 101) as f32 / 100.0);
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn png_pixel_scaling() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[255, 0, 128]).unwrap();
        }
        let img = decode_png(&out).unwrap();
        assert_eq!(img.pixel(0, 0), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn png_rejects_16_bit_and_alpha() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[1, 2]).unwrap();
        }
        assert!(matches!(decode_png(&out), Err(Error::UnsupportedBitDepth(16))));

        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[1, 2, 3, 4]).unwrap();
        }
        assert!(matches!(decode_png(&out), Err(Error::UnsupportedColorType(_))));
    }

    #[test]
    fn png_corrupt_and_missing() {
        assert!(matches!(decode_png(b"not a png at all"), Err(Error::CorruptImage(_))));
        let mut good = encode_png(&ImagePlane::filled(4, 4, 1, 0.5)).unwrap();
        good.truncate(good.len() - 20);
        assert!(matches!(decode_png(&good), Err(Error::CorruptImage(_))));
        assert!(matches!(
            load_image("/definitely/not/here.png"),
            Err(Error::FileNotFound(_))
        ));
    }
}

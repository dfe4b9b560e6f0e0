use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{s, Scalar, Tensor};
use crate::util::write_atomic;

fn header_hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .take(32)
        .map(|b| format!("{b:02x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Decodes an 8-bit PNG, PPM or PGM into a `(1, C, H, W)` tensor in
/// `[0, 1]`, with `C` = 3 for colour and 1 for grey. Alpha is dropped.
pub fn decode_image<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |what: String| Error::Format(format!("{what} (header bytes: {})", header_hex(bytes)));
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| bad(format!("cannot read image: {e}")))?;
    if reader.format().is_none() {
        return Err(bad("unrecognised image format".into()));
    }
    let img = reader.decode().map_err(|e| bad(format!("cannot decode image: {e}")))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img.color() {
        ColorType::L8 | ColorType::La8 => (1, img.into_luma8().into_raw()),
        ColorType::Rgb8 | ColorType::Rgba8 => (3, img.into_rgb8().into_raw()),
        other => {
            return Err(bad(format!(
                "unsupported pixel format {other:?}; only 8-bit grey or RGB is accepted"
            )))
        }
    };
    if width == 0 || height == 0 {
        return Err(bad("empty image".into()));
    }
    Ok(Tensor::from_fn([1, channels, height, width], |_, c, y, x| {
        s::<T>(raw[(y * width + x) * channels + c] as f64 / 255.0)
    }))
}

pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Output container for [`encode_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    /// Binary PPM (colour) or PGM (grey), chosen by channel count.
    Pnm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "png" => Ok(ImageFormat::Png),
            "ppm" | "pgm" | "pnm" => Ok(ImageFormat::Pnm),
            _ => Err(param_err!(
                "cannot infer image format from `{}` (use .png, .ppm or .pgm)",
                path.display()
            )),
        }
    }
}

/// Quantises a `(1, C, H, W)` tensor (C = 1 or 3) to 8 bits: clamp to
/// `[0, 1]`, scale by 255, round half up.
pub fn to_rgb8<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.shape();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(shape_err!("can only export (1, 1|3, H, W) images, got {:?}", t.shape()));
    }
    let mut out = vec![0u8; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.at(0, ci, y, x).to_f64_lossy();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out[(y * w + x) * c + ci] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
    }
    Ok(out)
}

pub fn encode_image<T: Scalar>(t: &Tensor<T>, format: ImageFormat) -> Result<Vec<u8>> {
    let raw = to_rgb8(t)?;
    let [_, c, h, w] = t.shape();
    let colour = if c == 3 {
        ExtendedColorType::Rgb8
    } else {
        ExtendedColorType::L8
    };
    let mut buf = Vec::new();
    let res = match format {
        ImageFormat::Png => PngEncoder::new(&mut buf).write_image(&raw, w as u32, h as u32, colour),
        ImageFormat::Pnm => {
            let subtype = if c == 3 {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            };
            PnmEncoder::new(&mut buf)
                .with_subtype(subtype)
                .write_image(&raw, w as u32, h as u32, colour)
        }
    };
    res.map_err(|e| Error::Format(format!("cannot encode image: {e}")))?;
    Ok(buf)
}

/// Writes the image atomically; the container follows the extension.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(t, ImageFormat::from_path(path)?)?;
    write_atomic(path, &bytes)
}

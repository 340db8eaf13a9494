//! Planar floating-point images on the 0..255 scale, plus 8-bit PGM/PPM and
//! PNG codecs.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image: {0}")]
    Format(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("image shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Channel-planar image (`data[c][y][x]`) with values on the 0..255 scale.
/// Values are not clipped until an 8-bit export.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ImageError::Shape(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(ImageError::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Same geometry, new values.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn clipped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 255.0))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(ImageError::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Image::new(self.channels, height, width, data)
    }

    /// Converts between 1 and 3 channels. RGB to gray uses BT.601 luma
    /// weights; gray to RGB replicates the plane.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = (0..self.pixels()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
                Image::new(1, self.height, self.width, data)
            }
            (1, 3) => Image::new(3, self.height, self.width, self.data.repeat(3)),
            (a, b) => Err(ImageError::Unsupported(format!("{a} to {b} channel conversion"))),
        }
    }

    /// `[1, C, H, W]` tensor in model scale (value / 255).
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|&v| v / 255.0).collect();
        Tensor::new(vec![1, self.channels, self.height, self.width], data).expect("consistent shape")
    }

    /// Batch item `index` of a `[N, C, H, W]` model-scale tensor, rescaled to 0..255.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Image> {
        let &[n, c, h, w] = t.shape() else {
            return Err(ImageError::Shape(format!("expected [N, C, H, W], got {:?}", t.shape())));
        };
        if index >= n {
            return Err(ImageError::Shape(format!("batch index {index} out of {n}")));
        }
        let per = c * h * w;
        let data = t.data()[index * per..(index + 1) * per].iter().map(|&v| v * 255.0).collect();
        Image::new(c, h, w, data)
    }

    /// Interleaved 8-bit samples, clipped and rounded.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let n = self.pixels();
        let mut out = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                out.push(quantize_u8(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_u8_interleaved(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != channels * height * width {
            return Err(ImageError::Shape(format!("{} bytes for {channels}x{height}x{width}", bytes.len())));
        }
        let n = height * width;
        let mut data = vec![0.0; channels * n];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = bytes[i * channels + c] as f32;
            }
        }
        Image::new(channels, height, width, data)
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Encoded image container formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// Binary PGM (P5) or PPM (P6).
    Pnm,
    Png,
}

impl Format {
    pub fn sniff(bytes: &[u8]) -> Option<Format> {
        match bytes {
            [0x89, b'P', b'N', b'G', ..] => Some(Format::Png),
            [b'P', b'2' | b'3' | b'5' | b'6', ..] => Some(Format::Pnm),
            _ => None,
        }
    }

    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(Format::Png),
            "pgm" | "ppm" | "pnm" => Some(Format::Pnm),
            _ => None,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    match Format::sniff(bytes) {
        Some(Format::Pnm) => decode_pnm(bytes),
        Some(Format::Png) => decode_png(bytes),
        None => Err(ImageError::Unsupported("unrecognised image signature".into())),
    }
}

pub fn encode(image: &Image, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Pnm => encode_pnm(image),
        Format::Png => encode_png(image),
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    decode(&std::fs::read(path)?)
}

/// Writes in the format implied by the extension (PGM/PPM when unknown).
pub fn save(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = Format::from_path(path).unwrap_or(Format::Pnm);
    std::fs::write(path, encode(image, format)?)?;
    Ok(())
}

/// Header tokens of a netpbm file, skipping `#` comments. Returns the tokens
/// and the offset just past the single whitespace byte after the last one.
fn pnm_header(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(ImageError::Format("truncated netpbm header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let (tokens, offset) = pnm_header(bytes, 4)?;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Format(format!("bad header field {s:?}")));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if width == 0 || height == 0 {
        return Err(ImageError::Format("zero-sized netpbm image".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval}; only 8-bit netpbm is supported")));
    }
    let (channels, binary) = match tokens[0].as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        m => return Err(ImageError::Unsupported(format!("netpbm variant {m}"))),
    };
    let count = width * height * channels;
    let samples: Vec<u8> = if binary {
        let raster =
            bytes.get(offset..offset + count).ok_or_else(|| ImageError::Format("truncated netpbm raster".into()))?;
        raster.to_vec()
    } else {
        let text = String::from_utf8_lossy(bytes.get(offset.saturating_sub(1)..).unwrap_or_default()).into_owned();
        let values: Vec<u8> = text
            .split_ascii_whitespace()
            .take(count)
            .map(|s| s.parse::<u8>().map_err(|_| ImageError::Format(format!("bad sample {s:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(ImageError::Format("truncated netpbm raster".into()));
        }
        values
    };
    let mut image = Image::from_u8_interleaved(channels, height, width, &samples)?;
    if maxval != 255 {
        let scale = 255.0 / maxval as f32;
        image = image.map(|v| v * scale);
    }
    Ok(image)
}

/// Binary PGM for one channel, PPM for three.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(ImageError::Unsupported(format!("{c}-channel netpbm"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_u8_interleaved());
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Format(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => {
            Image::from_u8_interleaved(1, h, w, decoded.to_luma8().as_raw())
        }
        _ => Image::from_u8_interleaved(3, h, w, decoded.to_rgb8().as_raw()),
    }
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let color = match image.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(ImageError::Unsupported(format!("{c}-channel png"))),
    };
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        &image.to_u8_interleaved(),
        image.width as u32,
        image.height as u32,
        color,
    )
    .map_err(|e| ImageError::Format(e.to_string()))?;
    Ok(out)
}

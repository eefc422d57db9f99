//! Planar float images in `[0, 1]`, PGM/PPM/PNG input and output, and
//! homography warping.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::tensor::{Real, Tensor};

/// Channel-major image with one or three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if data.len() != channels * width * height {
            return Err(Error::Dimension {
                op: "image",
                axis: "pixel count",
                expected: channels * width * height,
                found: data.len(),
            });
        }
        Ok(Image {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * width * height);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Image {
            channels,
            width,
            height,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Luma (Rec. 601 weights) or the single channel.
    pub fn gray(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..r.len())
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    }

    /// Three channels, replicating a grayscale plane.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            channels: 3,
            width: self.width,
            height: self.height,
            data: self.data.repeat(3),
        }
    }

    /// `3 x H x W` network input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let rgb = self.to_rgb();
        let data = rgb.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new([3, self.height, self.width], data).expect("consistent shape")
    }

    /// Grows the image to the next multiple of `multiple` on the right and
    /// bottom by replicating edge pixels.
    pub fn pad_to_multiple(&self, multiple: usize) -> Image {
        let w = self.width.div_ceil(multiple).max(1) * multiple;
        let h = self.height.div_ceil(multiple).max(1) * multiple;
        Image::from_fn(self.channels, w, h, |c, x, y| {
            self.get(c, x.min(self.width - 1), y.min(self.height - 1))
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Image(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(self.channels, width, height, |c, x, y| {
            self.get(c, x0 + x, y0 + y)
        }))
    }

    /// Bilinear value at `(x, y)`; `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let v = |xx, yy| self.get(c, xx, yy) as f64;
        let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
        let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
        Some((top * (1.0 - fy) + bottom * fy) as f32)
    }

    /// Output pixel `q` takes the source value at `to_source(q)`; pixels
    /// mapping outside the source are `fill`.
    pub fn warp(&self, to_source: &Homography, width: usize, height: usize, fill: f32) -> Image {
        let mut src = vec![None; width * height];
        for (i, s) in src.iter_mut().enumerate() {
            *s = to_source.warp_point(((i % width) as f64, (i / width) as f64)).ok();
        }
        Image::from_fn(self.channels, width, height, |c, x, y| {
            src[y * width + x]
                .and_then(|(sx, sy)| self.sample(c, sx, sy))
                .unwrap_or(fill)
        })
    }

    /// 8-bit samples, rounded and clamped.
    fn quantized(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..n {
            for c in 0..self.channels {
                out.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    fn from_interleaved(
        channels: usize,
        width: usize,
        height: usize,
        bytes: &[u8],
        max: f32,
        wide: bool,
    ) -> Result<Image> {
        let step = if wide { 2 } else { 1 };
        let expected = channels * width * height * step;
        if bytes.len() < expected {
            return Err(Error::Truncated(format!(
                "pixel data: {} of {expected} bytes",
                bytes.len()
            )));
        }
        let value = |i: usize| -> f32 {
            if wide {
                u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f32 / max
            } else {
                bytes[i] as f32 / max
            }
        };
        Ok(Image::from_fn(channels, width, height, |c, x, y| {
            value((y * width + x) * channels + c)
        }))
    }
}

/// Reads a PGM/PPM (binary or ASCII) or PNG file.
pub fn load_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.first() == Some(&b'P') {
        decode_netpbm(&bytes)
    } else {
        Err(Error::Image(format!("{}: unrecognised image format", path.display())))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let err = |e: png::DecodingError| Error::Image(format!("png: {e}"));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Image("png: unexpanded palette".into())),
    };
    let line = info.line_size;
    Ok(Image::from_fn(channels, w, h, |c, x, y| {
        buf[y * line + x * stride + c] as f32 / 255.0
    }))
}

fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("netpbm: bad number {s:?}")))
    };
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(Error::Image(format!("netpbm: unsupported kind {other}"))),
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if max == 0 || max > 65535 {
        return Err(Error::Image(format!("netpbm: bad maxval {max}")));
    }
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(pos + 1..).unwrap_or(&[]);
        Image::from_interleaved(channels, w, h, raster, max as f32, max > 255)
    } else {
        let values = (0..channels * w * h)
            .map(|_| token().and_then(num))
            .collect::<Result<Vec<_>>>()?;
        Ok(Image::from_fn(channels, w, h, |c, x, y| {
            values[(y * w + x) * channels + c] as f32 / max as f32
        }))
    }
}

/// Writes by extension: `.pgm`/`.ppm` (binary, 8-bit) or `.png`.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let bytes = image.quantized();
    match ext.as_str() {
        "pgm" | "ppm" => {
            let kind = if image.channels == 1 { "P5" } else { "P6" };
            write!(out, "{kind}\n{} {}\n255\n", image.width, image.height).map_err(|e| Error::io(path, e))?;
            out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        "png" => {
            let err = |e: png::EncodingError| Error::Image(format!("png: {e}"));
            let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
            enc.set_color(if image.channels == 1 {
                png::ColorType::Grayscale
            } else {
                png::ColorType::Rgb
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(err)?;
            writer.write_image_data(&bytes).map_err(err)?;
            writer.finish().map_err(err)?;
        }
        _ => {
            return Err(Error::Image(format!(
                "{}: unsupported output extension",
                path.display()
            )))
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads an image and replicates grayscale to three channels.
pub fn load_rgb(path: &Path) -> Result<Image> {
    load_image(path).map(|i| i.to_rgb())
}

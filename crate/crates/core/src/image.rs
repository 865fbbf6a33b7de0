//! In-memory images, binary PGM/PPM codec, patch cropping and dihedral
//! augmentation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, FormatError, Result};
use crate::tensor::{Shape, Tensor};

/// Planar (channel-major) image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image::new(channels, height, width, data)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    /// As a `1 x c x h x w` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, self.channels, self.height, self.width), self.data.clone())
            .expect("image dims are consistent")
    }

    /// Sample `n` of a batch tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::Shape(format!("sample {n} out of range for {s}")));
        }
        Image::new(s.c, s.h, s.w, t.sample(n).into_data())
    }

    /// Clip to [0, 1] and round to the nearest 8-bit level (halves round up).
    pub fn quantized(&self) -> Image {
        Image { data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(), ..self.clone() }
    }

    /// Rec. 601 luma; grayscale images are returned unchanged.
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let data = (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
        Image { channels: 1, data, ..self.clone() }
    }

    /// Grayscale to three identical channels; color images are returned unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image { channels: 3, data: self.data.repeat(3), ..self.clone() }
    }

    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match channels {
            1 => Ok(self.to_grayscale()),
            3 => Ok(self.to_rgb()),
            c => Err(Error::Shape(format!("unsupported channel count {c}"))),
        }
    }

    /// `size x size` window at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Image::from_fn(self.channels, height, width, |c, y, x| self.at(c, top + y, left + x))
    }

    /// Reflect-pad so both sides become multiples of `multiple`. Returns the
    /// padded image and the (top, left) offset of the original inside it.
    pub fn pad_reflect_to_multiple(&self, multiple: usize) -> (Image, usize, usize) {
        let ph = self.height.div_ceil(multiple) * multiple - self.height;
        let pw = self.width.div_ceil(multiple) * multiple - self.width;
        let (top, left) = (ph / 2, pw / 2);
        let padded = Image::from_fn(self.channels, self.height + ph, self.width + pw, |c, y, x| {
            self.at(c, reflect(y as isize - top as isize, self.height), reflect(x as isize - left as isize, self.width))
        })
        .expect("padded dims are positive");
        (padded, top, left)
    }
}

/// Mirror an index into `[0, len)` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// 8-bit level of a [0, 1] value after clipping, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(FormatError::Truncated.into());
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P5" && &magic != b"P6" {
        return Err(FormatError::BadMagic.into());
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                None => return Err(FormatError::Truncated.into()),
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::MalformedHeader(format!("expected a number at byte {start}")).into());
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| FormatError::MalformedHeader(format!("number out of range: {text}")))?;
    }
    match bytes.get(pos) {
        None => return Err(FormatError::Truncated.into()),
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(FormatError::MalformedHeader("missing whitespace after maxval".into()).into()),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(FormatError::MalformedHeader(format!("zero image dimension {width}x{height}")).into());
    }
    let maxval = u32::try_from(maxval).map_err(|_| FormatError::UnsupportedMaxval(u32::MAX))?;
    Ok(Header { magic, width: width as usize, height: height as usize, maxval, data_start: pos })
}

/// Decode a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let header = parse_header(bytes)?;
    if header.maxval != 255 {
        return Err(FormatError::UnsupportedMaxval(header.maxval).into());
    }
    let channels = if &header.magic == b"P5" { 1 } else { 3 };
    let pixels = header.width * header.height;
    let payload = &bytes[header.data_start..];
    if payload.len() < pixels * channels {
        return Err(FormatError::Truncated.into());
    }
    let mut data = vec![0.0; pixels * channels];
    for (i, &b) in payload[..pixels * channels].iter().enumerate() {
        // interleaved -> planar
        let (p, c) = (i / channels, i % channels);
        data[c * pixels + p] = b as f64 / 255.0;
    }
    Image::new(channels, header.height, header.width, data)
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let pixels = img.height * img.width;
    out.reserve(pixels * img.channels);
    for p in 0..pixels {
        for c in 0..img.channels {
            out.push(quantize(img.data[c * pixels + p]));
        }
    }
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&fs::read(path)?)
}

/// Write as PGM/PPM after clipping to [0, 1] and quantizing.
pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pnm(img))?;
    Ok(())
}

/// Write a single-channel image as a 16-bit big-endian PGM, for inspection.
pub fn write_image_16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Shape("16-bit export is grayscale only".into()));
    }
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        let level = (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// A cropped patch and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub image: Image,
}

/// `count` square patches at uniformly random valid offsets.
pub fn extract_patches(img: &Image, size: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<Patch>> {
    if size == 0 || img.height < size || img.width < size {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than patch size {size}",
            img.height, img.width
        )));
    }
    (0..count)
        .map(|_| {
            let top = rng.gen_range(0..=img.height - size);
            let left = rng.gen_range(0..=img.width - size);
            Ok(Patch { top, left, image: img.crop(top, left, size, size)? })
        })
        .collect()
}

/// The eight symmetries of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
    /// Swap rows and columns.
    Transpose,
    /// Transpose about the other diagonal.
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    /// Output (y, x) -> source (y, x) for an `n x n` square.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let l = n - 1;
        match self {
            Dihedral::Identity => (y, x),
            // counter-clockwise
            Dihedral::Rot90 => (x, l - y),
            Dihedral::Rot180 => (l - y, l - x),
            Dihedral::Rot270 => (l - x, y),
            Dihedral::FlipH => (y, l - x),
            Dihedral::FlipV => (l - y, x),
            Dihedral::Transpose => (x, y),
            Dihedral::AntiTranspose => (l - x, l - y),
        }
    }

    fn swaps_axes(self) -> bool {
        matches!(self, Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose)
    }

    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    /// The single element equal to applying `first`, then `self`.
    pub fn after(self, first: Dihedral) -> Dihedral {
        // identify by where it sends two probe points of a 3x3 grid
        let probe = |d: Dihedral| [d.source(0, 1, 3), d.source(1, 0, 3)];
        let composed = {
            let s = |y, x| {
                let (y1, x1) = self.source(y, x, 3);
                first.source(y1, x1, 3)
            };
            [s(0, 1), s(1, 0)]
        };
        *Dihedral::ALL.iter().find(|d| probe(**d) == composed).expect("dihedral group is closed")
    }

    /// Apply to an image. Only the pure flips accept non-square input.
    pub fn apply(self, img: &Image) -> Result<Image> {
        let square = img.height == img.width;
        if !square && self.swaps_axes() || !square && self == Dihedral::Rot180 {
            return Err(Error::Shape(format!(
                "{self:?} requires a square patch, got {}x{}",
                img.height, img.width
            )));
        }
        let (h, w) = (img.height, img.width);
        Image::from_fn(img.channels, h, w, |c, y, x| {
            let (sy, sx) = match self {
                Dihedral::FlipH => (y, w - 1 - x),
                Dihedral::FlipV => (h - 1 - y, x),
                Dihedral::Identity => (y, x),
                other => other.source(y, x, h),
            };
            img.at(c, sy, sx)
        })
    }
}

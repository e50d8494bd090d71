//! Grayscale images, patch extraction and sampling, normalization,
//! overlap-average reassembly, PSNR, and binary PGM I/O.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};

pub const PEAK: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(dim_err(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=PEAK).contains(*v)) {
            return Err(arg_err(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Clamps every value into `[0, 255]` first.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, PEAK) };
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Copies the `side x side` window whose top-left corner is `(x, y)`
    /// in raster order.
    pub fn window(&self, x: usize, y: usize, side: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(side * side);
        for r in y..y + side {
            out.extend_from_slice(&self.pixels[r * self.width + x..r * self.width + x + side]);
        }
        out
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(dim_err("crop window leaves the image"));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for r in y..y + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + x..r * self.width + x + width]);
        }
        Self::new(width, height, pixels)
    }
}

/// ITU-R BT.601 luma: `0.299 r + 0.587 g + 0.114 b`.
pub fn to_grayscale(width: usize, height: usize, r: &[f64], g: &[f64], b: &[f64]) -> Result<GrayImage> {
    let len = width * height;
    if r.len() != len || g.len() != len || b.len() != len {
        return Err(dim_err(format!(
            "channel sizes {}, {}, {} for a {width}x{height} image",
            r.len(),
            g.len(),
            b.len()
        )));
    }
    let pixels = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, PEAK))
        .collect();
    GrayImage::new(width, height, pixels)
}

/// Vectorized square patches and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub side: usize,
    /// `(x, y)` of each window's top-left corner.
    pub origins: Vec<(usize, usize)>,
    /// One patch per row, raster order within the window.
    pub vectors: DenseMatrix,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Same origins, different patch contents.
    pub fn with_vectors(&self, vectors: DenseMatrix) -> Result<Self> {
        if vectors.rows() != self.len() || vectors.cols() != self.side * self.side {
            return Err(dim_err(format!(
                "{}x{} vectors for {} patches of side {}",
                vectors.rows(),
                vectors.cols(),
                self.len(),
                self.side
            )));
        }
        Ok(Self {
            side: self.side,
            origins: self.origins.clone(),
            vectors,
        })
    }
}

/// Number of window positions along an axis of length `dim`.
pub fn positions_along(dim: usize, side: usize, stride: usize) -> usize {
    if side > dim || stride == 0 {
        0
    } else {
        (dim - side) / stride + 1
    }
}

/// Window origins at multiples of `stride`, rows outer, columns inner.
pub fn patch_origins(width: usize, height: usize, side: usize, stride: usize) -> Vec<(usize, usize)> {
    let nx = positions_along(width, side, stride);
    let ny = positions_along(height, side, stride);
    let mut origins = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            origins.push((i * stride, j * stride));
        }
    }
    origins
}

pub fn extract_patches(img: &GrayImage, side: usize, stride: usize) -> Result<PatchSet> {
    if side == 0 || side > img.width.min(img.height) {
        return Err(arg_err(format!(
            "patch side {side} does not fit a {}x{} image",
            img.width, img.height
        )));
    }
    if stride == 0 {
        return Err(arg_err("stride must be at least 1"));
    }
    let origins = patch_origins(img.width, img.height, side, stride);
    let mut values = Vec::with_capacity(origins.len() * side * side);
    for &(x, y) in &origins {
        values.extend(img.window(x, y, side));
    }
    let vectors = DenseMatrix::from_vec(origins.len(), side * side, values)?;
    Ok(PatchSet {
        side,
        origins,
        vectors,
    })
}

/// Draws `count` windows uniformly over every valid (image, origin) pair,
/// with replacement.
///
/// Returns the patches together with the index of the source image of each.
pub fn sample_random_patches(
    images: &[GrayImage],
    side: usize,
    count: usize,
    rng: &mut SeededRng,
) -> Result<(PatchSet, Vec<usize>)> {
    if count == 0 {
        return Err(arg_err("patch count must be at least 1"));
    }
    if side == 0 {
        return Err(arg_err("patch side must be positive"));
    }
    let per_image: Vec<usize> = images
        .iter()
        .map(|im| positions_along(im.width, side, 1) * positions_along(im.height, side, 1))
        .collect();
    let total: usize = per_image.iter().sum();
    if total == 0 {
        return Err(arg_err(format!("no image can hold a {side}x{side} window")));
    }
    let mut origins = Vec::with_capacity(count);
    let mut sources = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * side * side);
    for _ in 0..count {
        let mut idx = rng.below(total);
        let mut which = 0;
        while idx >= per_image[which] {
            idx -= per_image[which];
            which += 1;
        }
        let img = &images[which];
        let nx = positions_along(img.width, side, 1);
        let (x, y) = (idx % nx, idx / nx);
        values.extend(img.window(x, y, side));
        origins.push((x, y));
        sources.push(which);
    }
    let vectors = DenseMatrix::from_vec(count, side * side, values)?;
    Ok((
        PatchSet {
            side,
            origins,
            vectors,
        },
        sources,
    ))
}

/// Corpus-global pixel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(arg_err(format!(
                "normalization needs finite mean and positive std, got {mean}, {std}"
            )));
        }
        Ok(Self { mean, std })
    }

    /// Population mean and standard deviation over every value in `data`.
    pub fn from_data(data: &DenseMatrix) -> Result<Self> {
        let values = data.as_slice();
        if values.is_empty() {
            return Err(arg_err("cannot compute statistics of an empty corpus"));
        }
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        Self::new(mean, var.sqrt())
    }
}

pub fn normalize(vectors: &DenseMatrix, stats: &NormalizationStats) -> DenseMatrix {
    let mut out = vectors.clone();
    for v in out.as_mut_slice() {
        *v = (*v - stats.mean) / stats.std;
    }
    out
}

pub fn denormalize(vectors: &DenseMatrix, stats: &NormalizationStats) -> DenseMatrix {
    let mut out = vectors.clone();
    for v in out.as_mut_slice() {
        *v = *v * stats.std + stats.mean;
    }
    out
}

/// Per-pixel mean of every patch covering the pixel, clamped to `[0, 255]`.
pub fn overlap_average(patches: &PatchSet, width: usize, height: usize) -> Result<GrayImage> {
    let side = patches.side;
    if patches.vectors.cols() != side * side || patches.vectors.rows() != patches.len() {
        return Err(dim_err("patch vectors do not match the patch side"));
    }
    let mut sum = vec![0.0; width * height];
    let mut count = vec![0u32; width * height];
    for (p, &(x, y)) in patches.origins.iter().enumerate() {
        if x + side > width || y + side > height {
            return Err(dim_err(format!(
                "patch at ({x}, {y}) leaves the {width}x{height} canvas"
            )));
        }
        let v = patches.vectors.row(p);
        for r in 0..side {
            let base = (y + r) * width + x;
            for c in 0..side {
                sum[base + c] += v[r * side + c];
                count[base + c] += 1;
            }
        }
    }
    if let Some(pos) = count.iter().position(|&c| c == 0) {
        return Err(Error::UncoveredPixel {
            x: pos % width,
            y: pos / width,
        });
    }
    let pixels = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| s / c as f64)
        .collect();
    GrayImage::from_clamped(width, height, pixels)
}

/// Pixel-domain mean squared error.
pub fn mse(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    if reference.width != test.width || reference.height != test.height {
        return Err(dim_err(format!(
            "images are {}x{} and {}x{}",
            reference.width, reference.height, test.width, test.height
        )));
    }
    let n = reference.pixels.len() as f64;
    Ok(reference
        .pixels
        .iter()
        .zip(&test.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(255^2 / MSE)` in dB; `+inf` for identical images.
pub fn psnr(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    let e = mse(reference, test)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / e).log10())
}

/// Reads an 8-bit binary (P5) PGM.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let file = std::fs::File::open(path.as_ref())?;
    decode_pgm(BufReader::new(file))
}

pub fn decode_pgm(mut reader: impl BufRead) -> Result<GrayImage> {
    fn bad(msg: &str) -> Error {
        Error::InvalidArgument(format!("malformed PGM: {msg}"))
    }
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic)?;
    if &magic != b"P5" {
        return Err(bad("expected P5 magic"));
    }
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = read_header_number(&mut reader)?.ok_or_else(|| bad("truncated header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let mut raw = vec![0u8; width * height];
    reader
        .read_exact(&mut raw)
        .map_err(|_| bad("pixel data shorter than header claims"))?;
    let scale = PEAK / maxval as f64;
    let pixels = raw.iter().map(|&b| b as f64 * scale).collect();
    GrayImage::new(width, height, pixels)
}

// Skips whitespace and `#` comments, then parses one decimal field and
// consumes the single whitespace byte after it.
fn read_header_number(reader: &mut impl BufRead) -> Result<Option<usize>> {
    let mut byte = [0u8; 1];
    let mut digits = String::new();
    loop {
        if reader.read(&mut byte)? == 0 {
            return Ok(None);
        }
        match byte[0] {
            b'#' if digits.is_empty() => {
                let mut line = Vec::new();
                reader.read_until(b'\n', &mut line)?;
            }
            c if c.is_ascii_whitespace() => {
                if !digits.is_empty() {
                    break;
                }
            }
            c if c.is_ascii_digit() => digits.push(c as char),
            _ => return Err(Error::InvalidArgument("malformed PGM: bad header byte".into())),
        }
    }
    Ok(digits.parse().ok())
}

/// Reads every `.pgm` file in `dir`, sorted by file name.
pub fn read_pgm_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, GrayImage)>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let is_pgm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if path.is_file() && is_pgm {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            read_pgm(&p).map(|img| (name, img))
        })
        .collect()
}

/// Writes an 8-bit binary PGM, rounding each pixel to the nearest integer.
pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    file.write_all(&encode_pgm(img))?;
    file.flush()?;
    Ok(())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| v.round().clamp(0.0, PEAK) as u8));
    out
}

/// Rounds every pixel to the nearest integer, matching what a PGM round
/// trip would give.
pub fn quantize(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|v| v.round()).collect(),
    }
}

//! Synthetic RGB-HSI pair generation, cube ingestion, patching, dataset
//! splits, and the binary/image file formats.
//!
//! Scenes are produced as mixtures of a few smooth spectral endmembers over
//! blurred Voronoi abundance regions, so superpixel segmentation has real
//! structure to find. RGB counterparts come from the camera projection
//! `rgb = phi * spectrum`, optionally degraded by Gaussian noise plus 8-bit
//! quantization to mimic a consumer capture path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HprnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
/// Refuse to allocate cubes beyond this many values when parsing.
const MAX_CUBE_VALUES: u64 = 1 << 31;

/// Hyperspectral cube: `bands x height x width`, band-major row-major.
#[derive(Clone, Debug)]
pub struct SpectralCube<T: Scalar> {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub wavelengths_nm: Vec<f64>,
}

/// Evenly spaced wavelengths over the 400-700 nm span (10 nm steps at the
/// default 31 bands).
pub fn default_wavelengths(bands: usize) -> Vec<f64> {
    let (lo, hi) = crate::DEFAULT_WAVELENGTH_RANGE_NM;
    if bands == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..bands)
        .map(|b| lo + (hi - lo) * b as f64 / (bands - 1) as f64)
        .collect()
}

impl<T: Scalar> SpectralCube<T> {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if bands * height * width != data.len() {
            return Err(HprnError::dimension(
                "SpectralCube::new",
                format!("{bands}x{height}x{width}"),
                format!("data of length {}", data.len()),
            ));
        }
        Ok(SpectralCube {
            bands,
            height,
            width,
            data,
            wavelengths_nm: default_wavelengths(bands),
        })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        SpectralCube::new(bands, height, width, vec![T::zero(); bands * height * width]).unwrap()
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize) -> T {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel spectrum, length `bands`.
    pub fn spectrum_at(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.bands).map(|b| self.at(b, y, x)).collect()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape::chw(self.bands, self.height, self.width),
            self.data.clone(),
        )
        .expect("cube dims consistent")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.shape().rank() != 3 {
            return Err(HprnError::contract(
                "SpectralCube::from_tensor",
                format!("expected rank 3, got {}", t.shape()),
            ));
        }
        let d = t.dims();
        SpectralCube::new(d[0], d[1], d[2], t.to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> SpectralCube<U> {
        SpectralCube {
            bands: self.bands,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
            wavelengths_nm: self.wavelengths_nm.clone(),
        }
    }

    /// Round values through `f32`, matching what a file round trip keeps.
    pub fn quantize_f32(&self) -> SpectralCube<T> {
        SpectralCube {
            bands: self.bands,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| T::from_f32(v.as_f32())).collect(),
            wavelengths_nm: self.wavelengths_nm.clone(),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<SpectralCube<T>> {
        if y0 + size > self.height || x0 + size > self.width {
            return Err(HprnError::contract(
                "crop",
                format!(
                    "window {size} at ({y0},{x0}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(self.bands * size * size);
        for b in 0..self.bands {
            for y in 0..size {
                let row = (b * self.height + y0 + y) * self.width + x0;
                data.extend_from_slice(&self.data[row..row + size]);
            }
        }
        let mut cube = SpectralCube::new(self.bands, size, size, data)?;
        cube.wavelengths_nm = self.wavelengths_nm.clone();
        Ok(cube)
    }
}

/// RGB image in `[0,1]`, channel-major (`3 x H x W`), stored at full
/// precision regardless of the training scalar type.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(HprnError::dimension(
                "RgbImage::new",
                format!("3x{height}x{width}"),
                format!("data of length {}", data.len()),
            ));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape::chw(3, self.height, self.width),
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("rgb dims consistent")
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<RgbImage> {
        if y0 + size > self.height || x0 + size > self.width {
            return Err(HprnError::contract(
                "crop",
                format!(
                    "window {size} at ({y0},{x0}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(3 * size * size);
        for ch in 0..3 {
            for y in 0..size {
                let row = (ch * self.height + y0 + y) * self.width + x0;
                data.extend_from_slice(&self.data[row..row + size]);
            }
        }
        RgbImage::new(size, size, data)
    }
}

/// Camera spectral sensitivity: three non-negative response curves over the
/// cube's bands, each normalized to unit sum.
#[derive(Clone, Debug)]
pub struct SensitivityMatrix {
    pub bands: usize,
    /// Row-major `3 x bands`.
    pub values: Vec<f64>,
}

impl SensitivityMatrix {
    #[inline]
    pub fn at(&self, ch: usize, b: usize) -> f64 {
        self.values[ch * self.bands + b]
    }

    pub fn row(&self, ch: usize) -> &[f64] {
        &self.values[ch * self.bands..(ch + 1) * self.bands]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<&String> = self.train.iter().chain(&self.val).chain(&self.test).collect();
        let total = all.len();
        all.sort();
        all.dedup();
        if all.len() != total {
            return Err(HprnError::contract(
                "DatasetSplit",
                "train/val/test sets are not pairwise disjoint".to_string(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Box-Muller standard normal.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-15);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Three Gaussian response curves centered near 450/550/620 nm with widths
/// in 30-50 nm, each normalized to unit sum.
pub fn gen_sensitivity(bands: usize, seed: u64) -> Result<SensitivityMatrix> {
    if bands < 3 {
        return Err(HprnError::contract(
            "gen_sensitivity",
            format!("need at least 3 bands, got {bands}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53454e53);
    let wl = default_wavelengths(bands);
    let mut values = Vec::with_capacity(3 * bands);
    for &nominal in &[450.0, 550.0, 620.0] {
        let center = nominal + uniform(&mut rng, -8.0, 8.0);
        let width = uniform(&mut rng, 30.0, 50.0);
        let mut row: Vec<f64> = wl
            .iter()
            .map(|&l| (-((l - center) / width).powi(2) / 2.0).exp())
            .collect();
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
        values.extend_from_slice(&row);
    }
    Ok(SensitivityMatrix { bands, values })
}

/// Catmull-Rom spline through `ctrl` evaluated at `count` evenly spaced
/// positions, endpoints duplicated.
fn cubic_curve(ctrl: &[f64], count: usize) -> Vec<f64> {
    let n = ctrl.len();
    assert!(n >= 2);
    let get = |i: isize| ctrl[i.clamp(0, n as isize - 1) as usize];
    (0..count)
        .map(|j| {
            let t = if count == 1 {
                0.0
            } else {
                j as f64 / (count - 1) as f64 * (n - 1) as f64
            };
            let seg = (t.floor() as isize).min(n as isize - 2);
            let s = t - seg as f64;
            let (p0, p1, p2, p3) = (get(seg - 1), get(seg), get(seg + 1), get(seg + 2));
            0.5 * ((2.0 * p1)
                + (-p0 + p2) * s
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s * s * s)
        })
        .collect()
}

pub const DEFAULT_ENDMEMBERS: usize = 5;

/// Synthetic scene: a few smooth spectral endmembers mixed over blurred
/// Voronoi abundance regions, clipped to `[0,1]`.
pub fn gen_hsi(height: usize, width: usize, bands: usize, seed: u64) -> SpectralCube<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x48534947);
    let k = DEFAULT_ENDMEMBERS;

    let endmembers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let ctrl: Vec<f64> = (0..6).map(|_| uniform(&mut rng, 0.12, 0.88)).collect();
            cubic_curve(&ctrl, bands)
                .into_iter()
                .map(|v| v.clamp(0.05, 0.95))
                .collect()
        })
        .collect();

    let seeds: Vec<(f64, f64)> = (0..k)
        .map(|_| {
            (
                uniform(&mut rng, 0.0, height as f64),
                uniform(&mut rng, 0.0, width as f64),
            )
        })
        .collect();

    // One-hot Voronoi abundances.
    let hw = height * width;
    let mut abundance = vec![0.0f64; k * hw];
    for y in 0..height {
        for x in 0..width {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &(sy, sx)) in seeds.iter().enumerate() {
                let d = (y as f64 + 0.5 - sy).powi(2) + (x as f64 + 0.5 - sx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            abundance[best * hw + y * width + x] = 1.0;
        }
    }

    // Blur region boundaries; convexity of the mixture is restored by the
    // per-pixel renormalization below.
    let radius = (height.min(width) / 16).max(1);
    for i in 0..k {
        let plane = &mut abundance[i * hw..(i + 1) * hw];
        box_blur(plane, height, width, radius);
        box_blur(plane, height, width, radius);
    }
    for p in 0..hw {
        let total: f64 = (0..k).map(|i| abundance[i * hw + p]).sum();
        if total > 0.0 {
            for i in 0..k {
                abundance[i * hw + p] /= total;
            }
        }
    }

    let mut data = vec![0.0f64; bands * hw];
    for (i, e) in endmembers.iter().enumerate() {
        let plane = &abundance[i * hw..(i + 1) * hw];
        for (b, &ev) in e.iter().enumerate() {
            let out = &mut data[b * hw..(b + 1) * hw];
            for (o, &a) in out.iter_mut().zip(plane.iter()) {
                *o += a * ev;
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    SpectralCube::new(bands, height, width, data).expect("generated dims consistent")
}

fn box_blur(plane: &mut [f64], height: usize, width: usize, radius: usize) {
    let r = radius as isize;
    let mut tmp = vec![0.0f64; plane.len()];
    // horizontal
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dx in -r..=r {
                let xx = x + dx;
                if xx >= 0 && xx < width as isize {
                    acc += plane[(y * width as isize + xx) as usize];
                    cnt += 1.0;
                }
            }
            tmp[(y * width as isize + x) as usize] = acc / cnt;
        }
    }
    // vertical
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy >= 0 && yy < height as isize {
                    acc += tmp[(yy * width as isize + x) as usize];
                    cnt += 1.0;
                }
            }
            plane[(y * width as isize + x) as usize] = acc / cnt;
        }
    }
}

/// Camera projection `rgb = phi * spectrum` per pixel, with an optional
/// degradation pass (zero-mean Gaussian noise, then 8-bit quantization),
/// clipped to `[0,1]`.
pub fn project_rgb<T: Scalar>(
    cube: &SpectralCube<T>,
    phi: &SensitivityMatrix,
    noise: Option<NoiseSpec>,
) -> Result<RgbImage> {
    if phi.bands != cube.bands {
        return Err(HprnError::dimension(
            "project_rgb",
            format!("cube with {} bands", cube.bands),
            format!("sensitivity over {} bands", phi.bands),
        ));
    }
    let hw = cube.n_pixels();
    let mut data = vec![0.0f64; 3 * hw];
    for ch in 0..3 {
        let row = phi.row(ch);
        let out = &mut data[ch * hw..(ch + 1) * hw];
        for (b, &w) in row.iter().enumerate() {
            let plane = &cube.data[b * hw..(b + 1) * hw];
            for (o, &v) in out.iter_mut().zip(plane.iter()) {
                *o += w * v.as_f64();
            }
        }
    }
    if let Some(spec) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4e4f4953);
        for v in data.iter_mut() {
            *v += spec.sigma * normal(&mut rng);
            *v = (*v * 255.0).round() / 255.0;
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    RgbImage::new(cube.height, cube.width, data)
}

/// Aligned random crops; the same window is applied to both modalities.
pub fn crop_patches<T: Scalar>(
    cube: &SpectralCube<T>,
    rgb: &RgbImage,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(SpectralCube<T>, RgbImage)>> {
    if size > cube.height.min(cube.width) {
        return Err(HprnError::contract(
            "crop_patches",
            format!(
                "patch {size} exceeds scene {}x{}",
                cube.height, cube.width
            ),
        ));
    }
    if rgb.height != cube.height || rgb.width != cube.width {
        return Err(HprnError::dimension(
            "crop_patches",
            format!("cube {}x{}", cube.height, cube.width),
            format!("rgb {}x{}", rgb.height, rgb.width),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x43524f50);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let y0 = rng.random_range(0..=cube.height - size);
        let x0 = rng.random_range(0..=cube.width - size);
        out.push((cube.crop(y0, x0, size)?, rgb.crop(y0, x0, size)?));
    }
    Ok(out)
}

// -------------------------------------------------------------------
// HSC1 cube format
// -------------------------------------------------------------------

/// Write a cube: magic "HSC1", u32 LE bands/height/width, then
/// `bands*height*width` 32-bit LE floats, band-major row-major.
pub fn write_cube<T: Scalar>(cube: &SpectralCube<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(HSC1_MAGIC)?;
    for dim in [cube.bands, cube.height, cube.width] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in &cube.data {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cube<T: Scalar>(path: &Path) -> Result<SpectralCube<T>> {
    let parse_err = |offset: u64, msg: String| HprnError::Parse {
        path: path.display().to_string(),
        offset,
        msg,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err(0, "file shorter than magic".to_string()))?;
    if &magic != HSC1_MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}, expected \"HSC1\"")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| parse_err(4 + 4 * i as u64, "truncated header".to_string()))?;
        *d = u32::from_le_bytes(buf) as usize;
        if *d == 0 {
            return Err(parse_err(4 + 4 * i as u64, "zero dimension".to_string()));
        }
    }
    let (bands, height, width) = (dims[0], dims[1], dims[2]);
    let count = (bands as u64)
        .checked_mul(height as u64)
        .and_then(|v| v.checked_mul(width as u64))
        .filter(|&v| v <= MAX_CUBE_VALUES)
        .ok_or_else(|| parse_err(4, format!("dimensions {bands}x{height}x{width} overflow")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != count * 4 {
        return Err(parse_err(
            16,
            format!(
                "payload of {} bytes, expected {} for {bands}x{height}x{width}",
                payload.len(),
                count * 4
            ),
        ));
    }
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    SpectralCube::new(bands, height, width, data)
}

// -------------------------------------------------------------------
// PNG I/O
// -------------------------------------------------------------------

pub fn write_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| HprnError::Png(e.to_string()))?;
    let hw = img.height * img.width;
    let mut bytes = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            let v = (img.data[ch * hw + p] * 255.0).round().clamp(0.0, 255.0);
            bytes.push(v as u8);
        }
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| HprnError::Png(e.to_string()))?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| HprnError::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| HprnError::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(HprnError::Png(format!(
            "unsupported bit depth {:?}, expected 8-bit",
            info.bit_depth
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(HprnError::Png(format!("unsupported color type {other:?}")));
        }
    };
    let hw = h * w;
    let mut data = vec![0.0f64; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            let src = if channels == 1 { 0 } else { ch };
            data[ch * hw + p] = buf[p * channels + src] as f64 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

/// 16-bit grayscale PNG, used for label maps.
pub fn write_gray16_png(values: &[u16], height: usize, width: usize, path: &Path) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| HprnError::Png(e.to_string()))?;
    let mut bytes = Vec::with_capacity(2 * values.len());
    for &v in values {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| HprnError::Png(e.to_string()))?;
    Ok(())
}

// -------------------------------------------------------------------
// Splits
// -------------------------------------------------------------------

pub fn write_split(ids: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

//! Stimulus preprocessing: Gaussian blur, bubble compositing, heatmap overlays
//! and PNG I/O.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

use crate::maps::AttentionMap;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("bubble center ({0}, {1}) outside the {2}x{3} image")]
    CenterOutOfBounds(f64, f64, usize, usize),
    #[error("sigma must be finite and >= 0, got {0}")]
    BadSigma(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major image with 1 (gray) or 3 (RGB) channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Invalid("width and height must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::Invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(ImagingError::Invalid(format!(
                "expected {} samples, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::Invalid(format!("sample {v} outside [0, 1]")));
        }
        Ok(Image { width, height, channels, pixels })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, ImagingError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn mirror_horizontal(&self) -> Image {
        let mut out = self.pixels.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out[dst..dst + c].copy_from_slice(&self.pixels[src..src + c]);
            }
        }
        Image { pixels: out, ..*self }
    }

    /// Luminance as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Image { channels: 1, pixels, ..*self }
    }

    fn same_shape(&self, other: &Image) -> Result<(), ImagingError> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(ImagingError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Decodes PNG (or any format the codec recognizes); alpha is dropped.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImagingError> {
        let dynamic = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(dynamic))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    fn from_dynamic(dynamic: DynamicImage) -> Self {
        let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
        let gray = matches!(
            dynamic,
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_)
        );
        if gray {
            let buf = dynamic.to_luma8();
            let pixels = buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Image { width, height, channels: 1, pixels }
        } else {
            let buf = dynamic.to_rgb8();
            let pixels = buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Image { width, height, channels: 3, pixels }
        }
    }

    /// 8-bit samples, rounded to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8();
        if self.channels == 1 {
            DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("sized buffer"))
        } else {
            DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("sized buffer"))
        }
    }

    /// Lossless 8-bit PNG encoding.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let bytes = self.encode_png()?;
        write_atomic(path.as_ref(), &bytes)
    }

    /// Downscales so that the larger side is at most `max_dim`, keeping aspect ratio.
    pub fn downscale_to_max_dim(&self, max_dim: usize) -> Image {
        let largest = self.width.max(self.height);
        if largest <= max_dim || max_dim == 0 {
            return self.clone();
        }
        let scale = max_dim as f64 / largest as f64;
        let w = ((self.width as f64 * scale).round() as u32).max(1);
        let h = ((self.height as f64 * scale).round() as u32).max(1);
        let resized = self.to_dynamic().resize_exact(w, h, image::imageops::FilterType::Triangle);
        Self::from_dynamic(resized)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ImagingError> {
    let io_err = |source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Normalized 1-D Gaussian, truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / denom).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur of one `width x height` plane with edge replication.
///
/// `sigma == 0` returns the plane unchanged. Taps at `+k` and `-k` are added
/// before weighting, so blurring commutes exactly with mirroring.
pub fn blur_plane(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() / 2;
    let half = &kernel[r..];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tap = |at: &dyn Fn(usize) -> f64, i: usize, n: usize| {
        let mut acc = half[0] * at(i);
        for (k, w) in half.iter().enumerate().skip(1) {
            let k = k as isize;
            acc += w * (at(clamp(i as isize - k, n)) + at(clamp(i as isize + k, n)));
        }
        acc
    };

    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = tap(&|i| row[i], x, width);
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = tap(&|j| tmp[j * width + x], y, height);
        }
    }
    out
}

/// Blurs each channel independently. Used to mimic peripheral vision.
pub fn gaussian_blur(img: &Image, sigma_px: f64) -> Result<Image, ImagingError> {
    if !(sigma_px >= 0.0 && sigma_px.is_finite()) {
        return Err(ImagingError::BadSigma(sigma_px));
    }
    if sigma_px == 0.0 {
        return Ok(img.clone());
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut pixels = vec![0.0; img.pixels.len()];
    let mut plane = vec![0.0; w * h];
    for ch in 0..c {
        for (i, v) in plane.iter_mut().enumerate() {
            *v = img.pixels[i * c + ch];
        }
        for (i, v) in blur_plane(&plane, w, h, sigma_px).into_iter().enumerate() {
            pixels[i * c + ch] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Image { pixels, ..*img })
}

/// Replaces the disk of `radius_px` around `center` in `blurred` with the
/// corresponding `original` pixels. The boundary is inclusive and hard-edged.
pub fn composite_bubble(
    blurred: &Image,
    original: &Image,
    center: (f64, f64),
    radius_px: f64,
) -> Result<Image, ImagingError> {
    blurred.same_shape(original)?;
    let (cx, cy) = center;
    if !(cx >= 0.0 && cy >= 0.0 && cx < blurred.width as f64 && cy < blurred.height as f64) {
        return Err(ImagingError::CenterOutOfBounds(cx, cy, blurred.width, blurred.height));
    }
    if !(radius_px > 0.0) {
        return Err(ImagingError::Invalid(format!("bubble radius must be positive, got {radius_px}")));
    }
    let mut out = blurred.clone();
    let c = blurred.channels;
    let r2 = radius_px * radius_px;
    let y0 = (cy - radius_px).floor().max(0.0) as usize;
    let y1 = ((cy + radius_px).ceil() as usize).min(blurred.height - 1);
    let x0 = (cx - radius_px).floor().max(0.0) as usize;
    let x1 = ((cx + radius_px).ceil() as usize).min(blurred.width - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                let i = (y * blurred.width + x) * c;
                out.pixels[i..i + c].copy_from_slice(&original.pixels[i..i + c]);
            }
        }
    }
    Ok(out)
}

/// Monotone black-red-yellow-white ramp.
pub fn heat_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (3.0 * t).clamp(0.0, 1.0),
        (3.0 * t - 1.0).clamp(0.0, 1.0),
        (3.0 * t - 2.0).clamp(0.0, 1.0),
    ]
}

/// Overlays a max-normalized map on the grayscale version of `base`.
pub fn render_heatmap(map: &AttentionMap, base: &Image, alpha: f64) -> Result<Image, ImagingError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ImagingError::BadAlpha(alpha));
    }
    if map.width() != base.width || map.height() != base.height {
        return Err(ImagingError::DimensionMismatch(map.width(), map.height(), base.width, base.height));
    }
    let gray = base.to_gray();
    let values = map.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut pixels = Vec::with_capacity(values.len() * 3);
    for (v, g) in values.iter().zip(&gray.pixels) {
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        for c in heat_color(t) {
            pixels.push(((1.0 - alpha) * g + alpha * c).clamp(0.0, 1.0));
        }
    }
    Ok(Image {
        width: base.width,
        height: base.height,
        channels: 3,
        pixels,
    })
}

/// On-disk cache of blurred stimuli keyed by image id and sigma.
#[derive(Debug, Clone)]
pub struct BlurCache {
    dir: PathBuf,
}

impl BlurCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        BlurCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, image_id: &str, sigma_px: f64) -> PathBuf {
        self.dir.join(format!("{image_id}__sigma{}.png", sigma_key(sigma_px)))
    }

    /// Returns the cached blurred PNG path, computing it if absent.
    /// The flag is `true` when work was done.
    pub fn get_or_create(&self, image_id: &str, source: &Path, sigma_px: f64) -> Result<(PathBuf, bool), ImagingError> {
        let path = self.path_for(image_id, sigma_px);
        if path.is_file() {
            return Ok((path, false));
        }
        let img = Image::load(source)?;
        gaussian_blur(&img, sigma_px)?.save_png(&path)?;
        Ok((path, true))
    }
}

fn sigma_key(sigma: f64) -> String {
    // 40 -> "40", 2.5 -> "2p5"
    format!("{sigma}").replace('.', "p")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{AttentionMap, Normalization};

    fn gradient(w: usize, h: usize) -> Image {
        let pixels = (0..w * h).map(|i| (i % w) as f64 / w as f64).collect();
        Image::new(w, h, 1, pixels).unwrap()
    }

    #[test]
    fn sigma_zero_is_identity() {
        let img = gradient(9, 7);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn kernel_radius_and_sum() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let k = gaussian_kernel(0.4);
        assert_eq!(k.len(), 5);
    }

    #[test]
    fn impulse_response_is_normalized_kernel() {
        let sigma = 2.0;
        let (w, h) = (31, 31);
        let mut pixels = vec![0.0; w * h];
        pixels[15 * w + 15] = 1.0;
        let out = gaussian_blur(&Image::new(w, h, 1, pixels).unwrap(), sigma).unwrap();
        // truncated square 2-D kernel, normalized directly
        let r = 6i64;
        let mut analytic = vec![];
        for dy in -r..=r {
            for dx in -r..=r {
                analytic.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let s: f64 = analytic.iter().sum();
        let mut i = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let got = out.get((15 + dx) as usize, (15 + dy) as usize, 0);
                assert!((got - analytic[i] / s).abs() <= 1e-9);
                i += 1;
            }
        }
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(gaussian_blur(&gradient(4, 4), -1.0).is_err());
        assert!(gaussian_blur(&gradient(4, 4), f64::NAN).is_err());
    }

    #[test]
    fn bubble_boundary_is_inclusive() {
        let blurred = Image::filled(30, 30, 1, 0.0).unwrap();
        let original = Image::filled(30, 30, 1, 1.0).unwrap();
        let out = composite_bubble(&blurred, &original, (10.0, 10.0), 3.0).unwrap();
        assert_eq!(out.get(10, 13, 0), 1.0);
        assert_eq!(out.get(10, 14, 0), 0.0);
        // brute-force check of every pixel
        for y in 0..30 {
            for x in 0..30 {
                let d2 = (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2);
                assert_eq!(out.get(x, y, 0), if d2 <= 9.0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn bubble_full_and_empty_coverage() {
        let blurred = gradient(20, 10);
        let original = blurred.mirror_horizontal();
        let full = composite_bubble(&blurred, &original, (3.0, 4.0), 100.0).unwrap();
        assert_eq!(full, original);
        let empty = composite_bubble(&blurred, &original, (3.5, 4.5), 0.2).unwrap();
        assert_eq!(empty, blurred);
    }

    #[test]
    fn bubble_errors() {
        let a = Image::filled(10, 10, 1, 0.0).unwrap();
        let b = Image::filled(11, 10, 1, 0.0).unwrap();
        assert!(matches!(
            composite_bubble(&a, &b, (1.0, 1.0), 2.0),
            Err(ImagingError::DimensionMismatch(..))
        ));
        assert!(matches!(
            composite_bubble(&a, &a, (10.0, 1.0), 2.0),
            Err(ImagingError::CenterOutOfBounds(..))
        ));
    }

    #[test]
    fn bubble_is_idempotent() {
        let blurred = gradient(20, 20);
        let original = blurred.mirror_horizontal();
        let once = composite_bubble(&blurred, &original, (7.0, 9.0), 5.0).unwrap();
        let twice = composite_bubble(&once, &original, (7.0, 9.0), 5.0).unwrap();
        assert_eq!(once, twice);
    }

    fn map_from(w: usize, h: usize, values: Vec<f64>) -> AttentionMap {
        AttentionMap::new(w, h, values, Normalization::Raw).unwrap()
    }

    #[test]
    fn heatmap_alpha_zero_is_gray_base() {
        let base = Image::new(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = render_heatmap(&map_from(2, 1, vec![0.0, 1.0]), &base, 0.0).unwrap();
        let gray = base.to_gray();
        for x in 0..2 {
            for c in 0..3 {
                assert_eq!(out.get(x, 0, c), gray.get(x, 0, 0));
            }
        }
    }

    #[test]
    fn heatmap_constant_map_is_uniform() {
        let base = Image::filled(4, 3, 1, 0.5).unwrap();
        let out = render_heatmap(&map_from(4, 3, vec![0.2; 12]), &base, 0.7).unwrap();
        let first = &out.pixels()[0..3];
        assert!(out.pixels().chunks(3).all(|p| p == first));
    }

    #[test]
    fn heatmap_peak_is_hottest() {
        let mut values = vec![0.1; 25];
        values[12] = 0.9;
        let base = Image::filled(5, 5, 1, 0.0).unwrap();
        let out = render_heatmap(&map_from(5, 5, values), &base, 1.0).unwrap();
        let peak = [out.get(2, 2, 0), out.get(2, 2, 1), out.get(2, 2, 2)];
        assert_eq!(peak, heat_color(1.0));
    }

    #[test]
    fn heatmap_dimension_mismatch() {
        let base = Image::filled(4, 4, 1, 0.0).unwrap();
        assert!(render_heatmap(&map_from(3, 4, vec![0.0; 12]), &base, 0.5).is_err());
    }

    #[test]
    fn png_round_trip_on_8bit_values() {
        let pixels = (0..12 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 3, 3, pixels).unwrap();
        let back = Image::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
        assert_eq!(back.channels(), 3);
    }

    #[test]
    fn downscale_keeps_aspect() {
        let img = Image::filled(1000, 565, 3, 0.5).unwrap();
        let small = img.downscale_to_max_dim(500);
        assert_eq!((small.width(), small.height()), (500, 283));
        assert_eq!(gradient(10, 10).downscale_to_max_dim(500).width(), 10);
    }

    #[test]
    fn cache_skips_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("a.png");
        gradient(16, 8).save_png(&src).unwrap();
        let cache = BlurCache::new(dir.path().join("cache"));
        let (p1, computed) = cache.get_or_create("a", &src, 2.5).unwrap();
        assert!(computed);
        assert!(p1.ends_with("a__sigma2p5.png"));
        let (p2, computed) = cache.get_or_create("a", &src, 2.5).unwrap();
        assert!(!computed);
        assert_eq!(p1, p2);
        let (p3, computed) = cache.get_or_create("a", &src, 3.0).unwrap();
        assert!(computed);
        assert_ne!(p1, p3);
    }
}

//! Image-domain types: pixel tensors, perturbation budgets, and masked deltas.
//!
//! Pixels live in the real range `[0, 1]`. Budgets are declared on the 8-bit
//! scale and converted once, so an `epsilon_8bit` of 16 always means a
//! per-pixel bound of `16/255`.

use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of color channels; all images are RGB.
pub const CHANNELS: usize = 3;

/// An H x W x 3 image with real-valued intensities in `[0, 1]`.
///
/// Data is stored row-major as `(y, x, channel)`. Construction validates the
/// range and shape invariants; instances are immutable afterwards, so they are
/// safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image from raw data, enforcing shape and range invariants.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::argument("image dimensions must be positive"));
        }
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{height}x{width}x{CHANNELS} = {expected} values"),
                format!("{} values", data.len()),
            ));
        }
        let img = ImageTensor {
            height,
            width,
            data,
        };
        validate_image(&img)?;
        Ok(img)
    }

    /// All-zero (black) image.
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    /// Constant-intensity image.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        ImageTensor::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, channel: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + channel]
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, CHANNELS)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// FNV-1a digest of the raw f64 bits; used for provenance and as a cheap
    /// bitwise-equality check in logs.
    pub fn digest(&self) -> u64 {
        let mut h = crate::util::Fnv1a::new();
        h.write_u64(self.height as u64);
        h.write_u64(self.width as u64);
        for v in &self.data {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }

    /// Bilinear resize. Returns a clone when the target size already matches.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::argument("resize dimensions must be positive"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut data = vec![0.0; height * width * CHANNELS];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            // Align sample centers with source pixel centers.
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..CHANNELS {
                    let v00 = self.pixel(y0, x0, c);
                    let v01 = self.pixel(y0, x1, c);
                    let v10 = self.pixel(y1, x0, c);
                    let v11 = self.pixel(y1, x1, c);
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    data[(y * width + x) * CHANNELS + c] =
                        (top + (bot - top) * wy).clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor::new(height, width, data)
    }

    /// Writes the image as an 8-bit RGB PNG. Export quantizes each value with
    /// the same rounding rule as [`quantize_roundtrip`], so a write/read cycle
    /// is lossless for already-quantized images.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
        let mut encoder =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::io(path.display(), e))?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::io(path.display(), e))?;
        Ok(())
    }

    /// Reads an 8-bit RGB or RGBA PNG (alpha is dropped).
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display(), e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::io(path.display(), e))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::io(path.display(), e))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::argument("only 8-bit PNGs are supported"));
        }
        let (height, width) = (info.height as usize, info.width as usize);
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => {
                return Err(Error::argument(format!(
                    "unsupported PNG color type {other:?}; expected RGB or RGBA"
                )))
            }
        };
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for px in buf[..height * width * stride].chunks(stride) {
            data.extend(px[..CHANNELS].iter().map(|&b| b as f64 / 255.0));
        }
        ImageTensor::new(height, width, data)
    }
}

/// Checks every pixel is finite and within `[0, 1]` and the buffer matches the
/// declared shape. Returns the image untouched when all invariants hold.
pub fn validate_image(img: &ImageTensor) -> Result<&ImageTensor> {
    let expected = img.height * img.width * CHANNELS;
    if img.data.len() != expected {
        return Err(Error::shape(
            format!("{} values", expected),
            format!("{} values", img.data.len()),
        ));
    }
    for (i, &v) in img.data.iter().enumerate() {
        let reason = if !v.is_finite() {
            Some("non-finite")
        } else if !(0.0..=1.0).contains(&v) {
            Some("outside [0, 1]")
        } else {
            None
        };
        if let Some(reason) = reason {
            let pixel = i / CHANNELS;
            return Err(Error::Range {
                y: pixel / img.width,
                x: pixel % img.width,
                channel: i % CHANNELS,
                value: v,
                reason,
            });
        }
    }
    Ok(img)
}

/// Simulates an 8-bit export/import: every value becomes `round(v*255)/255`.
/// Idempotent bitwise.
pub fn quantize_roundtrip(img: &ImageTensor) -> ImageTensor {
    let data = img
        .data
        .iter()
        .map(|v| (v * 255.0).round() / 255.0)
        .collect();
    ImageTensor {
        height: img.height,
        width: img.width,
        data,
    }
}

/// An l-inf perturbation budget declared on the 8-bit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PixelBudget {
    epsilon_8bit: u8,
}

impl PixelBudget {
    pub fn new(epsilon_8bit: u8) -> Self {
        PixelBudget { epsilon_8bit }
    }

    pub fn epsilon_8bit(&self) -> u8 {
        self.epsilon_8bit
    }

    /// Budget on the `[0, 1]` pixel scale; `epsilon_norm * 255` recovers the
    /// 8-bit value exactly because it is derived, never stored.
    pub fn epsilon_norm(&self) -> f64 {
        self.epsilon_8bit as f64 / 255.0
    }
}

impl Default for PixelBudget {
    fn default() -> Self {
        PixelBudget { epsilon_8bit: 16 }
    }
}

/// Binary H x W mask; 1 marks pixels the optimizer may perturb.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{}x{} = {} values", height, width, height * width),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::argument(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    /// Rectangular patch mask: ones inside the rectangle, zeros elsewhere.
    pub fn rect(
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        patch_height: usize,
        patch_width: usize,
    ) -> Result<Self> {
        if top + patch_height > height || left + patch_width > width {
            return Err(Error::argument("patch rectangle exceeds mask bounds"));
        }
        let mut data = vec![0u8; height * width];
        for y in top..top + patch_height {
            for x in left..left + patch_width {
                data[y * width + x] = 1;
            }
        }
        Mask::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn allows(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Slack on the stored-delta budget check to absorb float accumulation.
pub const BUDGET_SLACK: f64 = 1e-9;

/// A budgeted additive perturbation, stored pre-clamp.
///
/// The l-inf bound is checked on the stored delta; clamping `I + delta` into
/// `[0, 1]` happens only at application time. Outside an optional mask the
/// delta must be exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    height: usize,
    width: usize,
    delta: Vec<f64>,
    budget: PixelBudget,
    mask: Option<Mask>,
}

impl Perturbation {
    pub fn new(
        height: usize,
        width: usize,
        delta: Vec<f64>,
        budget: PixelBudget,
        mask: Option<Mask>,
    ) -> Result<Self> {
        if delta.len() != height * width * CHANNELS {
            return Err(Error::shape(
                format!("{}x{}x{CHANNELS}", height, width),
                format!("{} values", delta.len()),
            ));
        }
        if let Some(mask) = &mask {
            if mask.height() != height || mask.width() != width {
                return Err(Error::shape(
                    format!("mask {}x{}", height, width),
                    format!("mask {}x{}", mask.height(), mask.width()),
                ));
            }
        }
        let p = Perturbation {
            height,
            width,
            delta,
            budget,
            mask,
        };
        p.check_invariants()?;
        Ok(p)
    }

    /// Zero perturbation with the given budget and optional mask.
    pub fn zeros(height: usize, width: usize, budget: PixelBudget, mask: Option<Mask>) -> Self {
        Perturbation {
            height,
            width,
            delta: vec![0.0; height * width * CHANNELS],
            budget,
            mask,
        }
    }

    fn check_invariants(&self) -> Result<()> {
        let bound = self.budget.epsilon_norm() + BUDGET_SLACK;
        for (i, &d) in self.delta.iter().enumerate() {
            if !d.is_finite() || d.abs() > bound {
                let pixel = i / CHANNELS;
                return Err(Error::Range {
                    y: pixel / self.width,
                    x: pixel % self.width,
                    channel: i % CHANNELS,
                    value: d,
                    reason: "delta exceeds l-inf budget",
                });
            }
            if let Some(mask) = &self.mask {
                let pixel = i / CHANNELS;
                if !mask.allows(pixel / self.width, pixel % self.width) && d != 0.0 {
                    return Err(Error::Range {
                        y: pixel / self.width,
                        x: pixel % self.width,
                        channel: i % CHANNELS,
                        value: d,
                        reason: "nonzero delta outside mask",
                    });
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn budget(&self) -> PixelBudget {
        self.budget
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn seeded_image(height: usize, width: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..height * width * CHANNELS)
            .map(|_| rng.random::<f64>())
            .collect();
        ImageTensor::new(height, width, data).unwrap()
    }

    #[test]
    fn all_zero_image_is_accepted() {
        let img = ImageTensor::zeros(2, 2);
        assert!(validate_image(&img).is_ok());
    }

    #[test]
    fn out_of_range_pixel_is_rejected_with_coordinate() {
        let mut data = vec![0.0; 12];
        data[7] = 1.5; // pixel (0,1) channel 1 of a 2x2
        let img = ImageTensor {
            height: 2,
            width: 2,
            data,
        };
        match validate_image(&img) {
            Err(Error::Range { y, x, channel, .. }) => {
                // flat index 7 = pixel 2 of a 2x2 = (y 1, x 0), channel 1
                assert_eq!((y, x, channel), (1, 0, 1));
            }
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn nan_pixel_is_rejected() {
        let mut data = vec![0.0; 12];
        data[3] = f64::NAN;
        let img = ImageTensor {
            height: 2,
            width: 2,
            data,
        };
        assert!(matches!(validate_image(&img), Err(Error::Range { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            ImageTensor::new(2, 2, vec![0.0; 11]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn quantize_follows_rounding_rule() {
        let img = ImageTensor::constant(1, 1, 0.5).unwrap();
        let q = quantize_roundtrip(&img);
        assert_eq!(q.data()[0], 128.0 / 255.0);
        let zero = ImageTensor::zeros(1, 1);
        assert_eq!(quantize_roundtrip(&zero).data()[0], 0.0);
    }

    #[test]
    fn quantize_is_idempotent_bitwise() {
        let img = seeded_image(8, 8, 42);
        let once = quantize_roundtrip(&img);
        let twice = quantize_roundtrip(&once);
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn budget_norm_roundtrips_exactly() {
        for eps in [0u8, 1, 16, 255] {
            let b = PixelBudget::new(eps);
            assert_eq!(b.epsilon_norm() * 255.0, eps as f64);
            assert!((0.0..=1.0).contains(&b.epsilon_norm()));
        }
    }

    #[test]
    fn perturbation_rejects_over_budget_delta() {
        let budget = PixelBudget::new(16);
        let delta = vec![17.0 / 255.0; 12];
        assert!(Perturbation::new(2, 2, delta, budget, None).is_err());
        let ok = vec![16.0 / 255.0; 12];
        assert!(Perturbation::new(2, 2, ok, budget, None).is_ok());
    }

    #[test]
    fn perturbation_rejects_nonzero_outside_mask() {
        let budget = PixelBudget::new(16);
        let mask = Mask::rect(2, 2, 0, 0, 1, 1).unwrap();
        let mut delta = vec![0.0; 12];
        delta[11] = 0.01; // pixel (1,1) is outside the patch
        assert!(Perturbation::new(2, 2, delta.clone(), budget, Some(mask.clone())).is_err());
        delta[11] = 0.0;
        delta[0] = 0.01; // pixel (0,0) is inside
        assert!(Perturbation::new(2, 2, delta, budget, Some(mask)).is_ok());
    }

    #[test]
    fn png_roundtrip_preserves_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = quantize_roundtrip(&seeded_image(5, 7, 3));
        img.write_png(&path).unwrap();
        let back = ImageTensor::read_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn resize_identity_and_constant_preservation() {
        let img = seeded_image(6, 6, 9);
        assert_eq!(img.resize_bilinear(6, 6).unwrap(), img);
        let flat = ImageTensor::constant(4, 4, 0.25).unwrap();
        let up = flat.resize_bilinear(8, 8).unwrap();
        for &v in up.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}

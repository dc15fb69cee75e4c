//! Seeded single-order degradation (blur, area downsample, noise, 8-bit
//! quantization) and PSNR.

use thiserror::Error;

use crate::rng;

const NOISE_STREAM: u64 = 0x006e_6f69_7365;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum DegradeError {
    #[error("image {width}x{height} is smaller than scale {scale}")]
    TooSmall { width: usize, height: usize, scale: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image mismatch: {0}")]
    Mismatch(String),
}

/// Row-major interleaved intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn check(&self) -> Result<(), DegradeError> {
        if !(self.channels == 1 || self.channels == 3) {
            return Err(DegradeError::Config(format!("{} channels (expected 1 or 3)", self.channels)));
        }
        if self.data.len() != self.width * self.height * self.channels {
            return Err(DegradeError::Config(format!(
                "data length {} != {}x{}x{}",
                self.data.len(),
                self.width,
                self.height,
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    pub scale: usize,
    /// Gaussian blur standard deviation in HR pixels.
    pub blur_sigma: f64,
    /// Additive Gaussian noise standard deviation on the `[0, 1]` scale.
    pub noise_sigma: f64,
    pub quantize: bool,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { scale: 4, blur_sigma: 1.2, noise_sigma: 0.02, quantize: true, seed: 0 }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<(), DegradeError> {
        if self.scale < 1 {
            return Err(DegradeError::Config("scale must be >= 1".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(DegradeError::Config(format!("blur_sigma {} must be finite and >= 0", self.blur_sigma)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DegradeError::Config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Mirror an index into `0..n` with edge repetition (`-1 -> 0`, `n -> n-1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflective borders. `sigma == 0` is a copy.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    if sigma == 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let horiz = ImageBuffer::from_fn(w, h, ch, |x, y, c| {
        k.iter().enumerate().map(|(j, kv)| kv * img.at(reflect(x as isize + j as isize - r, w), y, c)).sum()
    });
    ImageBuffer::from_fn(w, h, ch, |x, y, c| {
        k.iter().enumerate().map(|(j, kv)| kv * horiz.at(x, reflect(y as isize + j as isize - r, h), c)).sum()
    })
}

/// Mean over each `scale x scale` block; trailing partial blocks are dropped.
pub fn downsample_area(img: &ImageBuffer, scale: usize) -> Result<ImageBuffer, DegradeError> {
    if img.width < scale || img.height < scale {
        return Err(DegradeError::TooSmall { width: img.width, height: img.height, scale });
    }
    let area = (scale * scale) as f64;
    Ok(ImageBuffer::from_fn(img.width / scale, img.height / scale, img.channels, |x, y, c| {
        let mut sum = 0.0;
        for dy in 0..scale {
            for dx in 0..scale {
                sum += img.at(x * scale + dx, y * scale + dy, c);
            }
        }
        sum / area
    }))
}

pub fn upsample_nearest(img: &ImageBuffer, scale: usize) -> ImageBuffer {
    ImageBuffer::from_fn(img.width * scale, img.height * scale, img.channels, |x, y, c| {
        img.at(x / scale, y / scale, c)
    })
}

pub fn degrade(hr: &ImageBuffer, cfg: &DegradeConfig) -> Result<ImageBuffer, DegradeError> {
    cfg.validate()?;
    hr.check()?;
    if hr.width < cfg.scale || hr.height < cfg.scale {
        return Err(DegradeError::TooSmall { width: hr.width, height: hr.height, scale: cfg.scale });
    }
    let blurred = gaussian_blur(hr, cfg.blur_sigma);
    let mut lr = downsample_area(&blurred, cfg.scale)?;
    if cfg.noise_sigma > 0.0 {
        let mut g = rng::stream(cfg.seed, NOISE_STREAM);
        for v in &mut lr.data {
            *v = (*v + cfg.noise_sigma * rng::gaussian(&mut g)).clamp(0.0, 1.0);
        }
    }
    if cfg.quantize {
        for v in &mut lr.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Ok(lr)
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, DegradeError> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(DegradeError::Mismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if a.data.is_empty() {
        return Err(DegradeError::Mismatch("empty images".into()));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` for intensities in `[0, 1]`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, DegradeError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

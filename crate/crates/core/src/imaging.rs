//! Grayscale images, Gaussian smoothing, Sobel gradients, Canny edge
//! detection and binary-mask morphology, plus binary PGM (P5) ingest.
//!
//! Edge pixels mark the robust regions the sampler intersects with the
//! attention mask. All operations are deterministic: identical inputs
//! produce bit-identical outputs.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("image {width}x{height} below the {min}x{min} minimum")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("masks have different grids: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("not a binary PGM (P5) file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("PGM payload truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[v * self.width + u] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Which grid a mask is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskResolution {
    Image,
    FeatureGrid,
}

/// Binary spatial mask over the image or the feature grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub resolution: MaskResolution,
}

impl BitMask {
    pub fn empty(width: usize, height: usize, resolution: MaskResolution) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            resolution,
        }
    }

    pub fn full(width: usize, height: usize, resolution: MaskResolution) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
            resolution,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| !a || b)
    }

    /// Cellwise AND of two same-shaped masks.
    pub fn intersect(&self, other: &BitMask) -> Result<BitMask, ImagingError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImagingError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(BitMask {
            width: self.width,
            height: self.height,
            bits,
            resolution: self.resolution,
        })
    }
}

/// Canny parameters. Thresholds are fractions of the per-image maximum
/// gradient magnitude, so synthetic and real imagery work without retuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyConfig {
    pub sigma: f64,
    pub low_thresh: f64,
    pub high_thresh: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low_thresh: 0.1,
            high_thresh: 0.2,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> bool {
        self.sigma > 0.0
            && 0.0 < self.low_thresh
            && self.low_thresh < self.high_thresh
            && self.high_thresh < 1.0
    }
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    // Symmetric reflection without edge repetition: -1 -> 1, n -> n-2.
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with a truncated kernel (half-width `⌈3σ⌉`) and
/// reflect padding. A constant image is returned unchanged.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage, ImagingError> {
    assert!(sigma > 0.0, "sigma must be positive");
    if img.width == 0 || img.height == 0 {
        return Err(ImagingError::EmptyImage);
    }
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for i in -half..=half {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let (w, h) = (img.width, img.height);
    let mut horiz = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let uu = reflect(u as isize + ki as isize - half, w);
                acc += k * img.data[v * w + uu];
            }
            horiz[v * w + u] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let vv = reflect(v as isize + ki as isize - half, h);
                acc += k * horiz[vv * w + u];
            }
            out[v * w + u] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data: out,
    })
}

/// Per-pixel Sobel responses: `gx` grows rightward, `gy` grows downward.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// Standard 3x3 Sobel gradients with reflect padding.
pub fn sobel_gradients(img: &GrayImage) -> Result<Gradients, ImagingError> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(ImagingError::TooSmall {
            width: w,
            height: h,
            min: 3,
        });
    }
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut magnitude = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for dv in -1isize..=1 {
                for du in -1isize..=1 {
                    let val = img.data[reflect(v as isize + dv, h) * w
                        + reflect(u as isize + du, w)];
                    // Sobel x: [-1 0 1; -2 0 2; -1 0 1], y is its transpose.
                    let wx = du as f64 * (2 - dv.abs()) as f64;
                    let wy = dv as f64 * (2 - du.abs()) as f64;
                    sx += wx * val;
                    sy += wy * val;
                }
            }
            let i = v * w + u;
            gx[i] = sx;
            gy[i] = sy;
            magnitude[i] = sx.hypot(sy);
        }
    }
    Ok(Gradients {
        width: w,
        height: h,
        gx,
        gy,
        magnitude,
    })
}

/// Full Canny pipeline: blur, Sobel, non-maximum suppression with 4-bin
/// direction quantization, double threshold scaled by the per-image maximum
/// magnitude, and hysteresis by 8-connected flood from strong pixels.
pub fn canny(img: &GrayImage, cfg: &CannyConfig) -> Result<BitMask, ImagingError> {
    assert!(cfg.validate(), "invalid canny config");
    let (w, h) = (img.width, img.height);
    if w < 7 || h < 7 {
        return Err(ImagingError::TooSmall {
            width: w,
            height: h,
            min: 7,
        });
    }
    let blurred = gaussian_blur(img, cfg.sigma)?;
    let grads = sobel_gradients(&blurred)?;

    // Absolute noise floor: constant images blur to values that differ by
    // a few ulps, which must not be scaled up into edges.
    let max_mag = grads.magnitude.iter().cloned().fold(0.0, f64::max);
    let mut mask = BitMask::empty(w, h, MaskResolution::Image);
    if max_mag <= 1e-9 {
        return Ok(mask);
    }
    let low = cfg.low_thresh * max_mag;
    let high = cfg.high_thresh * max_mag;

    // Non-maximum suppression: a pixel survives when its magnitude is not
    // exceeded by either neighbor along the quantized gradient direction.
    // The 1-pixel border is suppressed.
    let mut thin = vec![0.0; w * h];
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let i = v * w + u;
            let m = grads.magnitude[i];
            if m <= 0.0 {
                continue;
            }
            let mut angle = grads.gy[i].atan2(grads.gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (i - 1, i + 1)
            } else if angle < 67.5 {
                (i + w + 1, i - w - 1)
            } else if angle < 112.5 {
                (i - w, i + w)
            } else {
                (i + w - 1, i - w + 1)
            };
            if m >= grads.magnitude[n1] && m >= grads.magnitude[n2] {
                thin[i] = m;
            }
        }
    }

    // Hysteresis: flood weak pixels 8-connected to a strong seed.
    let mut stack = Vec::new();
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let i = v * w + u;
            if thin[i] >= high && !mask.bits[i] {
                mask.bits[i] = true;
                stack.push((u, v));
                while let Some((cu, cv)) = stack.pop() {
                    for dv in -1isize..=1 {
                        for du in -1isize..=1 {
                            if du == 0 && dv == 0 {
                                continue;
                            }
                            let nu = cu as isize + du;
                            let nv = cv as isize + dv;
                            if nu < 1
                                || nv < 1
                                || nu >= (w - 1) as isize
                                || nv >= (h - 1) as isize
                            {
                                continue;
                            }
                            let ni = nv as usize * w + nu as usize;
                            if thin[ni] >= low && !mask.bits[ni] {
                                mask.bits[ni] = true;
                                stack.push((nu as usize, nv as usize));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Dilate by a Euclidean disk: a cell is set iff some set input cell lies
/// within distance `radius`. `dilate(m, 0) == m`.
pub fn dilate(mask: &BitMask, radius: usize) -> BitMask {
    if radius == 0 {
        return mask.clone();
    }
    let r2 = (radius * radius) as isize;
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dv in -r..=r {
        for du in -r..=r {
            if du * du + dv * dv <= r2 {
                offsets.push((du, dv));
            }
        }
    }
    let mut out = BitMask::empty(mask.width, mask.height, mask.resolution);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            for &(du, dv) in &offsets {
                let nx = x as isize + du;
                let ny = y as isize + dv;
                if nx >= 0 && ny >= 0 && (nx as usize) < mask.width && (ny as usize) < mask.height
                {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

/// Max-pool an image-resolution mask down to the feature grid: output cell
/// `(i, j)` is set iff any bit in its `stride x stride` block is set.
pub fn downsample_mask(mask: &BitMask, stride: usize) -> BitMask {
    assert!(stride >= 1, "stride must be at least 1");
    let gw = mask.width.div_ceil(stride);
    let gh = mask.height.div_ceil(stride);
    let mut out = BitMask::empty(gw, gh, MaskResolution::FeatureGrid);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                out.set(x / stride, y / stride, true);
            }
        }
    }
    out
}

/// Read an 8-bit binary PGM (P5). Intensities are divided by the declared
/// maxval (255 for canonical files).
pub fn read_pgm(path: &Path) -> Result<GrayImage, ImagingError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImagingError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(ImagingError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(ImagingError::BadHeader("missing numeric field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| ImagingError::BadHeader("non-utf8 header".into()))?
            .parse()
            .map_err(|_| ImagingError::BadHeader("unparseable field".into()))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(ImagingError::EmptyImage);
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImagingError::BadHeader(format!("maxval {maxval}")));
    }
    // Single whitespace byte separates header from payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImagingError::BadHeader("missing payload separator".into()));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(ImagingError::Truncated);
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(GrayImage {
        width,
        height,
        data,
    })
}

/// Write an 8-bit binary PGM. Values are scaled by 255 and rounded.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), ImagingError> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Write a mask as a PGM overlay: 255 for set cells, 0 otherwise.
pub fn write_mask_pgm(path: &Path, mask: &BitMask) -> Result<(), ImagingError> {
    let img = GrayImage::new(
        mask.width,
        mask.height,
        mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    write_pgm(path, &img)
}

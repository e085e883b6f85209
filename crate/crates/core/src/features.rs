//! Scene-agnostic backbone: a deterministic stack of strided convolutions
//! mapping a grayscale image to a dense C x H' x W' feature grid, plus a
//! binary import/export path for features produced elsewhere.
//!
//! The backbone is untrained: seeded random convolution weights are an
//! adequate basis for desk-scale regression and keep every downstream test
//! exact. Each output cell anchors to the center pixel of its stride block.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::PixelPoint;
use crate::imaging::GrayImage;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} smaller than the {min} px receptive field")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("grid index ({i},{j}) outside {h}x{w} grid")]
    OutOfBounds {
        i: usize,
        j: usize,
        h: usize,
        w: usize,
    },
    #[error("layer spec yields stride {stride} and receptive field {rf}, config wants {want_stride}/{want_rf}")]
    BadLayerSpec {
        stride: usize,
        rf: usize,
        want_stride: usize,
        want_rf: usize,
    },
    #[error("bad magic bytes (expected {expected})")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("invalid dimensions in header: {0}")]
    DimMismatch(String),
    #[error("file truncated: wanted {wanted} payload bytes, found {found}")]
    TruncatedFile { wanted: usize, found: usize },
    #[error("trailing bytes after payload")]
    TrailingData,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense feature grid: `channels x grid_h x grid_w`, channel-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixels per grid cell in the source image.
    pub stride: usize,
    pub data: Vec<f32>,
    pub source_image_id: String,
}

impl FeatureMap {
    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.grid_h + i) * self.grid_w + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, value: f32) {
        self.data[(c * self.grid_h + i) * self.grid_w + j] = value;
    }

    /// Feature vector of one grid cell.
    pub fn cell_vector(&self, i: usize, j: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, i, j)).collect()
    }

    /// Center pixel of cell `(i, j)`: `(j*stride + stride/2, i*stride + stride/2)`.
    pub fn pixel_anchor(&self, i: usize, j: usize) -> Result<PixelPoint, FeatureError> {
        if i >= self.grid_h || j >= self.grid_w {
            return Err(FeatureError::OutOfBounds {
                i,
                j,
                h: self.grid_h,
                w: self.grid_w,
            });
        }
        Ok(feature_pixel_position(i, j, self.stride))
    }
}

/// Center pixel of grid cell `(i, j)` at the given stride.
pub fn feature_pixel_position(i: usize, j: usize, stride: usize) -> PixelPoint {
    PixelPoint::new(
        (j * stride + stride / 2) as f64,
        (i * stride + stride / 2) as f64,
    )
}

/// One convolution layer of the backbone stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Backbone configuration. The default layer spec realizes an 81 px
/// receptive field at total stride 8.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub stride: usize,
    pub receptive_field: usize,
    pub seed: u64,
    pub layers: Vec<ConvSpec>,
    /// Standardize each output channel over spatial positions (zero mean,
    /// unit variance, eps 1e-6). Image-wide statistics intentionally trade
    /// away strict receptive-field locality; disable for locality probes.
    pub standardize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 512,
            stride: 8,
            receptive_field: 81,
            seed: 0xB4C_B0,
            layers: vec![
                ConvSpec { out_channels: 16, kernel: 9, stride: 2 },
                ConvSpec { out_channels: 32, kernel: 9, stride: 2 },
                ConvSpec { out_channels: 64, kernel: 7, stride: 2 },
                ConvSpec { out_channels: 512, kernel: 5, stride: 1 },
            ],
            standardize: true,
        }
    }
}

impl BackboneConfig {
    pub fn with_channels(channels: usize) -> Self {
        let mut cfg = Self::default();
        cfg.channels = channels;
        cfg.layers.last_mut().unwrap().out_channels = channels;
        cfg
    }

    /// Receptive field and total stride implied by the layer spec:
    /// `rf = 1 + Σ (k_i − 1)·Π_{j<i} s_j`.
    pub fn implied_geometry(&self) -> (usize, usize) {
        let mut rf = 1;
        let mut stride = 1;
        for layer in &self.layers {
            rf += (layer.kernel - 1) * stride;
            stride *= layer.stride;
        }
        (rf, stride)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let (rf, stride) = self.implied_geometry();
        if rf != self.receptive_field
            || stride != self.stride
            || self.receptive_field % 2 == 0
            || self.layers.last().map(|l| l.out_channels) != Some(self.channels)
        {
            return Err(FeatureError::BadLayerSpec {
                stride,
                rf,
                want_stride: self.stride,
                want_rf: self.receptive_field,
            });
        }
        Ok(())
    }
}

struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    /// `[out][in][kv][ku]` flattened.
    weights: Vec<f64>,
}

/// The instantiated backbone: weights are generated once from the seed and
/// immutable afterwards; extraction is pure.
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self, FeatureError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        let mut in_channels = 1;
        for spec in &config.layers {
            let fan_in = in_channels * spec.kernel * spec.kernel;
            let bound = (1.0 / fan_in as f64).sqrt();
            let n = spec.out_channels * fan_in;
            let weights = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(ConvLayer {
                in_channels,
                out_channels: spec.out_channels,
                kernel: spec.kernel,
                stride: spec.stride,
                weights,
            });
            in_channels = spec.out_channels;
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// The image window cell `(i, j)` may draw on: the receptive field
    /// centered on `stride * index`, clipped to the image.
    pub fn receptive_field_bounds(
        &self,
        i: usize,
        j: usize,
        width: usize,
        height: usize,
    ) -> (usize, usize, usize, usize) {
        let half = (self.config.receptive_field / 2) as isize;
        let cu = (j * self.config.stride) as isize;
        let cv = (i * self.config.stride) as isize;
        (
            (cu - half).max(0) as usize,
            ((cu + half) as usize).min(width - 1),
            (cv - half).max(0) as usize,
            ((cv + half) as usize).min(height - 1),
        )
    }

    /// Fully convolutional forward pass; no explicit patch extraction.
    /// Hidden layers use tanh, the final layer is linear, then optional
    /// per-channel standardization.
    pub fn extract_features(
        &self,
        img: &GrayImage,
        image_id: &str,
    ) -> Result<FeatureMap, FeatureError> {
        let rf = self.config.receptive_field;
        if img.width < rf || img.height < rf {
            return Err(FeatureError::ImageTooSmall {
                width: img.width,
                height: img.height,
                min: rf,
            });
        }

        let mut act = img.data.clone();
        let mut width = img.width;
        let mut height = img.height;
        let mut channels = 1usize;
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let (out, ow, oh) = conv_forward(&act, channels, width, height, layer);
            channels = layer.out_channels;
            width = ow;
            height = oh;
            act = out;
            if li + 1 < n_layers {
                for v in &mut act {
                    *v = v.tanh();
                }
            }
        }

        debug_assert_eq!(width, img.width.div_ceil(self.config.stride));
        debug_assert_eq!(height, img.height.div_ceil(self.config.stride));

        if self.config.standardize {
            let cells = width * height;
            for c in 0..channels {
                let slice = &mut act[c * cells..(c + 1) * cells];
                let mean = slice.iter().sum::<f64>() / cells as f64;
                let var =
                    slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cells as f64;
                let denom = (var + 1e-6).sqrt();
                for v in slice {
                    *v = (*v - mean) / denom;
                }
            }
        }

        Ok(FeatureMap {
            channels,
            grid_h: height,
            grid_w: width,
            stride: self.config.stride,
            data: act.iter().map(|&v| v as f32).collect(),
            source_image_id: image_id.to_string(),
        })
    }
}

/// Zero-padded "same" convolution: output is `⌈n/s⌉` per dimension with the
/// pad split so the receptive field centers on `s * index`.
fn conv_forward(
    input: &[f64],
    in_channels: usize,
    width: usize,
    height: usize,
    layer: &ConvLayer,
) -> (Vec<f64>, usize, usize) {
    debug_assert_eq!(in_channels, layer.in_channels);
    let k = layer.kernel;
    let s = layer.stride;
    let ow = width.div_ceil(s);
    let oh = height.div_ceil(s);
    let pad = (k - 1) / 2;
    let cells_in = width * height;
    let mut out = vec![0.0; layer.out_channels * ow * oh];

    for oc in 0..layer.out_channels {
        let wbase = oc * in_channels * k * k;
        for oi in 0..oh {
            let v0 = (oi * s) as isize - pad as isize;
            for oj in 0..ow {
                let u0 = (oj * s) as isize - pad as isize;
                let mut acc = 0.0;
                for ic in 0..in_channels {
                    let ibase = ic * cells_in;
                    let kbase = wbase + ic * k * k;
                    for kv in 0..k {
                        let v = v0 + kv as isize;
                        if v < 0 || v >= height as isize {
                            continue;
                        }
                        let row = ibase + v as usize * width;
                        let krow = kbase + kv * k;
                        for ku in 0..k {
                            let u = u0 + ku as isize;
                            if u < 0 || u >= width as isize {
                                continue;
                            }
                            acc += layer.weights[krow + ku] * input[row + u as usize];
                        }
                    }
                }
                out[(oc * oh + oi) * ow + oj] = acc;
            }
        }
    }
    (out, ow, oh)
}

const FEATURE_MAGIC: &[u8; 4] = b"SCRF";
const FEATURE_VERSION: u16 = 1;

/// Write a feature map: magic "SCRF", version u16, C/H'/W'/stride u32,
/// then C*H'*W' little-endian f32 in channel-major order.
pub fn export_features(path: &Path, fmap: &FeatureMap) -> Result<(), FeatureError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(FEATURE_MAGIC)?;
    f.write_all(&FEATURE_VERSION.to_le_bytes())?;
    for dim in [fmap.channels, fmap.grid_h, fmap.grid_w, fmap.stride] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(fmap.data.len() * 4);
    for v in &fmap.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Read a feature map written by [`export_features`]. The source image id
/// is taken from the file stem.
pub fn import_features(path: &Path) -> Result<FeatureMap, FeatureError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header, payload) = parse_container(&bytes, FEATURE_MAGIC)?;
    let [channels, grid_h, grid_w, stride] = header;
    if channels == 0 || grid_h == 0 || grid_w == 0 || stride == 0 {
        return Err(FeatureError::DimMismatch(format!(
            "zero dimension in {channels}x{grid_h}x{grid_w} stride {stride}"
        )));
    }
    let n = channels
        .checked_mul(grid_h)
        .and_then(|x| x.checked_mul(grid_w))
        .ok_or_else(|| FeatureError::DimMismatch("dimension overflow".into()))?;
    let data = read_f32_payload(payload, n)?;
    Ok(FeatureMap {
        channels,
        grid_h,
        grid_w,
        stride,
        data,
        source_image_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

/// Shared container header: magic, version u16, four u32 fields.
pub(crate) fn parse_container<'a>(
    bytes: &'a [u8],
    magic: &'static [u8; 4],
) -> Result<([usize; 4], &'a [u8]), FeatureError> {
    if bytes.len() < 4 || &bytes[0..4] != magic {
        return Err(FeatureError::BadMagic {
            expected: std::str::from_utf8(magic).unwrap(),
        });
    }
    if bytes.len() < 6 + 16 {
        return Err(FeatureError::TruncatedFile {
            wanted: 22,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(FeatureError::BadVersion(version));
    }
    let mut header = [0usize; 4];
    for (idx, field) in header.iter_mut().enumerate() {
        let o = 6 + idx * 4;
        *field = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    }
    Ok((header, &bytes[22..]))
}

pub(crate) fn read_f32_payload(payload: &[u8], n: usize) -> Result<Vec<f32>, FeatureError> {
    let wanted = n * 4;
    if payload.len() < wanted {
        return Err(FeatureError::TruncatedFile {
            wanted,
            found: payload.len(),
        });
    }
    if payload.len() > wanted {
        return Err(FeatureError::TrailingData);
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(channels: usize, standardize: bool) -> BackboneConfig {
        BackboneConfig {
            channels,
            standardize,
            seed: 41,
            ..BackboneConfig::with_channels(channels)
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn default_layer_spec_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.implied_geometry(), (81, 8));
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_layer_spec_rejected() {
        let mut cfg = BackboneConfig::default();
        cfg.stride = 4;
        assert!(matches!(
            Backbone::new(cfg),
            Err(FeatureError::BadLayerSpec { .. })
        ));
    }

    #[test]
    fn shape_contract() {
        let backbone = Backbone::new(small_config(32, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (w, h) in [(96, 96), (128, 88), (81, 121)] {
            let img = random_image(&mut rng, w, h);
            let fmap = backbone.extract_features(&img, "t").unwrap();
            assert_eq!(fmap.channels, 32);
            assert_eq!(fmap.grid_w, w.div_ceil(8));
            assert_eq!(fmap.grid_h, h.div_ceil(8));
            assert!(fmap.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn grid_12x12_for_96px_image() {
        let backbone = Backbone::new(small_config(512, true)).unwrap();
        let img = GrayImage::filled(96, 96, 0.5);
        let fmap = backbone.extract_features(&img, "t").unwrap();
        assert_eq!((fmap.grid_h, fmap.grid_w, fmap.channels), (12, 12, 512));
    }

    #[test]
    fn image_too_small() {
        let backbone = Backbone::new(small_config(16, true)).unwrap();
        let img = GrayImage::filled(80, 96, 0.5);
        assert!(matches!(
            backbone.extract_features(&img, "t"),
            Err(FeatureError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 96, 96);
        let b1 = Backbone::new(small_config(32, true)).unwrap();
        let a = b1.extract_features(&img, "t").unwrap();
        let b = b1.extract_features(&img, "t").unwrap();
        assert_eq!(a, b);

        let mut other = small_config(32, true);
        other.seed = 42;
        let b2 = Backbone::new(other).unwrap();
        let c = b2.extract_features(&img, "t").unwrap();
        assert_ne!(a.data, c.data);
    }

    // Receptive-field locality probe: pairs of images identical inside the
    // reported window must produce identical features at that cell. Runs on
    // the unstandardized path; standardization is image-wide by design.
    #[test]
    fn locality_probe() {
        let backbone = Backbone::new(small_config(16, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (104, 96);
        let base = random_image(&mut rng, w, h);
        let fmap = backbone.extract_features(&base, "t").unwrap();

        for _ in 0..100 {
            let i = rng.gen_range(0..fmap.grid_h);
            let j = rng.gen_range(0..fmap.grid_w);
            let (u0, u1, v0, v1) = backbone.receptive_field_bounds(i, j, w, h);
            // Perturb a pixel strictly outside the window.
            let mut modified = base.clone();
            let mut changed = false;
            for _ in 0..50 {
                let pu = rng.gen_range(0..w);
                let pv = rng.gen_range(0..h);
                if pu < u0 || pu > u1 || pv < v0 || pv > v1 {
                    modified.set(pu, pv, rng.gen_range(0.0..1.0));
                    changed = true;
                    break;
                }
            }
            if !changed {
                continue;
            }
            let fmod = backbone.extract_features(&modified, "t").unwrap();
            for c in 0..fmap.channels {
                assert_eq!(
                    fmap.get(c, i, j),
                    fmod.get(c, i, j),
                    "cell ({i},{j}) channel {c} changed"
                );
            }
        }
    }

    #[test]
    fn receptive_field_width_is_81() {
        let backbone = Backbone::new(small_config(16, false)).unwrap();
        let (u0, u1, v0, v1) = backbone.receptive_field_bounds(6, 6, 200, 200);
        assert_eq!(u1 - u0 + 1, 81);
        assert_eq!(v1 - v0 + 1, 81);
        // Centered on stride * index.
        assert_eq!((u0 + u1) / 2, 48);
        assert_eq!((v0 + v1) / 2, 48);
    }

    #[test]
    fn pixel_anchor_positions() {
        assert_eq!(feature_pixel_position(0, 0, 8), PixelPoint::new(4.0, 4.0));
        assert_eq!(feature_pixel_position(2, 3, 8), PixelPoint::new(28.0, 20.0));

        let fmap = FeatureMap {
            channels: 1,
            grid_h: 4,
            grid_w: 5,
            stride: 8,
            data: vec![0.0; 20],
            source_image_id: String::new(),
        };
        // Cell containing the anchor is the cell itself.
        for i in 0..4 {
            for j in 0..5 {
                let p = fmap.pixel_anchor(i, j).unwrap();
                assert_eq!((p.u as usize / 8, p.v as usize / 8), (j, i));
            }
        }
        assert!(matches!(
            fmap.pixel_anchor(4, 0),
            Err(FeatureError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.scrf");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fmap = FeatureMap {
            channels: 6,
            grid_h: 5,
            grid_w: 7,
            stride: 8,
            data: (0..6 * 5 * 7).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
            source_image_id: "map".into(),
        };
        export_features(&path, &fmap).unwrap();
        let back = import_features(&path).unwrap();
        assert_eq!(back, fmap);
    }

    #[test]
    fn feature_file_errors() {
        let dir = tempfile::tempdir().unwrap();

        let bad_magic = dir.path().join("bad.scrf");
        std::fs::write(&bad_magic, b"NOPE\x01\x00junkjunkjunkjunkjunk").unwrap();
        assert!(matches!(
            import_features(&bad_magic),
            Err(FeatureError::BadMagic { .. })
        ));

        // Header claims more cells than the payload holds.
        let truncated = dir.path().join("short.scrf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SCRF");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        for dim in [4u32, 3, 3, 8] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&truncated, &bytes).unwrap();
        assert!(matches!(
            import_features(&truncated),
            Err(FeatureError::TruncatedFile { .. })
        ));

        let zero_dim = dir.path().join("zero.scrf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SCRF");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        for dim in [0u32, 3, 3, 8] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        std::fs::write(&zero_dim, &bytes).unwrap();
        assert!(matches!(
            import_features(&zero_dim),
            Err(FeatureError::DimMismatch(_))
        ));
    }
}

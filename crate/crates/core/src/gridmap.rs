//! Dense H×W×C maps with bilinear sampling and the `.gmap` file format.
//!
//! A `.gmap` file is the magic `GMAP`, then `H`, `W`, `C` as little-endian
//! `u32`, then `H·W·C` little-endian `f32` values in row-major, channel-last
//! order.

use std::path::Path;

use crate::camera::Pixel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GMAP";
const HEADER_LEN: usize = 16;

/// Coordinates this far past the last texel still count as inside, so that
/// round-off in backprojection/projection does not drop border pixels.
pub const EDGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Result of [`GridMap::bilinear_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSample {
    pub value: Vec<f64>,
    /// `∂value/∂(u, v)` per channel.
    pub grad: Vec<[f64; 2]>,
    /// False when the pixel was outside `[0, W−1]×[0, H−1]` and got clamped.
    pub valid: bool,
}

impl GridMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid map dimensions must be positive, got {height}×{width}×{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("grid map size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} values for {height}×{width}×{channels}, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a map from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for row in 0..height {
            for col in 0..width {
                for ch in 0..channels {
                    data.push(f(row, col, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &GridMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn same_extent(&self, other: &GridMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.offset(row, col) + ch]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = self.offset(row, col);
        &self.data[o..o + self.channels]
    }

    /// Sets one value; non-finite values are rejected.
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument("non-finite value".into()));
        }
        let o = self.offset(row, col);
        self.data[o + ch] = value;
        Ok(())
    }

    /// Applies `f` to every value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GridMap> {
        GridMap::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    /// Depth maps: one channel, strictly positive.
    pub fn validate_depth(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "depth map must have 1 channel, got {}",
                self.channels
            )));
        }
        match self.data.iter().find(|&&d| d <= 0.0) {
            Some(&d) => Err(Error::InvalidDepth(d)),
            None => Ok(()),
        }
    }

    /// Confidence maps: one channel, values in `[0, 1]`.
    pub fn validate_confidence(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "confidence map must have 1 channel, got {}",
                self.channels
            )));
        }
        match self.data.iter().find(|&&c| !(0.0..=1.0).contains(&c)) {
            Some(c) => Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0, 1]"
            ))),
            None => Ok(()),
        }
    }

    /// Per-pixel L2-normalized copy; all-zero pixels stay zero.
    pub fn normalized_per_pixel(&self) -> GridMap {
        let mut data = self.data.clone();
        for px in data.chunks_exact_mut(self.channels) {
            let norm = px.iter().map(|&x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in px.iter_mut() {
                    *x /= norm;
                }
            }
        }
        GridMap { data, ..*self }
    }

    pub fn in_bounds(&self, px: Pixel) -> bool {
        px.u >= -EDGE_TOLERANCE
            && px.v >= -EDGE_TOLERANCE
            && px.u <= (self.width - 1) as f64 + EDGE_TOLERANCE
            && px.v <= (self.height - 1) as f64 + EDGE_TOLERANCE
    }

    pub fn bilinear_sample(&self, px: Pixel) -> BilinearSample {
        let mut value = vec![0.0; self.channels];
        let mut grad = vec![[0.0; 2]; self.channels];
        let valid = self.sample_into(px, &mut value, Some(&mut grad));
        BilinearSample { value, grad, valid }
    }

    /// Bilinear sample written into caller-provided buffers.
    ///
    /// Out-of-range coordinates are clamped to the edge, the gradient is
    /// zeroed and `false` is returned.
    pub fn sample_into(&self, px: Pixel, value: &mut [f64], grad: Option<&mut [[f64; 2]]>) -> bool {
        debug_assert_eq!(value.len(), self.channels);
        let max_u = (self.width - 1) as f64;
        let max_v = (self.height - 1) as f64;
        let valid = self.in_bounds(px);
        let u = if px.u.is_nan() {
            0.0
        } else {
            px.u.clamp(0.0, max_u)
        };
        let v = if px.v.is_nan() {
            0.0
        } else {
            px.v.clamp(0.0, max_v)
        };

        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;

        let p00 = self.offset(y0, x0);
        let p01 = self.offset(y0, x1);
        let p10 = self.offset(y1, x0);
        let p11 = self.offset(y1, x1);
        for c in 0..self.channels {
            let a00 = self.data[p00 + c];
            let a01 = self.data[p01 + c];
            let a10 = self.data[p10 + c];
            let a11 = self.data[p11 + c];
            let top = (1.0 - ax) * a00 + ax * a01;
            let bottom = (1.0 - ax) * a10 + ax * a11;
            value[c] = (1.0 - ay) * top + ay * bottom;
        }
        if let Some(grad) = grad {
            debug_assert_eq!(grad.len(), self.channels);
            for c in 0..self.channels {
                if !valid {
                    grad[c] = [0.0, 0.0];
                    continue;
                }
                let a00 = self.data[p00 + c];
                let a01 = self.data[p01 + c];
                let a10 = self.data[p10 + c];
                let a11 = self.data[p11 + c];
                grad[c] = [
                    (1.0 - ay) * (a01 - a00) + ay * (a11 - a10),
                    (1.0 - ax) * (a10 - a00) + ax * (a11 - a01),
                ];
            }
        }
        valid
    }

    /// Serializes to `.gmap` bytes. Values are narrowed to `f32`; values
    /// outside the `f32` range are rejected.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for dim in [self.height, self.width, self.channels] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::InvalidArgument(format!("dimension {dim} exceeds u32")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for (i, &x) in self.data.iter().enumerate() {
            let narrow = x as f32;
            if !narrow.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "value {x} at index {i} does not fit in f32"
                )));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let format = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < MAGIC.len() {
            return Err(format(bytes.len(), "truncated magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(format(0, "bad magic, expected GMAP".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(format(bytes.len(), "truncated header".into()));
        }
        let dim = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        if height == 0 || width == 0 || channels == 0 {
            return Err(format(
                4,
                format!("zero dimension {height}×{width}×{channels}"),
            ));
        }
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| format(4, "dimensions overflow".into()))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(format(
                bytes.len(),
                format!("truncated data, expected {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(format(expected, "trailing bytes after data".into()));
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(format(HEADER_LEN + 4 * i, "non-finite value".into()));
            }
            data.push(x as f64);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_gridmap(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gridmap(self, path)
    }
}

pub fn load_gridmap(path: impl AsRef<Path>) -> Result<GridMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GridMap::from_bytes(&bytes)
}

pub fn save_gridmap(map: &GridMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map.to_bytes()?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_map() -> GridMap {
        GridMap::from_fn(24, 32, 3, |r, c, ch| {
            let (x, y) = (c as f64, r as f64);
            match ch {
                0 => (0.3 * x).sin() + (0.2 * y).cos(),
                1 => 0.05 * x * y - 0.1 * y,
                _ => (0.15 * x + 0.25 * y).sin(),
            }
        })
        .unwrap()
    }

    #[test]
    fn integer_samples_return_texels_exactly() {
        let map = smooth_map();
        for r in 0..map.height() {
            for c in 0..map.width() {
                let s = map.bilinear_sample(Pixel::new(c as f64, r as f64));
                assert!(s.valid);
                for ch in 0..3 {
                    assert_eq!(s.value[ch], map.get(r, c, ch));
                }
            }
        }
    }

    #[test]
    fn midpoint_is_average() {
        let map = GridMap::new(2, 2, 1, vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        assert_eq!(map.bilinear_sample(Pixel::new(0.5, 0.0)).value[0], 2.0);
        assert_eq!(map.bilinear_sample(Pixel::new(0.0, 0.5)).value[0], 3.0);
        assert_eq!(map.bilinear_sample(Pixel::new(0.5, 0.5)).value[0], 4.5);
    }

    #[test]
    fn out_of_bounds_is_clamped_and_flagged() {
        let map = GridMap::new(2, 2, 1, vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let s = map.bilinear_sample(Pixel::new(-3.0, 0.0));
        assert!(!s.valid);
        assert_eq!(s.value[0], 1.0);
        assert_eq!(s.grad[0], [0.0, 0.0]);
        let s = map.bilinear_sample(Pixel::new(1.0, 7.0));
        assert!(!s.valid);
        assert_eq!(s.value[0], 9.0);
        let s = map.bilinear_sample(Pixel::new(f64::NAN, 0.0));
        assert!(!s.valid);
        // the far edge itself is in range
        let s = map.bilinear_sample(Pixel::new(1.0, 1.0));
        assert!(s.valid);
        assert_eq!(s.value[0], 9.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let map = smooth_map();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 1000 {
            let u = rng.random_range(1.0..(map.width() - 2) as f64);
            let v = rng.random_range(1.0..(map.height() - 2) as f64);
            // the bilinear surface is only C⁰ across texel boundaries
            if (u - h).floor() != (u + h).floor() || (v - h).floor() != (v + h).floor() {
                continue;
            }
            checked += 1;
            let s = map.bilinear_sample(Pixel::new(u, v));
            for ch in 0..3 {
                let du = (map.bilinear_sample(Pixel::new(u + h, v)).value[ch]
                    - map.bilinear_sample(Pixel::new(u - h, v)).value[ch])
                    / (2.0 * h);
                let dv = (map.bilinear_sample(Pixel::new(u, v + h)).value[ch]
                    - map.bilinear_sample(Pixel::new(u, v - h)).value[ch])
                    / (2.0 * h);
                assert!((s.grad[ch][0] - du).abs() < 1e-4);
                assert!((s.grad[ch][1] - dv).abs() < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn affine_maps_are_reproduced(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -5.0f64..5.0,
                                      u in 0.0f64..15.0, v in 0.0f64..11.0) {
            let map = GridMap::from_fn(12, 16, 1, |r, col, _| a * col as f64 + b * r as f64 + c).unwrap();
            let s = map.bilinear_sample(Pixel::new(u, v));
            prop_assert!((s.value[0] - (a * u + b * v + c)).abs() < 1e-12);
            prop_assert!((s.grad[0][0] - a).abs() < 1e-12);
            prop_assert!((s.grad[0][1] - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_map_round_trips() {
        let map = GridMap::zeros(2, 2, 1).unwrap();
        let bytes = map.to_bytes().unwrap();
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(GridMap::from_bytes(&bytes).unwrap(), map);
    }

    #[test]
    fn header_only_is_truncated() {
        let map = GridMap::zeros(2, 2, 1).unwrap();
        let bytes = &map.to_bytes().unwrap()[..16];
        match GridMap::from_bytes(bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(
            GridMap::from_bytes(b"GMA"),
            Err(Error::Format { offset: 3, .. })
        ));
        assert!(matches!(
            GridMap::from_bytes(b"PNG\x00\x00\x00\x00\x00"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = GridMap::zeros(1, 1, 1).unwrap().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            GridMap::from_bytes(&bytes),
            Err(Error::Format { offset: 20, .. })
        ));
        let mut bytes = GridMap::zeros(1, 2, 1).unwrap().to_bytes().unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            GridMap::from_bytes(&bytes),
            Err(Error::Format { offset: 20, .. })
        ));
    }

    #[test]
    fn large_random_map_round_trips_through_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map =
            GridMap::from_fn(192, 640, 3, |_, _, _| rng.random_range(-1e3f32..1e3) as f64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.gmap");
        save_gridmap(&map, &path).unwrap();
        let loaded = load_gridmap(&path).unwrap();
        assert_eq!(
            loaded
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>(),
            map.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let path2 = dir.path().join("again.gmap");
        save_gridmap(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn values_outside_f32_are_not_saved() {
        let map = GridMap::new(1, 1, 1, vec![1e300]).unwrap();
        assert!(map.to_bytes().is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_gridmap("/nonexistent/depth.gmap").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/depth.gmap"));
    }

    #[test]
    fn construction_checks() {
        assert!(GridMap::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(GridMap::new(1, 1, 1, vec![f64::INFINITY]).is_err());
        let depth = GridMap::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            depth.validate_depth(),
            Err(Error::InvalidDepth(_))
        ));
        let conf = GridMap::new(1, 2, 1, vec![0.5, 1.5]).unwrap();
        assert!(conf.validate_confidence().is_err());
        assert!(GridMap::new(1, 2, 1, vec![0.0, 1.0])
            .unwrap()
            .validate_confidence()
            .is_ok());
    }

    #[test]
    fn per_pixel_normalization() {
        let map = GridMap::new(1, 2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = map.normalized_per_pixel();
        assert_eq!(n.pixel(0, 0), &[0.6, 0.8]);
        assert_eq!(n.pixel(0, 1), &[0.0, 0.0]);
    }
}

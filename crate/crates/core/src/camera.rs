//! Pinhole camera model and the geometric blocks of the alignment Jacobian.
//!
//! Pixel coordinates are continuous with `(0, 0)` at the center of the
//! top-left texel, matching [`crate::gridmap`] sampling.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::hat;

/// Points closer than this to the image plane are treated as behind the camera.
pub const DEFAULT_Z_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidArgument(
                "principal point must be finite".into(),
            ));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 2×2, got {}×{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Pixel> {
        project(p, self)
    }

    pub fn backproject(&self, px: Pixel, depth: f64) -> Result<Vector3<f64>> {
        backproject(px, depth, self)
    }

    /// Parses the one-line text form `fx fy cx cy width height`.
    pub fn parse(text: &str) -> Result<Self> {
        let line = text
            .lines()
            .enumerate()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or(Error::Parse {
                line: 1,
                message: "empty intrinsics file".into(),
            })?;
        let (idx, line) = line;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |message: String| Error::Parse {
            line: idx + 1,
            message,
        };
        if tokens.len() != 6 {
            return Err(parse_err(format!(
                "expected 6 values, found {}",
                tokens.len()
            )));
        }
        let mut f = [0.0; 4];
        for (slot, tok) in f.iter_mut().zip(&tokens[..4]) {
            *slot = tok
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad number {tok:?}: {e}")))?;
        }
        let width = tokens[4]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad width {:?}: {e}", tokens[4])))?;
        let height = tokens[5]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad height {:?}: {e}", tokens[5])))?;
        Self::new(f[0], f[1], f[2], f[3], width, height)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Pixel> {
    project_with_min(p, k, DEFAULT_Z_MIN)
}

pub fn project_with_min(p: &Vector3<f64>, k: &CameraIntrinsics, z_min: f64) -> Result<Pixel> {
    if !(p.z > z_min) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Pixel {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
    })
}

pub fn backproject(px: Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(Vector3::new(
        (px.u - k.cx) / k.fx * depth,
        (px.v - k.cy) / k.fy * depth,
        depth,
    ))
}

/// `∂(u, v)/∂(x, y, z)` of [`project`].
pub fn projection_jacobian(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Matrix2x3<f64>> {
    if !(p.z > DEFAULT_Z_MIN) {
        return Err(Error::BehindCamera { z: p.z });
    }
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    Ok(Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * p.x * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * p.y * inv_z2,
    ))
}

/// `∂(exp(σ^)·s)/∂σ` at `σ = 0`: `[−[s]ₓ | I₃]`.
pub fn transform_jacobian(p: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(p)));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    j
}

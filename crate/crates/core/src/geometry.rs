//! Gaze angle representations and error measures.
//!
//! Gaze is carried as a `(pitch, yaw)` pair in radians. The 3D convention is
//! `v = (-cos p * sin y, -sin p, -cos p * cos y)`, so `(0, 0)` looks down the
//! negative z axis (into the camera) and positive pitch looks up.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeDirection {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeDirection {
    /// Builds a direction, rejecting NaN and infinite components.
    pub fn new(pitch: f64, yaw: f64) -> Result<Self> {
        let g = Self { pitch, yaw };
        g.check_finite()?;
        Ok(g)
    }

    pub const fn zero() -> Self {
        Self { pitch: 0.0, yaw: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.pitch.is_finite() && self.yaw.is_finite()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GazeError::invalid(format!(
                "gaze direction must be finite, got ({}, {})",
                self.pitch, self.yaw
            )))
        }
    }

    /// Canonical angles describing the same 3D direction, with
    /// pitch in `[-pi/2, pi/2]` and yaw in `[-pi, pi]`.
    pub fn normalized(&self) -> Result<Self> {
        let v = pitch_yaw_to_unit_vector(*self)?;
        Ok(v.to_pitch_yaw())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.pitch, self.yaw]
    }
}

impl From<[f64; 2]> for GazeDirection {
    fn from([pitch, yaw]: [f64; 2]) -> Self {
        Self { pitch, yaw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVector3 {
    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Inverse of [`pitch_yaw_to_unit_vector`].
    pub fn to_pitch_yaw(&self) -> GazeDirection {
        let pitch = (-self.y).clamp(-1.0, 1.0).asin();
        let yaw = if self.x == 0.0 && self.z == 0.0 {
            0.0
        } else {
            (-self.x).atan2(-self.z)
        };
        GazeDirection {
            pitch: pitch.clamp(-FRAC_PI_2, FRAC_PI_2),
            yaw: yaw.clamp(-PI, PI),
        }
    }
}

pub fn pitch_yaw_to_unit_vector(g: GazeDirection) -> Result<UnitVector3> {
    g.check_finite()?;
    let (sp, cp) = g.pitch.sin_cos();
    let (sy, cy) = g.yaw.sin_cos();
    Ok(UnitVector3 {
        x: -cp * sy,
        y: -sp,
        z: -cp * cy,
    })
}

/// Angle between two gaze directions in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(|a x b|, a . b)`, which equals `acos(clamp(a . b))` but
/// stays exact at 0 and 180 degrees where `acos` loses half the mantissa.
pub fn angular_error(pred: GazeDirection, truth: GazeDirection) -> Result<f64> {
    let a = pitch_yaw_to_unit_vector(pred)?;
    let b = pitch_yaw_to_unit_vector(truth)?;
    let cross = UnitVector3 {
        x: a.y * b.z - a.z * b.y,
        y: a.z * b.x - a.x * b.z,
        z: a.x * b.y - a.y * b.x,
    };
    Ok(cross.norm().atan2(a.dot(&b)).to_degrees())
}

/// `|p1 - p2| + |y1 - y2|` in radians.
pub fn gaze_l1_difference(a: GazeDirection, b: GazeDirection) -> Result<f64> {
    a.check_finite()?;
    b.check_finite()?;
    Ok((a.pitch - b.pitch).abs() + (a.yaw - b.yaw).abs())
}

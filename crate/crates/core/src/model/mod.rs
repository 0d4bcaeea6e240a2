//! Hierarchical late-fusion encoder and its four heads.
//!
//! Three first-level LSTM cells consume the visual feature, the stacked
//! accelerations and the stacked angular velocities of each frame. Their hidden
//! states are concatenated into a fusion cell whose hidden output `h_t` feeds
//! the trajectory generator, the discriminator, the initial-state classifier
//! and the success monitor.

mod forward;
mod params;

pub use forward::{
    argmax, classify, discriminate, encode_pose, encode_step, generate, lstm_step, mlp_forward, monitor,
    EncoderState, Model, Normalizer, Prediction, StepInputs, StepPrediction,
};
pub use params::{EncoderParams, Group, Linear, LstmCell, Mlp, ModelParams, Params};

use crate::numcore::NumError;

pub const DEG_PER_RAD: f64 = 180.0 / std::f64::consts::PI;
pub const RAD_PER_DEG: f64 = std::f64::consts::PI / 180.0;

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Per-modality cells feeding a fusion cell.
    Hier,
    /// Two stacked cells over the raw concatenation of all streams.
    Flat2,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Hier => "hier",
            EncoderKind::Flat2 => "flat2",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hier" => Ok(Self::Hier),
            "flat2" => Ok(Self::Flat2),
            other => Err(format!("unknown encoder '{other}' (expected hier | flat2)")),
        }
    }
}

/// Layer sizes. The shape of every parameter is a pure function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub d_img: usize,
    /// IMU samples per frame window.
    pub imu_samples: usize,
    pub hidden_img: usize,
    pub hidden_pos: usize,
    pub hidden_rot: usize,
    pub hidden_fuse: usize,
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub monitor_width: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Sizes used for the full-resolution model (2048-d visual features).
    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderKind::Hier,
            d_img: 2048,
            imu_samples: 38,
            hidden_img: 512,
            hidden_pos: 128,
            hidden_rot: 128,
            hidden_fuse: 512,
            generator_width: 128,
            discriminator_width: 128,
            monitor_width: 256,
            num_classes: 36,
        }
    }

    /// Reduced sizes that train on one CPU core in minutes.
    pub fn desk_scale() -> Self {
        Self {
            encoder: EncoderKind::Hier,
            d_img: 32,
            imu_samples: 38,
            hidden_img: 64,
            hidden_pos: 16,
            hidden_rot: 16,
            hidden_fuse: 64,
            generator_width: 32,
            discriminator_width: 32,
            monitor_width: 64,
            num_classes: 36,
        }
    }

    /// Length of each IMU stream (`3N`).
    pub fn imu_stream_len(&self) -> usize {
        3 * self.imu_samples
    }

    pub fn validate(&self) -> Result<(), NumError> {
        let sizes = [
            self.d_img,
            self.imu_samples,
            self.hidden_img,
            self.hidden_pos,
            self.hidden_rot,
            self.hidden_fuse,
            self.generator_width,
            self.discriminator_width,
            self.monitor_width,
            self.num_classes,
        ];
        if sizes.contains(&0) {
            return Err(NumError::Shape(format!("model sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

/// Inertial samples between two consecutive camera frames. Each sample holds
/// acceleration (m/s²) then angular velocity (deg/s), each along x, y, z.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    pub samples: Vec<[f64; 6]>,
}

impl ImuWindow {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splits a window into the stacked accelerations and stacked angular velocities.
pub fn split_imu(window: &ImuWindow) -> (Vec<f64>, Vec<f64>) {
    let mut accel = Vec::with_capacity(3 * window.len());
    let mut gyro = Vec::with_capacity(3 * window.len());
    for s in &window.samples {
        accel.extend_from_slice(&s[..3]);
        gyro.extend_from_slice(&s[3..]);
    }
    (accel, gyro)
}

/// Wrist pose in world coordinates: position in meters, Euler angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub position: [f64; 3],
    pub rotation: [f64; 3],
}

impl Pose {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self { position: [v[0], v[1], v[2]], rotation: [v[3], v[4], v[5]] }
    }

    pub fn to_array(self) -> [f64; 6] {
        let [px, py, pz] = self.position;
        let [rx, ry, rz] = self.rotation;
        [px, py, pz, rx, ry, rz]
    }

    /// Same pose with every rotation component in `[0, 360)`.
    pub fn wrapped(self) -> Self {
        Self { position: self.position, rotation: self.rotation.map(wrap_degrees) }
    }
}

pub fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// One synchronized time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub feature: Vec<f64>,
    pub imu: ImuWindow,
    pub pose: Pose,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_single_sample() {
        let w = ImuWindow { samples: vec![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]] };
        let (a, b) = split_imu(&w);
        assert_eq!(a, vec![1.0, 2.0, 3.0]);
        assert_eq!(b, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn split_default_window_lengths() {
        let w = ImuWindow { samples: vec![[0.0; 6]; 38] };
        let (a, b) = split_imu(&w);
        assert_eq!((a.len(), b.len()), (114, 114));
    }

    #[test]
    fn split_preserves_sample_order() {
        let w = ImuWindow { samples: (0..4).map(|k| [k as f64, 0., 0., 0., 0., -(k as f64)]).collect() };
        let (a, b) = split_imu(&w);
        assert_eq!(a.iter().step_by(3).copied().collect::<Vec<_>>(), vec![0., 1., 2., 3.]);
        assert_eq!(b.iter().skip(2).step_by(3).copied().collect::<Vec<_>>(), vec![0., -1., -2., -3.]);
    }

    #[test]
    fn wrapping_degrees() {
        assert_eq!(wrap_degrees(361.0), 1.0);
        assert_eq!(wrap_degrees(-1.0), 359.0);
        assert_eq!(wrap_degrees(-1e-18), 0.0);
        assert_eq!(wrap_degrees(720.0), 0.0);
    }
}

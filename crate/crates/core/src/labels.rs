//! Labeling strategies and the label sets attached to each image.
//!
//! Five strategies are supported: image-plane observables (`delta`, `rho`),
//! and spherical or Cartesian position coordinates in either the inertial
//! `W` frame or the body-fixed `AS` frame. Spherical labels feed the network
//! as the adimensional `(sin phi1, cos phi1)` pair plus `phi2` and `rho`,
//! so their output size is 4 instead of 3.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference frame for position labels.
///
/// `W` is inertial and body-centered: X toward the Sun's projection in the
/// equatorial plane, Z along the spin axis. `AS` is body-fixed, a rigid
/// rotation of `W` about Z by the body's rotation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    W,
    AS,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Frame::W => write!(f, "W"),
            Frame::AS => write!(f, "AS"),
        }
    }
}

/// One of the five labeling strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelStrategy {
    /// Optical observables: pixel offset `delta = CoF - CoB` plus range.
    DeltaRho,
    /// (phi1, phi2, rho) in the given frame.
    Spherical(Frame),
    /// (X, Y, Z) in the given frame.
    Cartesian(Frame),
}

impl LabelStrategy {
    pub const ALL: [LabelStrategy; 5] = [
        LabelStrategy::DeltaRho,
        LabelStrategy::Spherical(Frame::AS),
        LabelStrategy::Cartesian(Frame::AS),
        LabelStrategy::Spherical(Frame::W),
        LabelStrategy::Cartesian(Frame::W),
    ];

    /// Network output size: 4 for spherical labels (sin/cos split), else 3.
    pub fn output_size(&self) -> usize {
        match self {
            LabelStrategy::Spherical(_) => 4,
            _ => 3,
        }
    }

    /// Grouping used when sharing encoders across datasets: observables,
    /// AS-frame, or W-frame, merging spherical and Cartesian coordinates.
    pub fn frame_group(&self) -> FrameGroup {
        match self {
            LabelStrategy::DeltaRho => FrameGroup::Observables,
            LabelStrategy::Spherical(Frame::AS) | LabelStrategy::Cartesian(Frame::AS) => {
                FrameGroup::As
            }
            LabelStrategy::Spherical(Frame::W) | LabelStrategy::Cartesian(Frame::W) => {
                FrameGroup::W
            }
        }
    }

    /// Short tag used in dataset ids and file names.
    pub fn tag(&self) -> &'static str {
        match self {
            LabelStrategy::DeltaRho => "deltarho",
            LabelStrategy::Spherical(Frame::AS) => "as-sph",
            LabelStrategy::Cartesian(Frame::AS) => "as-cart",
            LabelStrategy::Spherical(Frame::W) => "w-sph",
            LabelStrategy::Cartesian(Frame::W) => "w-cart",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "deltarho" => Ok(LabelStrategy::DeltaRho),
            "as-sph" => Ok(LabelStrategy::Spherical(Frame::AS)),
            "as-cart" => Ok(LabelStrategy::Cartesian(Frame::AS)),
            "w-sph" => Ok(LabelStrategy::Spherical(Frame::W)),
            "w-cart" => Ok(LabelStrategy::Cartesian(Frame::W)),
            other => Err(Error::invalid(format!("unknown label strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for LabelStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Encoder-sharing groups for hybrid models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameGroup {
    Observables,
    As,
    W,
}

/// Labels carried by one image under a given strategy.
///
/// Spatial units follow the space the labels live in: pixels and km in S0,
/// scaled by `128/gamma` in S2. Angles are degrees in every space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelSet {
    DeltaRho {
        /// CoF - CoB in UV pixels.
        delta: [f64; 2],
        rho: f64,
    },
    Spherical {
        frame: Frame,
        phi1_deg: f64,
        phi2_deg: f64,
        rho: f64,
    },
    Cartesian {
        frame: Frame,
        pos: [f64; 3],
    },
}

impl LabelSet {
    pub fn strategy(&self) -> LabelStrategy {
        match self {
            LabelSet::DeltaRho { .. } => LabelStrategy::DeltaRho,
            LabelSet::Spherical { frame, .. } => LabelStrategy::Spherical(*frame),
            LabelSet::Cartesian { frame, .. } => LabelStrategy::Cartesian(*frame),
        }
    }

    /// Target vector fed to the regressors. Spherical labels become
    /// `(sin phi1, cos phi1, phi2, rho)`.
    pub fn target_vector(&self) -> Vec<f64> {
        match self {
            LabelSet::DeltaRho { delta, rho } => vec![delta[0], delta[1], *rho],
            LabelSet::Spherical {
                phi1_deg,
                phi2_deg,
                rho,
                ..
            } => {
                let p1 = phi1_deg.to_radians();
                vec![p1.sin(), p1.cos(), *phi2_deg, *rho]
            }
            LabelSet::Cartesian { pos, .. } => pos.to_vec(),
        }
    }

    /// Rebuilds a label set from a raw regressor output vector.
    /// The azimuth comes back through `atan2(sin, cos)`, which tolerates
    /// predictions that are not exactly on the unit circle.
    pub fn from_target_vector(strategy: LabelStrategy, v: &[f64]) -> Result<Self> {
        let need = strategy.output_size();
        if v.len() != need {
            return Err(Error::ShapeMismatch(format!(
                "strategy {strategy} expects {need} outputs, got {}",
                v.len()
            )));
        }
        Ok(match strategy {
            LabelStrategy::DeltaRho => LabelSet::DeltaRho {
                delta: [v[0], v[1]],
                rho: v[2],
            },
            LabelStrategy::Spherical(frame) => LabelSet::Spherical {
                frame,
                phi1_deg: v[0].atan2(v[1]).to_degrees(),
                phi2_deg: v[2],
                rho: v[3],
            },
            LabelStrategy::Cartesian(frame) => LabelSet::Cartesian {
                frame,
                pos: [v[0], v[1], v[2]],
            },
        })
    }

    /// Scales the spatial components by `factor`, leaving angles alone.
    /// `factor = 128/gamma` maps S1 labels to S2; `gamma/128` inverts.
    pub fn scale_spatial(&self, factor: f64) -> LabelSet {
        match self {
            LabelSet::DeltaRho { delta, rho } => LabelSet::DeltaRho {
                delta: [delta[0] * factor, delta[1] * factor],
                rho: rho * factor,
            },
            LabelSet::Spherical {
                frame,
                phi1_deg,
                phi2_deg,
                rho,
            } => LabelSet::Spherical {
                frame: *frame,
                phi1_deg: *phi1_deg,
                phi2_deg: *phi2_deg,
                rho: rho * factor,
            },
            LabelSet::Cartesian { frame, pos } => LabelSet::Cartesian {
                frame: *frame,
                pos: [pos[0] * factor, pos[1] * factor, pos[2] * factor],
            },
        }
    }

    /// Maximum absolute componentwise difference against `other`, treating
    /// the two sets as raw numbers. Panics if the strategies differ.
    pub fn max_abs_diff(&self, other: &LabelSet) -> f64 {
        let a = self.raw_components();
        let b = other.raw_components();
        assert_eq!(self.strategy(), other.strategy(), "strategy mismatch");
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn raw_components(&self) -> Vec<f64> {
        match self {
            LabelSet::DeltaRho { delta, rho } => vec![delta[0], delta[1], *rho],
            LabelSet::Spherical {
                phi1_deg,
                phi2_deg,
                rho,
                ..
            } => vec![*phi1_deg, *phi2_deg, *rho],
            LabelSet::Cartesian { pos, .. } => pos.to_vec(),
        }
    }
}

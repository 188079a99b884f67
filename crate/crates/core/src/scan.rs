//! Labeled point clouds.

use thiserror::Error;

use crate::se3::{Pose, Vec3};

/// Semantic class index. Class 0 is reserved for "unlabeled".
pub type ClassId = u16;

pub const UNLABELED: ClassId = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScanError {
    #[error("column length mismatch: {points} points but {other} {what}")]
    LengthMismatch {
        points: usize,
        other: usize,
        what: &'static str,
    },
    #[error("relative timestamp {0} outside [0, 1]")]
    TimeOutOfRange(f64),
}

/// One LiDAR frame as parallel columns.
///
/// Either every point carries a relative timestamp or none does.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scan {
    points: Vec<Vec3>,
    classes: Vec<ClassId>,
    times: Option<Vec<f64>>,
}

impl Scan {
    /// Unlabeled, untimed scan.
    pub fn from_points(points: Vec<Vec3>) -> Self {
        let classes = vec![UNLABELED; points.len()];
        Self {
            points,
            classes,
            times: None,
        }
    }

    pub fn new(
        points: Vec<Vec3>,
        classes: Vec<ClassId>,
        times: Option<Vec<f64>>,
    ) -> Result<Self, ScanError> {
        if classes.len() != points.len() {
            return Err(ScanError::LengthMismatch {
                points: points.len(),
                other: classes.len(),
                what: "classes",
            });
        }
        if let Some(t) = &times {
            if t.len() != points.len() {
                return Err(ScanError::LengthMismatch {
                    points: points.len(),
                    other: t.len(),
                    what: "timestamps",
                });
            }
            if let Some(bad) = t.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(ScanError::TimeOutOfRange(*bad));
            }
        }
        Ok(Self {
            points,
            classes,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn times(&self) -> Option<&[f64]> {
        self.times.as_deref()
    }

    pub fn set_classes(&mut self, classes: Vec<ClassId>) -> Result<(), ScanError> {
        if classes.len() != self.points.len() {
            return Err(ScanError::LengthMismatch {
                points: self.points.len(),
                other: classes.len(),
                what: "classes",
            });
        }
        self.classes = classes;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec3, ClassId)> + '_ {
        self.points.iter().zip(self.classes.iter().copied())
    }

    pub fn transformed(&self, pose: &Pose) -> Scan {
        Scan {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            classes: self.classes.clone(),
            times: self.times.clone(),
        }
    }

    pub(crate) fn from_parts_unchecked(
        points: Vec<Vec3>,
        classes: Vec<ClassId>,
        times: Option<Vec<f64>>,
    ) -> Self {
        debug_assert_eq!(points.len(), classes.len());
        Self {
            points,
            classes,
            times,
        }
    }
}

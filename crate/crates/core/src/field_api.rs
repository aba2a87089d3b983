//! The interface extraction and metrics consume: anything that can report a
//! center probability (with its spatial gradient) and attributes at points.

use crate::gs_model::Attributes;
use crate::math::Vec3;

pub trait GaussianField {
    /// Probability that each point is a Gaussian center.
    fn probability(&self, points: &[Vec3]) -> Vec<f64>;

    /// Probability and its gradient with respect to position.
    fn probability_and_gradient(&self, points: &[Vec3]) -> Vec<(f64, Vec3)>;

    /// Color, rotation, scale and opacity at each point.
    fn attributes(&self, points: &[Vec3]) -> Vec<Attributes>;
}

impl<F: GaussianField + ?Sized> GaussianField for &F {
    fn probability(&self, points: &[Vec3]) -> Vec<f64> {
        (**self).probability(points)
    }

    fn probability_and_gradient(&self, points: &[Vec3]) -> Vec<(f64, Vec3)> {
        (**self).probability_and_gradient(points)
    }

    fn attributes(&self, points: &[Vec3]) -> Vec<Attributes> {
        (**self).attributes(points)
    }
}

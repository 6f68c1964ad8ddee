//! Transport-based tomography on disk domains.
//!
//! The crate solves the stationary linear transport equation on a disk with
//! piecewise-constant absorption and scattering, propagates a prescribed
//! discontinuity of the incoming boundary data through the medium, measures
//! the jump it leaves in the outgoing trace, and turns the measured jumps
//! into line integrals of the attenuation coefficient that a filtered back
//! projection can invert. A thin slice reduction maps piecewise-constant
//! ball media in 3D onto equivalent disk problems.

pub mod discontinuity;
pub mod geometry;
pub mod media;
pub mod tomography;
pub mod transport;

//! Pseudo-label quality processing for semi-supervised instance segmentation.
//!
//! The pipeline scores teacher predictions ([`quality`]), filters them with
//! independent class/mask thresholds ([`filtering`]), corrects categories with
//! an external classifier ([`correction`]) and trains the student with an
//! uncertainty-weighted mask loss ([`loss`], [`matching`]). [`sim`] wires all of
//! it into a seeded teacher-student benchmark, and [`eval`] / [`io`] provide the
//! analytics and file formats used by the command-line tool.

pub mod correction;
pub mod error;
pub mod eval;
pub mod filtering;
pub mod gradcheck;
pub mod instance;
pub mod io;
pub mod loss;
pub mod matching;
pub mod quality;
pub mod sim;

pub use error::{Error, Result};

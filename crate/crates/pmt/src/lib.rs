//! Progressive mean-teacher semi-supervised segmentation at desk scale.
//!
//! Two student/teacher network pairs co-train on a shared batch stream while
//! a scheduler keeps a fixed iteration gap between them; the lagging model
//! learns from pseudo-labels the leading one produces, filtered by a
//! per-iteration quality gate and aligned on disagreement regions. Everything
//! needed to run and measure that — tensor autodiff, a small encoder–decoder
//! network, losses and schedules, the training engine, a synthetic dataset,
//! surface-distance metrics, and a config-driven CLI — lives in this crate.

pub mod gradcore;
pub mod harness;
pub mod losses;
pub mod progressive;
pub mod seeding;
pub mod segmetrics;
pub mod segnet;
pub mod synthdata;
pub mod verify;

pub mod book;

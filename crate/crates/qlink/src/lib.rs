//! Desk-scale model of an entanglement-based QKD link over telecom fiber.
//!
//! The crate combines four layers that together reproduce the behaviour of a
//! polarisation-entangled BBM92 system:
//!
//! * [`polmath`] — Stokes/Poincaré algebra, singlet correlations, visibility.
//! * [`linksim`] — seeded event-level Monte Carlo of the optical chain
//!   (source, fiber, trigger channel, gated detectors, coincidences).
//! * [`analytic`] — the closed-form rate/QBER model used for curve generation
//!   and as the oracle the Monte Carlo is validated against.
//! * [`keystack`] + [`netchan`] + [`endpoint`] — the complete two-party key
//!   distillation stack (sifting, CASCADE, Toeplitz privacy amplification,
//!   evaluation-hash authentication) over a framed classical channel.
//!
//! On top of those sit the automation layer: a rate-level [`plant`] of the
//! same optics, the four stabilisation routines in [`control`], the
//! management state machine in [`mgmt`], and the long-run [`campaign`]
//! driver. [`scenario`] parses the flat key=value scenario files and
//! [`output`] writes the CSV/binary artifacts.

pub mod analytic;
pub mod campaign;
pub mod control;
pub mod endpoint;
pub mod keystack;
pub mod linksim;
pub mod mgmt;
pub mod netchan;
pub mod output;
pub mod plant;
pub mod polmath;
pub mod scenario;

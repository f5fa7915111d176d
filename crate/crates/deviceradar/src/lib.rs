//! IoT device fingerprinting from ISP-visible packet metadata.
//!
//! The pipeline turns a device's packet trace into a deployable rule set for
//! a match-action data plane:
//!
//! 1. [`embedding`]: skip-gram vectors over directional packet sizes.
//! 2. [`matrix`]: truncated cosine similarities between the device's sizes.
//! 3. [`keypackets`]: periodic "key" sizes mined per destination service.
//! 4. [`fingerprint`]: per-window feature vectors and a CART classifier.
//! 5. [`compiler`]: quantized match-action tables and range rules.
//! 6. [`sim`]: an integer-only register-machine simulator of the data plane.
//! 7. [`harness`]: NAT/VPN middlebox mixing, synthetic traffic, evaluation.
//!
//! [`trace`] defines the packet model everything shares, and [`model`] holds
//! the trained per-device artifact plus the end-to-end training routine.

pub mod compiler;
pub mod embedding;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod model;
pub mod sim;
pub mod keypackets;
pub mod matrix;
pub mod trace;

pub use error::{Error, Result};

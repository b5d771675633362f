//! Multi-view 3D video multicast in a single WiFi cell with DIBR view synthesis.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the shared domain types (views, links, transmission plans).
//! * [`analytics`] evaluates the closed-form view-failure probability and the
//!   obtained-view fractions.
//! * [`oracle`] holds brute-force and Monte Carlo references for [`analytics`];
//!   it shares no code with the closed-form paths.
//! * [`channel`] maps 802.11n rates to airtime and users to loss probabilities.
//! * [`protocol`] implements the MVGMP ViewTable and client-side view selection.
//! * [`sim`] is the frame-stepped driver that runs MVGMP against conventional
//!   multicast under common random numbers.
//! * [`cli`] wires configuration files, sweeps and CSV output together.

pub mod analytics;
pub mod channel;
pub mod cli;
pub mod error;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use model::{Link, SynthesisConfig, TransmissionPlan, UserChannelState, UserId, View};

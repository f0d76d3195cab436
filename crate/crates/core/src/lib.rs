//! Localization of a differential-drive robot whose commands and pose
//! measurements cross a delaying network.
//!
//! - [`kinematics`]: motion model and its Jacobians.
//! - [`estimator`]: Kalman filters that fuse late measurements against the
//!   prior stored for their origin step, plus a stacked-state reference.
//! - [`channel`]: discrete-event delay links.
//! - [`scenario`]: simulation harness comparing a delay-aware filter with a
//!   delay-naive EKF.
//! - [`selfcheck`]: randomized property suites for the linear filter.
//! - [`cli`]: command-line driver.

pub mod channel;
pub mod cli;
pub mod estimator;
pub mod format;
pub mod kinematics;
pub mod scenario;
pub mod selfcheck;

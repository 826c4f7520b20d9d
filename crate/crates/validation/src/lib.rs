//! Reference computations and synthetic designs used by the acceptance suite.
//!
//! Expectations are computed by direct enumeration over finite supports or
//! from closed forms, never through the estimation code under test; the
//! library types appear only as containers for the inputs handed to it.

pub mod designs;
pub mod law;

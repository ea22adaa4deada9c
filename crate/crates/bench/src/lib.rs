//! Empty by design; this crate only carries the criterion bench targets.

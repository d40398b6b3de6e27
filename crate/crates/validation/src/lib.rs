//! Holds the Monte-Carlo acceptance suite in `tests/acceptance.rs`. Kept in
//! its own package so the long studies run after every other test target.

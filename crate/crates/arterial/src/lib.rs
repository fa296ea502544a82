//! Analysis and simulation toolkit for signalized arterial networks:
//! flow calibration from loop-detector style measurements, sensor-coverage
//! identifiability, signal-timing optimization and a discrete-event
//! store-and-forward simulator with performance metrics.

#![forbid(unsafe_code)]

pub mod calibrate;
pub mod identify;
pub mod lpsolve;
pub mod metrics;
pub mod network;
pub mod sim;

//! Backdoor watermarking of neural networks and two gateways that evade
//! black-box watermark verification: an ensemble voting gateway and a
//! trigger-detector gateway, plus a probability model of both.

pub mod analytics;
pub mod data;
pub mod detector;
pub mod ensemble;
pub mod nn;
pub mod rng;
pub mod watermark;

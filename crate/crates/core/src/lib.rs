//! Simulation and design library for fluorescence collection through a
//! surface ion trap with a backside-integrated metalens.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod collection_geometry;
pub mod config;
pub mod metalens_design;
pub mod quadrature;
pub mod ray_trace;
pub mod rng;
pub mod trap_model;
pub mod wave_optics;

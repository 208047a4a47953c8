//! Core library for the mindcraft pipeline: a deterministic multi-room
//! gridworld, procedural cognitive-query generation over expert trajectories,
//! a small differentiable agent with a dual memory (episodic frames plus a
//! latent map read from a learnable codebook), the contrastive training
//! objectives, a deterministic training loop, and the evaluation metric suite.
//!
//! The crate is `no_std`-compatible (`alloc` required); all file and terminal
//! IO lives in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod evalsuite;
pub mod fmath;
pub mod gridworld;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod querygen;
pub mod training;

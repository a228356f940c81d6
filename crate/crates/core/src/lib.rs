//! Synthesis of annotated live-cell microscopy videos.
//!
//! A statistical shape model produces smooth mask sequences for single
//! cells. A denoising diffusion model turns a partially noised rendering of
//! the first mask into a textured cell image; a flow network carries that
//! texture to each following mask, and a few diffusion steps restore the
//! detail lost in warping. Cell videos are then placed into a larger scene
//! and written in the Cell Tracking Challenge layout together with their
//! instance masks and lineage.

pub mod ablation;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod flow;
pub mod metrics;
pub mod normalize;
pub mod raster;
pub mod seed;
pub mod shape;
pub mod synthesis;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod toy;

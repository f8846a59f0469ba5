//! Deep feature consistent variational autoencoder.
//!
//! Trains a convolutional VAE whose reconstruction term is measured between
//! hidden activations of a fixed pretrained classification network rather
//! than raw pixels, plus a latent-space toolkit (interpolation, attribute
//! vector arithmetic, correlation analysis) and linear-classifier attribute
//! prediction on the learned latents.

pub mod archive;
pub mod attribute_classifier;
pub mod config;
pub mod core_model;
pub mod data_pipeline;
pub mod error;
pub mod grid;
pub mod latent_toolkit;
pub mod loss_network;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};

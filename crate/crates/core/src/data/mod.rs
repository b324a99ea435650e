//! Synthetic tabletop world, scripted demonstrations, dataset files and
//! weighted mixing.

mod episode;
mod expert;
pub mod io;
mod mix;
mod world;

pub use episode::{
    draw_scene, generate_dataset, generate_qa, instruction_for, left_of, pad_to_20, qa_answer,
    random_scene, rollout_expert, stream_rng, unpad, Arm, Dataset, Episode, QaSample, Vec20,
    ARM_SLOTS, EXPERT_STEP_LIMIT, FPS, MIN_FRAMES, NATIVE_DIMS, PADDED_DIMS,
};
pub use expert::{scripted_expert, Goal};
pub use mix::{Draw, MixStream};
pub use world::{
    env_step, gripper_footprint, render, Color, Container, ContainerKind, Image, NativeAction,
    NativeState, Object, Shape, WorldState, BACKGROUND, CELL, CHANNELS, GRAB_RADIUS, GRID,
    IMAGE_SIZE, MAX_STEP, PIXELS,
};

use thiserror::Error;

use crate::fast::percentile;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("only {succeeded} of {attempted} scripted rollouts succeeded; environment misconfigured")]
    LowSuccess { succeeded: usize, attempted: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-dimension corpus summary of the padded action stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DimStats {
    pub p01: f64,
    pub p99: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn action_stats(ds: &Dataset) -> Vec<DimStats> {
    (0..PADDED_DIMS)
        .map(|d| {
            let mut col: Vec<f64> = ds.episodes.iter().flat_map(|e| e.actions.iter().map(move |a| a[d])).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len().max(1) as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            DimStats { p01: percentile(&col, 1.0), p99: percentile(&col, 99.0), mean, std: var.sqrt() }
        })
        .collect()
}

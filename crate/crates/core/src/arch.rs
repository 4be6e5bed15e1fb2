//! Reference network for the desk-scale experiments.
//!
//! Five weighted layers (conv, conv, dense, dense, dense) with per-channel
//! normalization after each of the first four. Convolutions are stride-1
//! "same", so spatial extent is preserved until the flatten.

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::model::Model;
use crate::seed;

/// Width of the first hidden dense layer. Together with [`DENSE2_WIDTH`] this
/// fixes the normalization-scale capacity of the top model (96 + 48 = 144
/// channels), comfortably above the default 128-bit signature length.
pub const DENSE1_WIDTH: usize = 96;
pub const DENSE2_WIDTH: usize = 48;
pub const CONV1_CHANNELS: usize = 6;
pub const CONV2_CHANNELS: usize = 8;

/// Number of weighted blocks in the reference net.
pub const NUM_BLOCKS: usize = 5;

/// Builds the monolithic reference model for `(c, h, w)` inputs.
pub fn reference_model(c: usize, h: usize, w: usize, num_classes: usize, seed_v: u64) -> Result<Model> {
    let mut rng = seed::rng(seed_v, &[seed::tag::MODEL_INIT]);
    let flat = CONV2_CHANNELS * h * w;
    Model::new(
        vec![c, h, w],
        vec![
            // block 1
            Layer::conv2d(c, CONV1_CHANNELS, 3, &mut rng)?,
            Layer::scalenorm(CONV1_CHANNELS),
            Layer::relu(),
            // block 2
            Layer::conv2d(CONV1_CHANNELS, CONV2_CHANNELS, 3, &mut rng)?,
            Layer::scalenorm(CONV2_CHANNELS),
            Layer::relu(),
            // block 3
            Layer::flatten(CONV2_CHANNELS, h, w),
            Layer::dense(flat, DENSE1_WIDTH, &mut rng),
            Layer::scalenorm(DENSE1_WIDTH),
            Layer::relu(),
            // block 4
            Layer::dense(DENSE1_WIDTH, DENSE2_WIDTH, &mut rng),
            Layer::scalenorm(DENSE2_WIDTH),
            Layer::relu(),
            // block 5
            Layer::dense(DENSE2_WIDTH, num_classes, &mut rng),
        ],
    )
}

/// Maps a block-level split point ("split after block b") to the primitive
/// layer index separating bottom from top.
pub fn split_index_for_block(block: usize) -> Result<usize> {
    match block {
        1 => Ok(3),
        2 => Ok(6),
        3 => Ok(10),
        4 => Ok(13),
        b => Err(Error::Config(format!(
            "split must fall after block 1..=4 of {NUM_BLOCKS}, got {b}"
        ))),
    }
}

/// Indices of the scalenorm layers inside the top model when the reference
/// net is split after `block`.
pub fn top_scalenorm_ids(block: usize) -> Result<Vec<usize>> {
    let split = split_index_for_block(block)?;
    // Scalenorm layers sit at monolithic indices 1, 4, 8, 11.
    Ok([1usize, 4, 8, 11]
        .iter()
        .filter(|&&i| i >= split)
        .map(|&i| i - split)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Layer;

    #[test]
    fn reference_model_builds_and_has_declared_output() {
        let m = reference_model(1, 16, 16, 4, 0).unwrap();
        assert_eq!(m.output_shape(), vec![4]);
        assert_eq!(m.layers().len(), 14);
    }

    #[test]
    fn top_scalenorm_capacity_after_default_split() {
        let m = reference_model(1, 16, 16, 4, 0).unwrap();
        let split = split_index_for_block(2).unwrap();
        let ids = top_scalenorm_ids(2).unwrap();
        let d: usize = ids
            .iter()
            .map(|&i| match &m.layers()[split + i] {
                Layer::ScaleNorm(s) => s.gamma.len(),
                other => panic!("expected scalenorm, got {}", other.kind_name()),
            })
            .sum();
        assert_eq!(d, DENSE1_WIDTH + DENSE2_WIDTH);
    }
}

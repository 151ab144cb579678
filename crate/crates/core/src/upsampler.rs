//! CNN decoder from the token grid back to an RGB image.

use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::{Padding, Tensor, Var};
use crate::tokenizer::PatchGrid;

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// `log2(p)` blocks of 3×3 conv → relu → nearest 2× upsample, then a final
/// 3×3 conv to RGB with no output activation.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub blocks: Vec<ConvLayer>,
    pub to_rgb: ConvLayer,
}

/// Number of 2× blocks needed to grow a token grid back to pixel resolution.
pub fn block_count(patch: usize) -> Result<usize> {
    if !patch.is_power_of_two() {
        return Err(Error::Config(format!(
            "patch size {patch} is not a power of two"
        )));
    }
    Ok(patch.trailing_zeros() as usize)
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, init: &mut Init, patch: usize, d: usize) -> Result<Self> {
        let fan_in = 9 * d;
        let mut blocks = Vec::new();
        for i in 0..block_count(patch)? {
            blocks.push(ConvLayer {
                kernel: store.add(format!("up.{i}.kernel"), init.fan_in(&[3, 3, d, d], fan_in))?,
                bias: store.add(format!("up.{i}.bias"), Tensor::zeros(&[d]))?,
            });
        }
        let to_rgb = ConvLayer {
            kernel: store.add("up.rgb.kernel", init.fan_in(&[3, 3, d, 3], fan_in))?,
            bias: store.add("up.rgb.bias", Tensor::full(&[3], 0.5))?,
        };
        Ok(Upsampler { blocks, to_rgb })
    }

    /// `[L, d]` tokens to an `[H, W, 3]` image tensor.
    pub fn forward(&self, g: &mut Graph, tokens: Var, grid: &PatchGrid) -> Result<Var> {
        let mut x = tokens_to_grid(g, tokens, grid)?;
        for block in &self.blocks {
            x = conv(g, x, block)?;
            x = g.tape.relu(x);
            x = g.tape.upsample_nearest_2x(x)?;
        }
        conv(g, x, &self.to_rgb)
    }
}

fn conv(g: &mut Graph, x: Var, layer: &ConvLayer) -> Result<Var> {
    let y = g.tape.conv2d(x, g.vars[layer.kernel], 1, Padding::Zero)?;
    g.tape.add_bias(y, g.vars[layer.bias])
}

/// Row-major unflatten of `[L, d]` to `[rows, cols, d]`.
pub fn tokens_to_grid(g: &mut Graph, tokens: Var, grid: &PatchGrid) -> Result<Var> {
    let shape = g.tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != grid.token_count() {
        return Err(Error::Contract(format!(
            "token matrix {shape:?} does not fit a {}x{} grid",
            grid.rows(),
            grid.cols()
        )));
    }
    g.tape
        .reshape(tokens, &[grid.rows(), grid.cols(), shape[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn block_counts() {
        assert_eq!(block_count(8).unwrap(), 3);
        assert_eq!(block_count(1).unwrap(), 0);
        assert!(matches!(block_count(6), Err(Error::Config(_))));
    }

    #[test]
    fn grid_reshape_is_row_major() {
        let grid = PatchGrid::new(32, 32, 8).unwrap();
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let x = g.tape.constant(&Tensor::from_fn(&[16, 1], |i| i as f64));
        let y = tokens_to_grid(&mut g, x, &grid).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 1]);
        assert_eq!(tape.value(y)[2 * 4 + 3], 11.0);
    }

    #[test]
    fn zero_weights_give_constant_bias_image() {
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, &mut Init::new(1), 8, 4).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        store
            .get_mut(up.to_rgb.bias)
            .data_mut()
            .copy_from_slice(&[0.25, 0.5, 0.75]);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let x = g.tape.constant(&Tensor::full(&[4, 4], 3.0));
        let out = up.forward(&mut g, x, &grid).unwrap();
        assert_eq!(tape.shape(out), &[16, 16, 3]);
        for px in tape.value(out).chunks(3) {
            assert_eq!(px, &[0.25, 0.5, 0.75]);
        }
    }
}

//! Depth-to-space (pixel shuffle) and its inverse.
//!
//! Input channel `c·r² + dy·r + dx` lands at output channel `c`, position
//! `(y·r + dy, x·r + dx)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn shuffle(input: &Tensor, block: usize, to_space: bool) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if block == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    let r2 = block * block;
    let (deep_c, sh, sw) = if to_space {
        if c % r2 != 0 {
            return Err(Error::invalid(format!(
                "depth_to_space: {c} channels not divisible by {r2}"
            )));
        }
        (c, h, w)
    } else {
        if h % block != 0 || w % block != 0 {
            return Err(Error::invalid(format!(
                "space_to_depth: {h}×{w} not divisible by {block}"
            )));
        }
        (c * r2, h / block, w / block)
    };
    let shallow_c = deep_c / r2;
    let (wide_h, wide_w) = (sh * block, sw * block);

    let out_shape = if to_space {
        [b, shallow_c, wide_h, wide_w]
    } else {
        [b, deep_c, sh, sw]
    };
    let mut out = vec![0.0; input.len()];
    let src = input.data();
    for n in 0..b {
        for dc in 0..deep_c {
            let (sc, dy, dx) = (dc / r2, (dc % r2) / block, dc % block);
            for y in 0..sh {
                for x in 0..sw {
                    let deep = ((n * deep_c + dc) * sh + y) * sw + x;
                    let wide = ((n * shallow_c + sc) * wide_h + y * block + dy) * wide_w + x * block + dx;
                    if to_space {
                        out[wide] = src[deep];
                    } else {
                        out[deep] = src[wide];
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn depth_to_space(input: &Tensor, block: usize) -> Result<Tensor> {
    shuffle(input, block, true)
}

pub fn space_to_depth(input: &Tensor, block: usize) -> Result<Tensor> {
    shuffle(input, block, false)
}

/// Gradient of `depth_to_space`: the inverse rearrangement.
pub fn depth_to_space_backward(grad_out: &Tensor, block: usize) -> Result<Tensor> {
    space_to_depth(grad_out, block)
}

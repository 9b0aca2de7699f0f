use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a sampled patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `count × 3 × size × size`
    pub patches: Tensor,
    pub origins: Vec<PatchOrigin>,
}

/// Copies a `size × size` window at `(y, x)` out of a `1×3×H×W` image.
pub fn crop_patch(image: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let (_, c, h, w) = image.dims4()?;
    if y + size > h || x + size > w {
        return Err(Error::invalid(format!(
            "patch {size}×{size} at ({y}, {x}) exceeds {h}×{w}"
        )));
    }
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let start = (ch * h + row) * w + x;
            data.extend_from_slice(&image.data()[start..start + size]);
        }
    }
    Tensor::new(&[1, c, size, size], data)
}

/// Draws `count` patches: source image uniform over `images`, top-left
/// corner uniform over all positions where the patch fits.
pub fn sample_patches<R: Rng + ?Sized>(
    images: &[Tensor],
    count: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<PatchBatch> {
    if images.is_empty() || count == 0 || patch_size == 0 {
        return Err(Error::invalid("need images, a positive count and a positive patch size"));
    }
    for (i, img) in images.iter().enumerate() {
        let (b, c, h, w) = img.dims4()?;
        if b != 1 || c != 3 {
            return Err(Error::invalid(format!("image {i} must be 1×3×H×W")));
        }
        if h < patch_size || w < patch_size {
            return Err(Error::invalid(format!(
                "image {i} is {w}×{h}, smaller than the {patch_size}×{patch_size} patch"
            )));
        }
    }
    let mut patches = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let image = rng.gen_range(0..images.len());
        let (_, _, h, w) = images[image].dims4()?;
        let y = rng.gen_range(0..=h - patch_size);
        let x = rng.gen_range(0..=w - patch_size);
        patches.push(crop_patch(&images[image], y, x, patch_size)?);
        origins.push(PatchOrigin { image, y, x });
    }
    Ok(PatchBatch {
        patches: Tensor::stack_batch(&patches)?,
        origins,
    })
}

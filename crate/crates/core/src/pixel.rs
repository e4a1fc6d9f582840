//! Pixel working space of the toy model: intensities mapped affinely from
//! `[0, 1]` to `[-1, 1]`, batched as `(N, C, H, W)`.

use ndarray::{Axis, IxDyn};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::Latent;

pub fn image_to_latent(img: &Image) -> Latent {
    img.to_chw().mapv(|v| 2.0 * v - 1.0).into_dyn()
}

/// Clamps back into the valid intensity range.
pub fn latent_to_image(z: &Latent) -> Result<Image> {
    let chw = z
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            actual: z.shape().to_vec(),
        })?;
    Image::from_chw(&chw.mapv(|v| (v + 1.0) / 2.0))
}

/// Stacks same-shaped images into an `(N, C, H, W)` latent.
pub fn batch_to_latent(images: &[Image]) -> Result<Latent> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
    let [h, w, c] = first.shape();
    let mut out = Latent::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                actual: img.shape().to_vec(),
            });
        }
        out.index_axis_mut(Axis(0), i).assign(&image_to_latent(img));
    }
    Ok(out)
}

pub fn latent_to_batch(z: &Latent) -> Result<Vec<Image>> {
    if z.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            actual: z.shape().to_vec(),
        });
    }
    z.axis_iter(Axis(0))
        .map(|item| latent_to_image(&item.to_owned()))
        .collect()
}

//! Depth-parametric residual encoder-decoder networks with a small CPU
//! training engine.
//!
//! ```
//! use cxr_nodule::ednet::{EdNet, ModelSpec, NormMode, Tensor};
//!
//! let spec = ModelSpec::scaled(5, 2, NormMode::Instance, 32);
//! let net = EdNet::<f32>::build(&spec, 0).unwrap();
//! let x = Tensor::zeros(1, 1, 32, 32);
//! let y = net.forward(&x).unwrap();
//! assert_eq!(y.shape(), [1, 1, 32, 32]);
//! assert!(y.data.iter().all(|&p| p > 0.0 && p < 1.0));
//! ```

mod checkpoint;
mod layers;
mod model;
mod optim;
mod tensor;

pub use checkpoint::{checkpoint_path, load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};
pub use layers::{instance_normalize, Conv2d, ConvTranspose2x2, Norm, NormMode, Param, NORM_EPSILON};
pub use model::{
    count_parameters_for, format_layer_dump, param_dump, sigmoid, BlockLayout, EdNet, LayerCount, ModelSpec,
    PUBLISHED_PARAMETERS,
};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Element, Tensor};

use crate::dataio::Image;

/// Stacks equally sized square images into an `N×1×D×D` batch.
pub fn batch_from_images<T: Element>(images: &[&Image]) -> Tensor<T> {
    let (h, w) = images.first().map_or((0, 0), |i| i.dim());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.dim(), (h, w), "batch images differ in size");
        data.extend(img.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}

/// Extracts sample `i` of a single-channel tensor as an image.
pub fn image_from_batch<T: Element>(t: &Tensor<T>, i: usize) -> Image {
    Image::from_shape_vec(
        (t.h, t.w),
        t.channel(i, 0).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
    )
    .expect("channel length matches shape")
}

/// Probability map for one image.
pub fn predict(model: &EdNet<f32>, img: &Image) -> crate::Result<Image> {
    let y = model.forward(&batch_from_images(&[img]))?;
    Ok(image_from_batch(&y, 0))
}

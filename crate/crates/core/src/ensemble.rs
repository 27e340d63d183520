//! Three-epoch self-ensemble: the pixel-wise maximum of the outputs of the
//! checkpoints at epochs `n − 1`, `n` and `n + 1`.

use std::path::{Path, PathBuf};

use ndarray::Zip;

use crate::dataio::{write_png16, Image};
use crate::ednet::{batch_from_images, image_from_batch, load_checkpoint, EdNet};
use crate::{Error, Result};

/// Element-wise maximum of three equally shaped probability maps.
pub fn compose(a: &Image, b: &Image, c: &Image) -> Result<Image> {
    if a.dim() != b.dim() || a.dim() != c.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ensemble inputs {:?}, {:?}, {:?}",
            a.dim(),
            b.dim(),
            c.dim()
        )));
    }
    let mut out = a.clone();
    Zip::from(&mut out).and(b).and(c).for_each(|o, &b, &c| *o = o.max(b).max(c));
    Ok(out)
}

/// The three models of one ensemble, loaded once and reused per image.
#[derive(Debug, Clone)]
pub struct EpochTriplet {
    pub n: usize,
    pub models: [EdNet<f32>; 3],
}

impl EpochTriplet {
    /// Loads epochs `n − 1`, `n`, `n + 1`; `checkpoint(e)` maps an epoch to its file.
    pub fn load(n: usize, checkpoint: impl Fn(usize) -> Option<PathBuf>) -> Result<EpochTriplet> {
        if n < 2 {
            return Err(Error::MissingCheckpoint {
                epoch: n.saturating_sub(1),
                path: PathBuf::new(),
            });
        }
        let load = |epoch: usize| -> Result<EdNet<f32>> {
            let path = checkpoint(epoch).unwrap_or_default();
            if !path.is_file() {
                return Err(Error::MissingCheckpoint { epoch, path });
            }
            Ok(load_checkpoint::<f32>(&path)?.0)
        };
        Ok(EpochTriplet {
            n,
            models: [load(n - 1)?, load(n)?, load(n + 1)?],
        })
    }

    /// Composite probability map for one image.
    pub fn predict(&self, img: &Image) -> Result<Image> {
        let x = batch_from_images::<f32>(&[img]);
        let outs = self
            .models
            .iter()
            .map(|m| m.forward(&x).map(|y| image_from_batch(&y, 0)))
            .collect::<Result<Vec<_>>>()?;
        compose(&outs[0], &outs[1], &outs[2])
    }
}

/// Loads the triple around `n` from `{dir}/epoch_{NN}.ckpt` and returns the
/// composite for `img`.
pub fn ensemble_predict(checkpoint_dir: &Path, n: usize, img: &Image) -> Result<Image> {
    EpochTriplet::load(n, |e| Some(checkpoint_dir.join(format!("epoch_{e:02}.ckpt"))))?.predict(img)
}

/// Stores a composite as a 16-bit PNG (probability × 65535).
pub fn save_composite(path: &Path, composite: &Image) -> Result<()> {
    write_png16(path, composite)
}

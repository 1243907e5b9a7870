use std::path::Path;
use std::sync::Arc;

use bubbleview_core::imaging::{gaussian_blur, BlurCache, Image, ImagingError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("image {image_id:?}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: ImagingError,
    },
    #[error("no stimulus file for image {0:?}")]
    Missing(String),
}

/// Encoded original and blurred variants of one stimulus. Immutable once built.
#[derive(Debug, Clone)]
pub struct ImageAssets {
    pub width: usize,
    pub height: usize,
    pub original_png: Arc<Vec<u8>>,
    pub blurred_png: Arc<Vec<u8>>,
}

impl ImageAssets {
    pub fn from_image(image_id: &str, img: &Image, blur_sigma_px: f64) -> Result<Self, AssetError> {
        let wrap = |source| AssetError::Image {
            image_id: image_id.to_owned(),
            source,
        };
        let blurred = gaussian_blur(img, blur_sigma_px).map_err(wrap)?;
        Ok(ImageAssets {
            width: img.width(),
            height: img.height(),
            original_png: Arc::new(img.encode_png().map_err(wrap)?),
            blurred_png: Arc::new(blurred.encode_png().map_err(wrap)?),
        })
    }

    /// Loads `<stimuli_dir>/<image_id>.png`, taking the blurred variant from
    /// (or writing it to) the cache.
    pub fn from_dir(image_id: &str, stimuli_dir: &Path, cache: &BlurCache, blur_sigma_px: f64) -> Result<Self, AssetError> {
        let wrap = |source| AssetError::Image {
            image_id: image_id.to_owned(),
            source,
        };
        let source = stimuli_dir.join(format!("{image_id}.png"));
        if !source.is_file() {
            return Err(AssetError::Missing(image_id.to_owned()));
        }
        let original = Image::load(&source).map_err(wrap)?;
        let (cached, _) = cache.get_or_create(image_id, &source, blur_sigma_px).map_err(wrap)?;
        let read = |p: &Path| {
            std::fs::read(p).map_err(|source| {
                wrap(ImagingError::Io {
                    path: p.display().to_string(),
                    source,
                })
            })
        };
        Ok(ImageAssets {
            width: original.width(),
            height: original.height(),
            original_png: Arc::new(read(&source)?),
            blurred_png: Arc::new(read(&cached)?),
        })
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::BinaryMask;

/// One annotated sample: an RGB image in [0,1] and the binary mask of a
/// single class.
#[derive(Debug, Clone)]
pub struct ImageMaskPair {
    pub image: Tensor,
    pub mask: BinaryMask,
    pub class_id: usize,
    /// Dataset-unique sample identity, used to keep the query out of the
    /// support set.
    pub sample_id: String,
}

impl ImageMaskPair {
    pub fn new(image: Tensor, mask: BinaryMask, class_id: usize, sample_id: String) -> Result<Self> {
        if image.c != 3 {
            return Err(Error::Shape(format!("image must be H×W×3, got {}", image.shape_str())));
        }
        if image.h != mask.h || image.w != mask.w {
            return Err(Error::Shape(format!(
                "image {}x{} vs mask {}x{}",
                image.h, image.w, mask.h, mask.w
            )));
        }
        Ok(ImageMaskPair {
            image,
            mask,
            class_id,
            sample_id,
        })
    }
}

/// One few-shot task: K support pairs plus a query pair of the same class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<ImageMaskPair>,
    pub query: ImageMaskPair,
    pub class_id: usize,
}

impl Episode {
    pub fn new(support: Vec<ImageMaskPair>, query: ImageMaskPair) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Dataset("episode needs at least one support pair".into()));
        }
        let class_id = query.class_id;
        for s in &support {
            if s.class_id != class_id {
                return Err(Error::Dataset(format!(
                    "support class {} != query class {}",
                    s.class_id, class_id
                )));
            }
            if s.mask.is_all_zero() {
                return Err(Error::EmptyMask("support mask"));
            }
            if s.sample_id == query.sample_id {
                return Err(Error::Dataset("query sample appears in the support set".into()));
            }
        }
        Ok(Episode {
            support,
            query,
            class_id,
        })
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }
}

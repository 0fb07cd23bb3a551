//! Tensor container format and dataset manifests.

mod manifest;
mod tensor;

pub use manifest::{
    read_manifest, relativize, resolve, write_manifest, DatasetManifest, ImageEntry, Label, Split,
};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, MAGIC};

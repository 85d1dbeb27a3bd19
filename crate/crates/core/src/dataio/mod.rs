//! Matrix storage, dataset manifests and per-voxel preprocessing.

mod manifest;
mod preprocess;
mod srmb;

pub use manifest::{write_manifest, Dataset, SubjectEntry};
pub use preprocess::preprocess_run;
pub use srmb::{
    load_matrix, load_rows, read_header, save_matrix, save_matrix_atomic, Dtype, SrmbHeader,
    HEADER_LEN, MAGIC, VERSION,
};

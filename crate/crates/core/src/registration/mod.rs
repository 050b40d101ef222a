//! Affine alignment of subjects to the atlas, the landmark grid and patch extraction.

mod affine;
mod grid;
mod mi;
mod nelder_mead;
mod register;

pub use affine::{AffineTransform, TransformFile, TransformProvenance, DET_MAX, DET_MIN};
pub use mi::{mutual_information, JointHistogram, ROI_DILATION};
pub use nelder_mead::{minimize, Minimum, SimplexSettings};
pub use register::{from_params, landmark_mapping_error, register_affine, Registration, RegistrationConfig};
pub use grid::{
    build_landmark_grid, extract_label_patch, extract_patch, lattice_offsets, map_landmark, nearest_neighbors,
    normalize_coord, LandmarkGrid, Patch,
};

//! Two-branch quantized linear layers and how they are built: truncated SVD
//! initialization, the alternating optimizer and archive I/O.

pub mod archive;
pub mod layer;
pub mod qao;
pub mod svd;

pub use archive::{load_layer, save_layer};
pub use layer::{build_layer, build_layer_calibrated, build_prepared, LayerBuildConfig, PreparedWeight, QuantizedLinear, ResidualWeight, LOSSLESS_BITS};
pub use qao::{qao, qao_from_init, qao_rotated, Pairing, QaoInit, QaoOptions, QaoResult, StopRule};
pub use svd::{truncated_svd, LowRank, SubspaceOptions, TruncatedSvd};

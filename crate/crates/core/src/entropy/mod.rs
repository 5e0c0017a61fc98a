//! Factorized entropy bottleneck, integer tables, range coding and the
//! compressed-feature container.

pub mod bitstream;
pub mod prior;
pub mod range_coder;
pub mod table;

pub use bitstream::{CompressedFeature, Digest, FeatureHeader};
pub use prior::{quantize, rate_bits, FactorizedPrior, QuantMode};
pub use range_coder::{range_decode, range_encode};
pub use table::{freeze, CdfTable};

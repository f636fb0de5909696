//! Structural demand models and the counterfactual restrictions they imply.
//!
//! The numerical kernels (share maps, inversion, quadrature, root finding,
//! conversion maps) are generic over [`Scalar`]; experiment-level code is
//! fixed to `f64`. Concrete aliases for both precisions live at the crate root.

pub mod counterfactual;
pub mod demand;
pub mod diagnostics;
pub mod error;
pub mod extrapolation;
pub mod inversion;
pub mod linalg;
pub mod micro;
pub mod optimize;
pub mod population;
pub mod quadrature;
pub mod rootfind;
pub mod scalar;
pub mod types;

pub use counterfactual::{verify_theorem1, CounterfactualEngine, HFamily, HomTriple};
pub use demand::{Characteristic, Integration, ShareMap, ShareMapConfig, ShareMapKind};
pub use error::{Error, Result};
pub use inversion::{invert, structural_shock, InversionConfig};
pub use rootfind::{bisect_increasing, BisectionConfig};
pub use population::{sample_population, PopulationSpec};
pub use scalar::{Real, Scalar};
pub use types::{validate_shares, Bundle, MarketDraw, MixingSpec, SharesVector, SIMPLEX_EPS};

pub type ShareMapF64 = ShareMap<f64>;
pub type ShareMapF32 = ShareMap<f32>;
pub type BundleF64 = Bundle<f64>;
pub type BundleF32 = Bundle<f32>;
pub type SharesF64 = SharesVector<f64>;
pub type SharesF32 = SharesVector<f32>;

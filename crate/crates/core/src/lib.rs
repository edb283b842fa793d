//! Cross-population hierarchical GMRF model of key-population HIV prevalence.

pub mod error;
pub mod eval;
pub mod gmrf;
pub mod impute;
pub mod linalg;
pub mod panel;
pub mod posterior;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use gmrf::StructuralParams;
pub use panel::{PanelData, PopulationCode, RegionCode, YearWindow};
pub use posterior::{FitConfig, ModelVariant, PosteriorDraws, PriorSpec};

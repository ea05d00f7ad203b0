pub mod checkpoint;
pub mod cli;
pub mod editing;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod graph;
pub mod imaging;
pub mod inversion;
pub mod optim;
pub mod rng;
pub mod spaces;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{AtlasError, Result};
pub use generator::{GeneratorConfig, GeneratorModel};
pub use graph::{Gradients, Graph, Var};
pub use imaging::Image;
pub use spaces::{DetailCodes, FCode, HybridCode, HybridTag, LatentCode, Space, WCode, ZCode};
pub use tensor::Tensor;

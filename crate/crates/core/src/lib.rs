pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod grouping;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod zeroshot;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type GroupVit32 = encoders::GroupVit<f32>;
pub type GroupVit64 = encoders::GroupVit<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod feature_queue;
pub mod gradcheck;
pub mod graph_knowledge;
pub mod injection;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod objectives;
pub mod params;
pub mod pretrain;
pub mod scalar;
pub mod text;
pub mod triplet_store;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tape32 = autograd::Tape<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type ModelState64 = model::ModelState<f64>;

pub mod config;
pub mod layers;
pub mod net;
pub mod tokenizer;

pub use config::EncoderConfig;
pub use net::{generate, init_params, Net, ProjHead, Strategy};
pub use tokenizer::{TokenMode, Tokenizer};

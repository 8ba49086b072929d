pub mod autodiff;
pub mod error;
pub mod io;
pub mod matrix;
pub mod model;
pub mod pack;
pub mod pipeline;
pub mod rank;
pub mod rng;
pub mod svd;
pub mod train;
pub mod update;

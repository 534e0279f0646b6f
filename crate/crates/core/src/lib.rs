pub mod gp;
pub mod linalg;
pub mod optim;
pub mod mtgp;
pub mod data;
pub mod eval;
pub mod sti;
pub mod forecaster;
pub mod cli;

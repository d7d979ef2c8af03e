pub mod analytic;
pub mod autodiff;
pub mod checks;
pub mod data;
pub mod fdiv;
pub mod mc;
pub mod models;
pub mod objective;
pub mod trainer;

pub mod baselines;
pub mod diffusion;
pub mod harness;
pub mod invariance;
pub mod qp;
pub mod specs;

pub mod backbone;
pub mod data;
pub mod expert;
pub mod fast;
pub mod grad;
pub mod lam;
pub mod nn;
pub mod pipeline;

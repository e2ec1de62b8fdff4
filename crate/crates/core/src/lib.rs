pub mod tensor;
pub mod flow;
pub mod networks;
pub mod training;
pub mod metrics;
pub mod data;
pub mod gradcheck;

pub mod backbone;
pub mod data;
pub mod detection;
pub mod harness;
pub mod nn;
pub mod oim;
pub mod prompt_pool;
pub mod tensor;

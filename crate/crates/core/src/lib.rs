pub mod checkpoint;
pub mod markov;
pub mod model;
pub mod pretrain;
pub mod rec;
pub mod rng;
pub mod tensor;

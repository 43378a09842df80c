pub mod afp;
pub mod corpus;
pub mod criteria;
pub mod digest;
pub mod dsp;
pub mod eval;
pub mod numkernel;
pub mod pipeline;
pub mod pitch;

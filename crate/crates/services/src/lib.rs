pub mod annotation;
pub mod diffusion;
pub mod monitor;
pub mod vlm_client;
pub mod stubs;

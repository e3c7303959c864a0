pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod envs;
pub mod mixer;
pub mod nominal;
pub mod policy;
pub mod scenario;
pub mod stability;
pub mod trainer;

pub mod augment;
pub mod bench;
pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod numerics;
pub mod prompt;

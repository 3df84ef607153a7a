pub mod data;
pub mod experiments;
pub mod image_io;
pub mod metrics;
pub mod runs;
pub mod train;

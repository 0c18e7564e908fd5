pub mod checkpoint;
pub mod config;
pub mod evaluation;
pub mod gradcheck;
pub mod kitti_io;
pub mod kv;
pub mod losses;
pub mod meta_kernel;
pub mod net_blocks;
pub mod pipeline;
pub mod postproc;
pub mod range_view;
pub mod synthetic;
pub mod tensor_ops;

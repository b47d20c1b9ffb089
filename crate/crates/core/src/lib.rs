//! Hetero-modal cooperative BEV perception.
//!
//! Agents carrying a camera or a LiDAR encode synthetic observations into
//! BEV feature maps ([`scene`]), exchange pose-aligned copies
//! ([`geometry`], [`fusion`]), fuse them with typed graph attention over
//! local windows and a sparse global grid ([`transformer`], [`partition`]),
//! and detect oriented boxes ([`detection`]).

pub mod bbox;
pub mod detection;
mod error;
pub mod fusion;
pub mod geometry;
pub mod modality;
pub mod partition;
pub mod scene;
pub mod transformer;

pub use error::{CoreError, Result};
pub use modality::{EdgeType, Modality};

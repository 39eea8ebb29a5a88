//! A miniature message-passing runtime: one head node and ranked workers
//! over TCP, with point-to-point messaging, barriers and linear
//! collectives. On top of it sit two benchmark kernels (Monte Carlo pi
//! and partitioned prime generation), a process launcher and a timing
//! harness that reports speedup and efficiency.
//!
//! ```no_run
//! use mmpi::{head_start, ClusterConfig, Scalar};
//!
//! let mut world = head_start(ClusterConfig::new("127.0.0.1:7070", 3)).unwrap();
//! let total = world.reduce_sum(0, Scalar::U64(world.rank() as u64)).unwrap();
//! assert_eq!(total, Some(Scalar::U64(6)));
//! world.shutdown();
//! ```

pub mod benchmarks;
pub mod collectives;
pub mod error;
pub mod harness;
pub mod launcher;
pub mod runtime;
pub mod transport;
pub mod wire;

pub use collectives::Scalar;
pub use error::CommError;
pub use runtime::{Envelope, Source, Tag};
pub use transport::{head_start, worker_join, ClusterConfig, HeadListener, HostsFile, Role, World};
pub use wire::{decode_frame, encode_frame, MessageFrame, MsgType, Payload, PayloadKind};

pub mod assignment;
pub mod autodiff;
pub mod baselines;
pub mod beamformer;
pub mod channel;
pub mod counting;
pub mod error;
pub mod experiments;
pub mod io;
pub mod neural;
pub mod objective;
pub mod optimizer;
pub mod params;

pub use beamformer::{BeamformerSet, ConfigMode, DelayLimit, EvalReport};
pub use channel::{ChannelInstance, Placement, Scenario};
pub use error::{Error, Result};
pub use params::{ArrayGeometry, ArrayKind, SystemParams};

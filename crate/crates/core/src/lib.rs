//! Desk-scale multi-agent reinforcement learning: value factorization
//! (IQL, VDN, QMIX), MADDPG with opponent modeling, symmetric self-play
//! with an exploitability probe, and differentiable communication, all
//! built on a small `f64` autodiff core and checked against exact
//! small-game solvers.

pub mod buffer;
pub mod dial;
pub mod envs;
pub mod maddpg;
pub mod error;
pub mod ndiff;
pub mod oracle;
pub mod qmix;
pub mod run;
pub mod selfplay;

pub use buffer::{EpisodeStore, EpisodeTrace, ReplayBuffer};
pub use envs::{Action, ActionSpace, EnvState, InducedMdp, JointTransition, MarkovGame, TabularMdp};
pub use error::{Error, Result};

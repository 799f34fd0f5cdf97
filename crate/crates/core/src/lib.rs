//! Multi-observer Big Five personality assessment for LLM agents.
//!
//! A subject agent is given a latent personality through adjective markers,
//! talks with observer agents across generated scenarios, and is then rated
//! on the IPIP-50 questionnaire both by itself and by each observer. The
//! [`stats`] module compares the resulting ratings; [`runner`] drives the
//! whole pipeline against an OpenAI-compatible endpoint or an offline mock.

pub mod assess;
pub mod backend;
pub mod dialogue;
mod error;
pub mod exec;
pub mod persona;
pub mod runner;
pub mod seed;
pub mod social;
pub mod stats;

pub use error::{Error, Result};
pub use persona::{AgentProfile, BigFiveDim, LatentPersonality, PerDim};

//! WebSocket endpoint for live operation: streams engine state to operator
//! consoles and feeds their commands to the engine loop.
//!
//! All engine mutations go through one loop task, which owns the replay and
//! the session registry, so commands are totally ordered and every session
//! sees broadcasts in engine order.

pub mod hub;
pub mod server;
pub mod wire;

pub use hub::{Hub, DEFAULT_QUEUE_FRAMES};
pub use server::{resolve_port, serve, ServeError, ServerConfig, ServerHandle, PORT_ENV};
pub use wire::{Command, Pattern, WireMessage, PROTOCOL_VERSION};

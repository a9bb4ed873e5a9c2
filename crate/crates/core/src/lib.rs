//! Core of the holo distributed telescope and honeypot platform.
//!
//! The crate is organised around the sensor packet path and the central
//! controller that orchestrates it:
//!
//! * [`overlay`] is the encrypted hub-and-spoke channel between sensors and hub.
//! * [`controlplane`] holds the registry, onboarding tokens, RBAC, the module
//!   catalog and the desired-state reconciler.
//! * [`darknet`], [`responder`], [`toolbox`] and [`collector`] are the sensor
//!   modules.
//! * [`analysis`] turns captured traffic into flow, overlap and port metrics.
//! * [`simnet`] is a deterministic simulated Internet that drives the real
//!   sensor packet path.
//! * [`service`] wires everything into the long-running controller and agent.

pub mod addr;
pub mod analysis;
pub mod collector;
pub mod controlplane;
pub mod darknet;
pub mod overlay;
pub mod packet;
pub mod path;
pub mod responder;
pub mod service;
pub mod simnet;
pub mod time;
pub mod toolbox;

pub use addr::{AddressRange, PortRange};
pub use packet::{CaptureOrigin, FlowKey, Packet, PacketRecord, Proto, TcpFlags};
pub use time::Timestamp;

//! HTTP gateway for event triggers sent by virtual-world scripts.
//!
//! A script POSTs a small JSON envelope when something happens in the world;
//! the [`gateway`] decodes it, runs the handler registered for the route and
//! answers `{"response": ...}`. Calls aimed at the same device run one at a
//! time in arrival order.
//!
//! The remaining modules make that loop testable end to end: [`tunnel`] hands
//! out unique URLs, [`devices`] simulates desk hardware, [`smarthome`] holds a
//! mock cloud API plus a client, and [`world`] replays scripted multi-user
//! scenarios. The guide under `book/` walks through each of them.

pub mod devices;
pub mod envelope;
pub mod fixtures;
pub mod gateway;
mod server;
pub mod smarthome;
pub mod tunnel;
pub mod world;

// Compile and run the guide's snippets as doc-tests, one module per chapter
// so a failure names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/envelope.md")]
    mod envelope {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/tunnel.md")]
    mod tunnel {}
    #[doc = include_str!("../../../book/src/devices.md")]
    mod devices {}
    #[doc = include_str!("../../../book/src/smarthome.md")]
    mod smarthome {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}

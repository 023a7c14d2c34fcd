pub mod bench;
pub mod client;
pub mod cluster;
pub mod config;
pub mod iod;
pub mod layout;
pub mod metamgr;
pub mod rpc;
pub mod transport;
pub mod wire;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/striping.md")]
    mod striping {}
    #[doc = include_str!("../../../book/src/views.md")]
    mod views {}
    #[doc = include_str!("../../../book/src/daemons.md")]
    mod daemons {}
    #[doc = include_str!("../../../book/src/metadata.md")]
    mod metadata {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/collective.md")]
    mod collective {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}

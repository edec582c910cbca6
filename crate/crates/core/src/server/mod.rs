//! Parameter servers: partition planning, row storage, the wire protocol and clients.

pub mod client;
pub mod plan;
pub mod protocol;
pub mod routes;
pub mod service;
pub mod state;

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("row {vtype}:{id} is not held by this server")]
    OutOfRange { vtype: u8, id: u64 },
    #[error("expected {expected} values, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("vertex {0} has no route")]
    Unroutable(crate::graph::VertexRef),
    #[error("server {addr} replied: {message}")]
    Remote { addr: String, message: String },
    #[error("server {addr}: {source}")]
    Io {
        addr: String,
        #[source]
        source: io::Error,
    },
}

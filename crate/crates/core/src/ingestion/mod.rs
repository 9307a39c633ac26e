//! Ingestion paths from organization platforms into the pipeline: producer
//! push, platform pull and the in-network edge adapter.

pub mod edge;
pub mod fetch;
pub mod push;
pub mod wire;

pub use edge::{edge_integrate, EdgeAdapter};
pub use fetch::{fetch_poll, FetchError, FetchSource, MemorySource, RecordSource};
pub use push::{IngestError, IngestPublish, IngestReceipt, Pusher};
pub use wire::{RawRecord, WireFormat};

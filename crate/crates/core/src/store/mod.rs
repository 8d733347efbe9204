//! On-disk attention containers and spatial resizing.

mod container;
mod manifest;
mod record;
mod resize;

pub use container::{
    read_container, write_container, BlobHeader, Container, FORMAT_VERSION, HEADER_LEN, MAGIC,
    MANIFEST_FILE,
};
pub use manifest::{ClassEntry, ImageSize, RecordDescriptor, RunManifest, TokenSpan};
pub use record::{AttentionKind, AttentionRecord, Grid, ROW_SUM_TOLERANCE};
pub use resize::{resize_channels, resize_spatial};

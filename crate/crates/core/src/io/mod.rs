//! Files on disk: image codecs, scene manifests and the procedural toy scene.

pub mod image_io;
pub mod manifest;
pub mod toy;

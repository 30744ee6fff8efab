//! On-disk formats. Text files are CSV with a fixed header line; binary
//! files are little-endian.

pub mod binary;
pub mod pnm;
pub mod points;
mod table;

pub use binary::{load_checkpoint, read_dmap, save_checkpoint, write_dmap};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm, RgbImage};
pub use points::{
    load_annotations, load_counts, load_detections, load_offsets, load_tracks, save_annotations, save_counts,
    save_detections, save_offsets, save_tracks,
};

//! File formats: PFM depth, PGM masks and maps, ASCII PLY clouds, trajectory
//! CSV and the JSON manifests tying them together.

pub mod manifest;
pub mod ply;
pub mod pnm;
pub mod trajectory;

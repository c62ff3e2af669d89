//! Teacher-student mixed-supervision segmentation: a box-guided teacher
//! with hierarchical organ-to-lesion attention produces soft pseudo-labels
//! on weakly annotated volumes, and a student with a discardable
//! localization branch trains on the strong+pseudo mixture.

pub mod data;
pub mod eval;
pub mod ingest;
pub mod nn;
pub mod phantom;
pub mod student;
pub mod teacher;
pub mod train;
pub mod util;

//! Bitemporal alignment: keypoints, frozen-network descriptors, similarity
//! matching, and robust homography estimation.

mod descriptor;
mod dlt;
mod harris;
mod matching;
mod ransac;
mod scene;

pub use descriptor::{describe, describe_raw, describe_with, Descriptor, DescriptorSource};
pub use dlt::{dlt_homography, PointPair};
pub use harris::{detect_keypoints, Keypoint};
pub use matching::{match_descriptors, Match};
pub use ransac::{estimate_homography_ransac, RansacConfig};
pub use scene::{align_scene, AlignReport};

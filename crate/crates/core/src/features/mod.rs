//! Corner features, binary descriptors, and inlier-counted matching.

mod detect;
mod matching;

pub use detect::{hamming, Descriptor, Detector, DetectorConfig, Features, Keypoint, DESCRIPTOR_BITS};
pub use matching::{match_and_count_inliers, MatchSet, MatcherConfig, Similarity};

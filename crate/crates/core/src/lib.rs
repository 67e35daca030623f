//! Masked-autodecoding vision models: a shared token vocabulary for
//! detection, segmentation, keypoints and captions, a transformer
//! encoder/decoder, masked training and parallel multi-stage decoding.

pub mod codec;
pub mod error;
pub mod harness;
pub mod masking;
pub mod model;
pub mod matching;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(Vocabulary, "vocabulary.md");
    chapter!(Sequences, "sequences.md");
    chapter!(Masking, "masking.md");
    chapter!(Matching, "matching.md");
    chapter!(Model, "model.md");
    chapter!(Training, "training.md");
    chapter!(Harness, "harness.md");
}

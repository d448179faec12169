//! Synthetic captioning task: a small scene grammar, region features
//! derived from the scene, reference captions enumerated from the grammar,
//! and teacher distillation into pseudo-captions.

pub mod dataset;
pub mod distill;
pub mod grammar;

pub use dataset::{
    generate_dataset, generate_unlabeled, scene_features, Dataset, DatasetRecord, GrammarConfig, Split, SplitSizes,
};
pub use distill::{close_caption, distill, teacher_checksum, PseudoCaptions};
pub use grammar::{parse, phrasings, render, token, weighted_phrasings, word, SceneDescriptor, SceneObject, VOCAB};

#[cfg(test)]
mod tests;

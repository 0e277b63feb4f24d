//! Snippet features, category text embeddings and annotations: loading,
//! writing, synthesis and temporal sampling.

mod io;
mod sampling;
mod synth;
mod types;

pub use io::{
    load_dataset, read_f32_matrix, read_ground_truth, read_ground_truth_infer_classes, write_dataset,
    write_f32_matrix, write_ground_truth, Manifest, ManifestVideo, GROUND_TRUTH_FILE, MANIFEST_FILE,
    TEXT_BANK_FILE,
};
pub(crate) use io::{read_json, write_json};
pub use sampling::{midpoint_indices, sample_snippets, strata, SampledSnippets, SnippetIndexMap};
pub use synth::{prototypes, synthesize_dataset, Prototypes, SynthConfig};
pub use types::{Dataset, GroundTruth, Segment, SnippetFeatureBundle, Subset, TextBank, Video};

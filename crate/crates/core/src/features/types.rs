use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Precomputed per-snippet features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetFeatureBundle {
    pub video_id: String,
    /// `[T_raw, D]` appearance features.
    pub rgb: Tensor,
    /// `[T_raw, D]` motion features.
    pub flow: Tensor,
    /// `[T_raw, D_v]` image embeddings of each snippet's middle frame.
    pub vlp_image: Tensor,
    pub fps: f64,
    pub duration: f64,
    /// Frames per snippet.
    pub snippet_len: usize,
}

impl SnippetFeatureBundle {
    pub fn num_snippets(&self) -> usize {
        self.rgb.rows()
    }

    pub fn seconds_per_snippet(&self) -> f64 {
        self.snippet_len as f64 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.video_id;
        if self.rgb.ndim() != 2 || self.flow.ndim() != 2 || self.vlp_image.ndim() != 2 {
            return Err(Error::Shape(format!("{id}: feature arrays must be matrices")));
        }
        if self.rgb.shape() != self.flow.shape() {
            return Err(Error::Shape(format!(
                "{id}: rgb {:?} and flow {:?} differ",
                self.rgb.shape(),
                self.flow.shape()
            )));
        }
        if self.vlp_image.rows() != self.rgb.rows() {
            return Err(Error::Shape(format!(
                "{id}: {} vlp rows for {} snippets",
                self.vlp_image.rows(),
                self.rgb.rows()
            )));
        }
        for (name, t) in [("rgb", &self.rgb), ("flow", &self.flow), ("vlp", &self.vlp_image)] {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("{id} {name} features")));
            }
        }
        if !(self.fps > 0.0) || self.snippet_len == 0 {
            return Err(Error::Data(format!("{id}: fps {} snippet_len {}", self.fps, self.snippet_len)));
        }
        let span = self.num_snippets() as f64 * self.seconds_per_snippet();
        if (self.duration - span).abs() > self.seconds_per_snippet() + 1e-9 {
            return Err(Error::Data(format!(
                "{id}: duration {}s disagrees with {} snippets ({span}s)",
                self.duration,
                self.num_snippets()
            )));
        }
        Ok(())
    }
}

/// Category embeddings: one frozen row per action class plus a trainable
/// background row in the last position.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    /// `[(C + 1), D_v]`.
    pub embeddings: Tensor,
    pub class_names: Vec<String>,
    pub background_row_trainable: bool,
}

impl TextBank {
    /// Builds a bank, rescaling action rows to unit norm when they are not
    /// already unit norm to within 1e-5.
    pub fn new(embeddings: Tensor, class_names: Vec<String>) -> Result<Self> {
        if embeddings.ndim() != 2 || embeddings.rows() != class_names.len() + 1 {
            return Err(Error::Shape(format!(
                "text bank {:?} for {} classes (+1 background)",
                embeddings.shape(),
                class_names.len()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("text bank".into()));
        }
        let d = embeddings.cols();
        let mut data = embeddings.into_data();
        for c in 0..class_names.len() {
            let row = &mut data[c * d..(c + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Data(format!("zero text embedding for {:?}", class_names[c])));
            }
            if (n - 1.0).abs() > 1e-5 {
                row.iter_mut().for_each(|v| *v = f64::from((*v / n) as f32));
            }
        }
        Ok(Self {
            embeddings: Tensor::matrix(class_names.len() + 1, d, data)?,
            class_names,
            background_row_trainable: true,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// `[C, D_v]` frozen action rows.
    pub fn action_rows(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.num_classes()).collect();
        self.embeddings.select_rows(&idx)
    }

    /// `[1, D_v]` background row.
    pub fn background_row(&self) -> Tensor {
        self.embeddings.select_rows(&[self.num_classes()])
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// One annotated action instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

/// Annotations of a labelled dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<String>,
    pub videos: BTreeMap<String, Vec<Segment>>,
}

impl GroundTruth {
    /// Multi-hot label vector over the `C` action classes.
    pub fn label_vector(&self, video_id: &str) -> Vec<f64> {
        let mut y = vec![0.0; self.classes.len()];
        for s in self.videos.get(video_id).into_iter().flatten() {
            y[s.class_id] = 1.0;
        }
        y
    }

    pub fn segments_of_class(&self, class_id: usize) -> impl Iterator<Item = (&str, &Segment)> {
        self.videos
            .iter()
            .flat_map(|(v, segs)| segs.iter().map(move |s| (v.as_str(), s)))
            .filter(move |(_, s)| s.class_id == class_id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub features: SnippetFeatureBundle,
    pub segments: Vec<Segment>,
    pub subset: Subset,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.features.video_id
    }

    pub fn label_vector(&self, num_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; num_classes];
        for s in &self.segments {
            y[s.class_id] = 1.0;
        }
        y
    }

    /// Sorted, deduplicated action classes present in the video.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.segments.iter().map(|s| s.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Videos, their annotations and the category text bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub vlp_dim: usize,
    pub videos: Vec<Video>,
    pub text_bank: TextBank,
}

impl Dataset {
    pub fn classes(&self) -> &[String] {
        &self.text_bank.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.text_bank.num_classes()
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.subset == subset)
    }

    pub fn ground_truth(&self, subset: Option<Subset>) -> GroundTruth {
        let videos = self
            .videos
            .iter()
            .filter(|v| subset.is_none_or(|s| v.subset == s))
            .map(|v| (v.id().to_string(), v.segments.clone()))
            .collect();
        GroundTruth { classes: self.classes().to_vec(), videos }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if self.text_bank.dim() != self.vlp_dim {
            return Err(Error::Shape(format!("text bank dim {} vs vlp dim {}", self.text_bank.dim(), self.vlp_dim)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            v.features.validate()?;
            if !seen.insert(v.id()) {
                return Err(Error::Data(format!("duplicate video id {}", v.id())));
            }
            if v.features.rgb.cols() != self.dim || v.features.vlp_image.cols() != self.vlp_dim {
                return Err(Error::Shape(format!(
                    "{}: feature dims {}/{} vs manifest {}/{}",
                    v.id(),
                    v.features.rgb.cols(),
                    v.features.vlp_image.cols(),
                    self.dim,
                    self.vlp_dim
                )));
            }
            for s in &v.segments {
                if s.class_id >= c {
                    return Err(Error::UnknownClass(format!("class index {}", s.class_id)));
                }
                if !(s.start < s.end) || s.start < 0.0 || s.end > v.features.duration + 1e-6 {
                    return Err(Error::Data(format!(
                        "{}: segment [{}, {}] outside [0, {}]",
                        v.id(),
                        s.start,
                        s.end,
                        v.features.duration
                    )));
                }
            }
        }
        Ok(())
    }
}

//! Snippet-feature ingestion: the FVB file format, manifests, fixed-length
//! resampling, balanced MIL batches and a synthetic dataset generator.

mod batch;
mod fvb;
mod manifest;
mod resample;
mod synth;

pub use batch::{sample_batch, Batch};
pub use fvb::{decode_fvb, encode_fvb, read_fvb, write_fvb, FVB_MAGIC};
pub use manifest::{Manifest, ManifestEntry};
pub use resample::resample_to_n;
pub use synth::{synth_generate, SynthConfig, SynthDataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames covered by one snippet.
pub const FRAMES_PER_SNIPPET: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VideoLabel {
    Normal,
    Abnormal,
}

impl VideoLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            VideoLabel::Normal => 0,
            VideoLabel::Abnormal => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(VideoLabel::Normal),
            1 => Some(VideoLabel::Abnormal),
            _ => None,
        }
    }
}

/// One video's snippet features (`T×F`) with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureSequence {
    pub id: String,
    pub features: Tensor,
    pub video_label: VideoLabel,
    /// Per-frame ground truth, `16·T` entries of 0/1 when present.
    pub frame_gt: Option<Vec<u8>>,
}

impl VideoFeatureSequence {
    pub fn new(
        id: impl Into<String>,
        features: Tensor,
        video_label: VideoLabel,
        frame_gt: Option<Vec<u8>>,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            features,
            video_label,
            frame_gt,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn snippets(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = self.features.dims2()?;
        if self.features.shape().len() != 2 || t == 0 || f == 0 {
            return Err(Error::Input(format!(
                "{}: features must be a non-empty T×F matrix, got {:?}",
                self.id,
                self.features.shape()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Input(format!("{}: non-finite feature value", self.id)));
        }
        if let Some(gt) = &self.frame_gt {
            if gt.len() != FRAMES_PER_SNIPPET * t {
                return Err(Error::Input(format!(
                    "{}: frame_gt has {} entries, expected {}",
                    self.id,
                    gt.len(),
                    FRAMES_PER_SNIPPET * t
                )));
            }
            if gt.iter().any(|&v| v > 1) {
                return Err(Error::Input(format!("{}: frame_gt entries must be 0 or 1", self.id)));
            }
        }
        Ok(())
    }
}

/// Column-wise concatenation of two modalities over the same snippets (e.g. RGB and audio).
pub fn concat_features(
    a: &VideoFeatureSequence,
    b: &VideoFeatureSequence,
) -> Result<VideoFeatureSequence> {
    if a.snippets() != b.snippets() {
        return Err(Error::Input(format!(
            "cannot fuse {} ({} snippets) with {} ({} snippets)",
            a.id,
            a.snippets(),
            b.id,
            b.snippets()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..a.snippets())
        .map(|i| [a.features.row(i), b.features.row(i)].concat())
        .collect();
    VideoFeatureSequence::new(
        a.id.clone(),
        Tensor::from_rows(&rows)?,
        a.video_label,
        a.frame_gt.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_length_must_be_sixteen_per_snippet() {
        let f = Tensor::zeros(2, 3);
        assert!(VideoFeatureSequence::new("v", f.clone(), VideoLabel::Normal, Some(vec![0; 31])).is_err());
        assert!(VideoFeatureSequence::new("v", f, VideoLabel::Normal, Some(vec![0; 32])).is_ok());
    }

    #[test]
    fn non_finite_features_rejected() {
        let f = Tensor::matrix(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(VideoFeatureSequence::new("v", f, VideoLabel::Normal, None).is_err());
    }

    #[test]
    fn modality_concat() {
        let a = VideoFeatureSequence::new("v", Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(), VideoLabel::Abnormal, None).unwrap();
        let b = VideoFeatureSequence::new("v", Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap(), VideoLabel::Abnormal, None).unwrap();
        let c = concat_features(&a, &b).unwrap();
        assert_eq!(c.features.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let short = VideoFeatureSequence::new("w", Tensor::zeros(1, 1), VideoLabel::Normal, None).unwrap();
        assert!(concat_features(&a, &short).is_err());
    }
}

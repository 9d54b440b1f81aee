//! Synthetic snippet features with magnitude-separated anomalies.
//!
//! Normal snippets are Gaussian around a centre of norm 1; anomalous snippets
//! are Gaussian around a second centre whose norm is `1 + separation`. Each
//! abnormal video holds one contiguous anomalous segment of
//! `⌈anomaly_ratio·T⌉` snippets. Values are rounded to `f32` so the FVB files
//! written for a dataset hold exactly the in-memory values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::{write_fvb, Manifest, ManifestEntry, VideoFeatureSequence, VideoLabel, FRAMES_PER_SNIPPET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::DetRng;

const NORMAL_CENTER_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Training videos per class.
    pub videos_per_class: usize,
    /// Test videos per class.
    pub test_videos_per_class: usize,
    /// Inclusive snippet-count range.
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub anomaly_ratio: f64,
    pub separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos_per_class: 20,
            test_videos_per_class: 10,
            min_len: 60,
            max_len: 240,
            feature_dim: 32,
            anomaly_ratio: 0.25,
            separation: 6.0,
            noise_sd: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract("synth_generate", msg));
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be > 0, got {}", self.separation));
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            return bad(format!("anomaly_ratio must be in (0,1), got {}", self.anomaly_ratio));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad(format!("noise_sd must be >= 0, got {}", self.noise_sd));
        }
        if self.videos_per_class == 0 || self.test_videos_per_class == 0 {
            return bad("need at least one video per class and split".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        Ok(())
    }

    /// Number of anomalous snippets in an abnormal video of length `t`.
    pub fn anomalous_snippets(&self, t: usize) -> usize {
        // Guard against 0.2·50 landing a hair above 10.
        ((self.anomaly_ratio * t as f64 - 1e-9).ceil() as usize).clamp(1, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<VideoFeatureSequence>,
    /// Test videos always carry frame ground truth.
    pub test: Vec<VideoFeatureSequence>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: DetRng,
    normal_center: Vec<f64>,
    anomaly_center: Vec<f64>,
}

impl Generator<'_> {
    fn direction(rng: &mut DetRng, dim: usize, norm: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x * norm / len).collect()
    }

    fn snippet(&mut self, anomalous: bool) -> Vec<f64> {
        let sd = self.cfg.noise_sd;
        let center = if anomalous { &self.anomaly_center } else { &self.normal_center };
        let noise: Vec<f64> = (0..center.len())
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        center
            .iter()
            .zip(noise)
            .map(|(c, e)| (c + sd * e) as f32 as f64)
            .collect()
    }

    fn video(&mut self, id: String, label: VideoLabel, with_gt: bool) -> Result<VideoFeatureSequence> {
        let t = self.rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let anomalous = match label {
            VideoLabel::Normal => 0..0,
            VideoLabel::Abnormal => {
                let k = self.cfg.anomalous_snippets(t);
                let start = self.rng.random_range(0..=t - k);
                start..start + k
            }
        };
        let mut data = Vec::with_capacity(t * self.cfg.feature_dim);
        for i in 0..t {
            data.extend(self.snippet(anomalous.contains(&i)));
        }
        let gt = with_gt.then(|| {
            (0..t * FRAMES_PER_SNIPPET)
                .map(|frame| anomalous.contains(&(frame / FRAMES_PER_SNIPPET)) as u8)
                .collect()
        });
        VideoFeatureSequence::new(id, Tensor::matrix(t, self.cfg.feature_dim, data)?, label, gt)
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = DetRng::seed_from_u64(cfg.seed);
    let normal_center = Generator::direction(&mut rng, cfg.feature_dim, NORMAL_CENTER_NORM);
    let anomaly_center =
        Generator::direction(&mut rng, cfg.feature_dim, NORMAL_CENTER_NORM + cfg.separation);
    let mut g = Generator {
        cfg,
        rng,
        normal_center,
        anomaly_center,
    };
    let mut split = |name: &str, count: usize, with_gt: bool| -> Result<Vec<VideoFeatureSequence>> {
        let mut out = Vec::with_capacity(2 * count);
        for (label, tag) in [(VideoLabel::Normal, "normal"), (VideoLabel::Abnormal, "abnormal")] {
            for i in 0..count {
                out.push(g.video(format!("{name}_{tag}_{i:03}"), label, with_gt)?);
            }
        }
        Ok(out)
    };
    let train = split("train", cfg.videos_per_class, false)?;
    let test = split("test", cfg.test_videos_per_class, true)?;
    Ok(SynthDataset { train, test })
}

impl SynthDataset {
    /// Writes `train/*.fvb`, `test/*.fvb`, `train.manifest` and `test.manifest`
    /// under `dir`, returning the two manifest paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for (split, seqs) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(split);
            fs::create_dir_all(&sub)?;
            let mut manifest = Manifest::default();
            for seq in seqs {
                let path = sub.join(format!("{}.fvb", seq.id));
                write_fvb(seq, &path)?;
                manifest.entries.push(ManifestEntry {
                    path,
                    label: seq.video_label,
                    gt_path: None,
                });
            }
            let mpath = dir.join(format!("{split}.manifest"));
            manifest.save(&mpath)?;
            paths.push(mpath);
        }
        Ok((paths[0].clone(), paths[1].clone()))
    }
}

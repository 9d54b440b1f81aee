//! Frame-level evaluation: ROC-AUC, average precision and false alarm rate.
//!
//! Ties are handled as score groups: AUC gives half credit to tied
//! positive/negative pairs, AP takes precision at the end of each group.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::features::{VideoFeatureSequence, VideoLabel, FRAMES_PER_SNIPPET};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Repeats each snippet score once per frame.
pub fn expand_snippets(snippet_scores: &[f64]) -> Vec<f64> {
    snippet_scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, FRAMES_PER_SNIPPET))
        .collect()
}

fn check_inputs(op: &'static str, scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::contract(op, format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract(op, "scores must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::contract(op, "labels must be 0 or 1"));
    }
    Ok(())
}

/// `(positives, negatives)` per distinct score, highest score first.
fn score_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed above");
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Area under the ROC curve by threshold sweep and trapezoids.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs("roc_auc", scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc needs both classes".into()));
    }
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (p, n) in score_groups(scores, labels) {
        // Trapezoid in unnormalized (fp, tp) units.
        area += n as f64 * (tp as f64 + 0.5 * p as f64);
        tp += p;
        fp += n;
    }
    debug_assert_eq!((tp, fp), (pos, neg));
    Ok(area / (pos as f64 * neg as f64))
}

/// Average precision: Σ over score groups of recall gain × precision at the group's end.
pub fn pr_ap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs("pr_ap", scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("pr_ap needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in score_groups(scores, labels) {
        tp += p;
        seen += p + n;
        ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

/// Fraction of normal-frame scores at or above `threshold`.
pub fn far(normal_scores: &[f64], threshold: f64) -> Result<f64> {
    if normal_scores.is_empty() {
        return Err(Error::UndefinedMetric("far needs at least one normal frame".into()));
    }
    let alarms = normal_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(alarms as f64 / normal_scores.len() as f64)
}

/// Per-frame scores of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrace {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
}

impl ScoreTrace {
    /// `video_id,frame_index,score` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.frame_scores.len() * 32);
        for (i, s) in self.frame_scores.iter().enumerate() {
            writeln!(out, "{},{i},{s}", self.video_id).expect("writing to a String");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<ScoreTrace>> {
        let mut traces: Vec<ScoreTrace> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Input(format!("score line {}: {what}: {line:?}", n + 1));
            // Ids may contain commas; index and score never do.
            let mut parts = line.rsplitn(3, ',');
            let (score, index, id) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(i), Some(id)) => (s, i, id),
                _ => return Err(bad("expected video_id,frame_index,score")),
            };
            let score: f64 = score.trim().parse().map_err(|_| bad("bad score"))?;
            let index: usize = index.trim().parse().map_err(|_| bad("bad frame index"))?;
            if !score.is_finite() {
                return Err(bad("non-finite score"));
            }
            if traces.last().is_none_or(|t| t.video_id != id) {
                if traces.iter().any(|t| t.video_id == id) {
                    return Err(bad("video lines are not contiguous"));
                }
                traces.push(ScoreTrace { video_id: id.to_string(), frame_scores: Vec::new() });
            }
            let t = traces.last_mut().expect("pushed above");
            if index != t.frame_scores.len() {
                return Err(bad("frame indices must count up from 0"));
            }
            t.frame_scores.push(score);
        }
        Ok(traces)
    }
}

/// Writes `<dir>/<video_id>.csv` for every trace.
pub fn write_traces(traces: &[ScoreTrace], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    traces
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.csv", t.video_id));
            fs::write(&path, t.to_csv())?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.csv` trace in `dir`, in file-name order.
pub fn read_traces(dir: impl AsRef<Path>) -> Result<Vec<ScoreTrace>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(ScoreTrace::parse_csv(&fs::read_to_string(&f)?)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    All,
    /// Also report metrics over abnormal videos only.
    AbnormalOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    /// `None` without normal test videos.
    pub far: Option<f64>,
    pub auc_sub: Option<f64>,
    pub ap_sub: Option<f64>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut out = format!("auc={:.6}\nap={:.6}\n", self.auc, self.ap);
        for (k, v) in [("far", self.far), ("auc_sub", self.auc_sub), ("ap_sub", self.ap_sub)] {
            if let Some(v) = v {
                writeln!(out, "{k}={v:.6}").expect("writing to a String");
            }
        }
        out
    }
}

/// Ground truth of one test video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTruth {
    pub video_id: String,
    pub label: VideoLabel,
    pub frames: Vec<u8>,
}

impl VideoTruth {
    pub fn from_sequence(seq: &VideoFeatureSequence) -> Result<Self> {
        let frames = match (&seq.frame_gt, seq.video_label) {
            (Some(gt), _) => gt.clone(),
            (None, VideoLabel::Normal) => vec![0; seq.snippets() * FRAMES_PER_SNIPPET],
            (None, VideoLabel::Abnormal) => {
                return Err(Error::Input(format!("abnormal video {} has no frame ground truth", seq.id)))
            }
        };
        Ok(Self { video_id: seq.id.clone(), label: seq.video_label, frames })
    }
}

/// Concatenates frames across videos (in ground-truth order) and applies the metrics.
pub fn evaluate(traces: &[ScoreTrace], truth: &[VideoTruth], threshold: f64, subset: Subset) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &ScoreTrace> = HashMap::new();
    for t in traces {
        if by_id.insert(t.video_id.as_str(), t).is_some() {
            return Err(Error::Input(format!("duplicate trace for video {}", t.video_id)));
        }
    }
    let mut gt_ids = HashSet::new();
    for g in truth {
        if !gt_ids.insert(g.video_id.as_str()) {
            return Err(Error::Input(format!("duplicate ground truth for video {}", g.video_id)));
        }
    }
    if let Some(extra) = traces.iter().find(|t| !gt_ids.contains(t.video_id.as_str())) {
        return Err(Error::Input(format!("no ground truth for video {}", extra.video_id)));
    }

    let (mut all_s, mut all_y) = (Vec::new(), Vec::new());
    let (mut sub_s, mut sub_y) = (Vec::new(), Vec::new());
    let mut normal_s = Vec::new();
    for g in truth {
        let t = by_id
            .get(g.video_id.as_str())
            .ok_or_else(|| Error::Input(format!("no scores for video {}", g.video_id)))?;
        let len = t.frame_scores.len().min(g.frames.len());
        if t.frame_scores.len() != g.frames.len() {
            warn!(
                "video {}: {} scored frames vs {} ground-truth frames, using {len}",
                g.video_id,
                t.frame_scores.len(),
                g.frames.len()
            );
        }
        let (s, y) = (&t.frame_scores[..len], &g.frames[..len]);
        all_s.extend_from_slice(s);
        all_y.extend_from_slice(y);
        match g.label {
            VideoLabel::Normal => normal_s.extend_from_slice(s),
            VideoLabel::Abnormal => {
                sub_s.extend_from_slice(s);
                sub_y.extend_from_slice(y);
            }
        }
    }
    let mut report = EvalReport {
        auc: roc_auc(&all_s, &all_y)?,
        ap: pr_ap(&all_s, &all_y)?,
        far: (!normal_s.is_empty()).then(|| far(&normal_s, threshold)).transpose()?,
        ..Default::default()
    };
    if subset == Subset::AbnormalOnly {
        report.auc_sub = Some(roc_auc(&sub_s, &sub_y)?);
        report.ap_sub = Some(pr_ap(&sub_s, &sub_y)?);
    }
    Ok(report)
}

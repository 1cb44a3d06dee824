//! Grading, localization and window-quality metrics.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean absolute grade difference.
    pub average_distance: f64,
    /// `confusion[true − 1][predicted − 1]`.
    pub confusion: Vec<Vec<usize>>,
    pub averaging: Averaging,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision/recall/F1, accuracy, AD and the confusion matrix for grades in `1..=C`.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
    averaging: Averaging,
) -> Result<ClassificationScores> {
    if predictions.is_empty() {
        return Err(invalid("classification metrics over an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predictions
        .iter()
        .chain(labels)
        .find(|&&g| g == 0 || g > classes)
    {
        return Err(invalid(format!("grade {bad} outside 1..={classes}")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l - 1][p - 1] += 1;
    }
    let n = predictions.len();
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let accuracy = ratio(correct, n);
    let average_distance =
        predictions.iter().zip(labels).map(|(&p, &l)| p.abs_diff(l)).sum::<usize>() as f64 / n as f64;

    let (precision, recall, f1) = match averaging {
        Averaging::Micro => (accuracy, accuracy, accuracy),
        Averaging::Macro => {
            let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
            for k in 0..classes {
                let tp = confusion[k][k];
                let support: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[k]).sum();
                if support == 0 && predicted == 0 {
                    log::warn!("grade {} absent from labels and predictions; scored as 0", k + 1);
                }
                let (p, r) = (ratio(tp, predicted), ratio(tp, support));
                ps += p;
                rs += r;
                fs += harmonic(p, r);
            }
            let c = classes as f64;
            (ps / c, rs / c, fs / c)
        }
    };
    Ok(ClassificationScores {
        accuracy,
        precision,
        recall,
        f1,
        average_distance,
        confusion,
        averaging,
    })
}

/// Mean `|t̂ − t|` in frames.
pub fn localization_mae(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(invalid("MAE over an empty set"));
    }
    if predicted.len() != truth.len() {
        return Err(invalid(format!(
            "{} predicted timestamps for {} annotations",
            predicted.len(),
            truth.len()
        )));
    }
    let total: usize = predicted.iter().zip(truth).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(total as f64 / predicted.len() as f64)
}

/// IoU of two half-open frame intervals.
pub fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    ratio(inter, union)
}

/// Best IoU of any window against the segment (0 for an empty list).
pub fn best_iou(windows: &[(usize, usize)], segment: (usize, usize)) -> f64 {
    windows
        .iter()
        .map(|&w| interval_iou(w, segment))
        .fold(0.0, f64::max)
}

/// Mean over videos of the best IoU per video.
pub fn window_iou(proposals: &[Vec<(usize, usize)>], segments: &[(usize, usize)]) -> Result<f64> {
    if proposals.len() != segments.len() {
        return Err(invalid(format!(
            "{} proposal lists for {} segments",
            proposals.len(),
            segments.len()
        )));
    }
    if proposals.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = proposals.iter().zip(segments).map(|(w, &s)| best_iou(w, s)).sum();
    Ok(total / proposals.len() as f64)
}

/// Everything recorded about one evaluated video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: usize,
    pub grade: usize,
    pub predicted_grade: usize,
    pub timestamp: usize,
    pub predicted_timestamp: Option<usize>,
    pub segment: (usize, usize),
    pub windows: Vec<WindowRecord>,
    /// Frame probabilities `ŷ_P` (empty when the mode has no localizer).
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub peak: usize,
    pub start: usize,
    pub end: usize,
    pub amplitude_left: f64,
    pub sigma_left: f64,
    pub amplitude_right: f64,
    pub sigma_right: f64,
    pub logits: Vec<f64>,
}

impl WindowRecord {
    /// Two-sided Gaussian `A·exp(−(τ−μ)²/(2σ²))` with the side's parameters.
    pub fn fitted_value(&self, tau: usize) -> f64 {
        let (a, s) = if tau < self.peak {
            (self.amplitude_left, self.sigma_left)
        } else {
            (self.amplitude_right, self.sigma_right)
        };
        let d = tau as f64 - self.peak as f64;
        a * (-d * d / (2.0 * s * s)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub classes: usize,
    pub scores: ClassificationScores,
    /// `None` for modes without a localizer.
    pub mae: Option<f64>,
    pub mean_window_iou: f64,
    pub videos: Vec<VideoRecord>,
}

impl EvalReport {
    pub fn from_records(
        mode: impl Into<String>,
        classes: usize,
        videos: Vec<VideoRecord>,
        averaging: Averaging,
    ) -> Result<Self> {
        let preds: Vec<usize> = videos.iter().map(|v| v.predicted_grade).collect();
        let labels: Vec<usize> = videos.iter().map(|v| v.grade).collect();
        let scores = classification_metrics(&preds, &labels, classes, averaging)?;
        let mae = match videos.iter().map(|v| v.predicted_timestamp).collect::<Option<Vec<_>>>() {
            Some(t_hat) => {
                let t: Vec<usize> = videos.iter().map(|v| v.timestamp).collect();
                Some(localization_mae(&t_hat, &t)?)
            }
            None => None,
        };
        let windows: Vec<Vec<(usize, usize)>> = videos
            .iter()
            .map(|v| v.windows.iter().map(|w| (w.start, w.end)).collect())
            .collect();
        let segments: Vec<(usize, usize)> = videos.iter().map(|v| v.segment).collect();
        let mean_window_iou = window_iou(&windows, &segments)?;
        Ok(Self {
            mode: mode.into(),
            classes,
            scores,
            mae,
            mean_window_iou,
            videos,
        })
    }

    pub fn to_table(&self) -> String {
        let s = &self.scores;
        let mut out = String::new();
        let avg = match s.averaging {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
        };
        let _ = writeln!(out, "mode          {}", self.mode);
        let _ = writeln!(out, "videos        {}", self.videos.len());
        let _ = writeln!(out, "accuracy      {:.2}%", 100.0 * s.accuracy);
        let _ = writeln!(out, "precision     {:.2}  ({avg})", 100.0 * s.precision);
        let _ = writeln!(out, "recall        {:.2}  ({avg})", 100.0 * s.recall);
        let _ = writeln!(out, "f1            {:.2}  ({avg})", 100.0 * s.f1);
        let _ = writeln!(out, "AD            {:.3}", s.average_distance);
        match self.mae {
            Some(m) => {
                let _ = writeln!(out, "MAE (frames)  {m:.2}");
            }
            None => {
                let _ = writeln!(out, "MAE (frames)  n/a");
            }
        }
        let _ = writeln!(out, "window IoU    {:.3}", self.mean_window_iou);
        let _ = writeln!(out, "\nconfusion (rows = true grade, cols = predicted)");
        let _ = write!(out, "     ");
        for k in 1..=self.classes {
            let _ = write!(out, "{k:>6}");
        }
        out.push('\n');
        for (k, row) in s.confusion.iter().enumerate() {
            let _ = write!(out, "{:>5}", k + 1);
            for v in row {
                let _ = write!(out, "{v:>6}");
            }
            out.push('\n');
        }
        out
    }

    /// Long-form `true,predicted,count` rows, one per matrix cell.
    pub fn write_confusion_csv(&self, w: impl Write) -> Result<()> {
        write_confusion_csv(&self.scores.confusion, w)
    }
}

pub fn write_confusion_csv(confusion: &[Vec<usize>], mut w: impl Write) -> Result<()> {
    writeln!(w, "true,predicted,count")?;
    for (i, row) in confusion.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            writeln!(w, "{},{},{v}", i + 1, j + 1)?;
        }
    }
    Ok(())
}

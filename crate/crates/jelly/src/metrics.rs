//! Objective evaluation battery: classification scores over label sequences
//! and track metrics over aligned per-frame arrays. Everything here is a
//! pure function; degenerate cases return flagged outcomes instead of
//! silently coercing to zero.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: references {refs}, predictions {preds}")]
    LengthMismatch { refs: usize, preds: usize },
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: reference {ref_shape:?}, test {test_shape:?}")]
    ShapeMismatch { ref_shape: (usize, usize), test_shape: (usize, usize) },
    #[error("label {label} outside the {categories}-category domain")]
    LabelOutOfRange { label: usize, categories: usize },
    #[error("mel-cepstral distortion needs at least 2 coefficients, got {0}")]
    TooFewCoefficients(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    /// Overall accuracy (weighted by class frequency through the data).
    pub wa: f64,
    /// Mean per-category recall over categories present in the references.
    pub ua: f64,
    /// Mean per-category F1 over categories present in references or
    /// predictions; a category that is predicted but never referenced (or
    /// referenced but never predicted) contributes 0. Categories absent from
    /// both are skipped.
    pub macro_f1: f64,
    /// Rows are references, columns predictions.
    pub confusion: Array2<usize>,
}

pub fn classification_metrics(
    references: &[usize],
    predictions: &[usize],
    categories: usize,
) -> Result<ClassificationReport, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::Empty);
    }
    if references.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch { refs: references.len(), preds: predictions.len() });
    }
    for &l in references.iter().chain(predictions.iter()) {
        if l >= categories {
            return Err(MetricsError::LabelOutOfRange { label: l, categories });
        }
    }
    let mut confusion = Array2::<usize>::zeros((categories, categories));
    for (&r, &p) in references.iter().zip(predictions) {
        confusion[[r, p]] += 1;
    }
    let n = references.len() as f64;
    let wa = (0..categories).map(|c| confusion[[c, c]]).sum::<usize>() as f64 / n;

    let mut recall_sum = 0.0;
    let mut recall_count = 0usize;
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for c in 0..categories {
        let ref_count: usize = confusion.row(c).sum();
        let pred_count: usize = confusion.column(c).sum();
        let hit = confusion[[c, c]] as f64;
        if ref_count > 0 {
            recall_sum += hit / ref_count as f64;
            recall_count += 1;
        }
        if ref_count > 0 || pred_count > 0 {
            let denom = (ref_count + pred_count) as f64;
            f1_sum += 2.0 * hit / denom;
            f1_count += 1;
        }
    }
    Ok(ClassificationReport {
        wa,
        ua: recall_sum / recall_count as f64,
        macro_f1: f1_sum / f1_count as f64,
        confusion,
    })
}

/// Mean absolute utterance-duration difference, in the callers' time unit.
pub fn ddur(reference: &[f64], test: &[f64]) -> Result<f64, MetricsError> {
    if reference.len() != test.len() {
        return Err(MetricsError::LengthMismatch { refs: reference.len(), preds: test.len() });
    }
    if reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = reference.iter().zip(test).map(|(r, t)| (r - t).abs()).sum();
    Ok(sum / reference.len() as f64)
}

/// Mel-cepstral distortion in dB: (10/ln 10) sqrt(2) times the mean frame
/// Euclidean distance, over coefficients 1.. when skip_c0 (the usual
/// convention; coefficient 0 is overall energy).
pub fn mcd(
    reference: &ArrayView2<f64>,
    test: &ArrayView2<f64>,
    skip_c0: bool,
) -> Result<f64, MetricsError> {
    if reference.dim() != test.dim() {
        return Err(MetricsError::ShapeMismatch { ref_shape: reference.dim(), test_shape: test.dim() });
    }
    let (frames, coeffs) = reference.dim();
    if coeffs < 2 {
        return Err(MetricsError::TooFewCoefficients(coeffs));
    }
    if frames == 0 {
        return Err(MetricsError::Empty);
    }
    let start = usize::from(skip_c0);
    let mut total = 0.0f64;
    for f in 0..frames {
        let mut sq = 0.0f64;
        for c in start..coeffs {
            let d = reference[[f, c]] - test[[f, c]];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2 * total / frames as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    pub f0: Vec<f64>,
    pub voicing: Vec<bool>,
    pub periodicity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Report {
    /// RMSE over frames voiced in both tracks; None when no frame qualifies.
    pub rmse_f0: Option<f64>,
    pub rmse_periodicity: f64,
    /// Voiced as the positive class; 0.0 with a flag when neither track has
    /// a voiced frame.
    pub f1_vuv: f64,
    pub flags: Vec<String>,
}

pub fn f0_metrics(reference: &F0Track, test: &F0Track) -> Result<F0Report, MetricsError> {
    let n = reference.f0.len();
    if reference.voicing.len() != n || reference.periodicity.len() != n {
        return Err(MetricsError::LengthMismatch { refs: n, preds: reference.voicing.len() });
    }
    if test.f0.len() != n || test.voicing.len() != n || test.periodicity.len() != n {
        return Err(MetricsError::LengthMismatch { refs: n, preds: test.f0.len() });
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let mut flags = Vec::new();

    let mut sq = 0.0f64;
    let mut both = 0usize;
    for i in 0..n {
        if reference.voicing[i] && test.voicing[i] {
            let d = reference.f0[i] - test.f0[i];
            sq += d * d;
            both += 1;
        }
    }
    let rmse_f0 = if both > 0 {
        Some((sq / both as f64).sqrt())
    } else {
        flags.push("no_mutually_voiced_frames".into());
        None
    };

    let rmse_periodicity = {
        let sq: f64 = reference
            .periodicity
            .iter()
            .zip(&test.periodicity)
            .map(|(r, t)| (r - t) * (r - t))
            .sum();
        (sq / n as f64).sqrt()
    };

    let tp = (0..n).filter(|&i| reference.voicing[i] && test.voicing[i]).count() as f64;
    let fp = (0..n).filter(|&i| !reference.voicing[i] && test.voicing[i]).count() as f64;
    let fn_ = (0..n).filter(|&i| reference.voicing[i] && !test.voicing[i]).count() as f64;
    let f1_vuv = if tp + fp + fn_ == 0.0 {
        flags.push("no_voiced_frames_in_either_track".into());
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };

    Ok(F0Report { rmse_f0, rmse_periodicity, f1_vuv, flags })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRate {
    pub rate: f64,
    pub edits: usize,
    pub flags: Vec<String>,
}

/// Levenshtein edit distance over token ids.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let n = hypothesis.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, &r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Word error rate: edit distance over the reference length. An empty
/// reference against a nonempty hypothesis has no meaningful normalizer;
/// the rate then equals the raw edit count (all insertions), flagged.
pub fn word_error_rate(reference: &[usize], hypothesis: &[usize]) -> ErrorRate {
    let edits = edit_distance(reference, hypothesis);
    if reference.is_empty() {
        let mut flags = Vec::new();
        if !hypothesis.is_empty() {
            flags.push("empty_reference".into());
        }
        return ErrorRate { rate: edits as f64, edits, flags };
    }
    ErrorRate { rate: edits as f64 / reference.len() as f64, edits, flags: Vec::new() }
}

/// Linear time-rescale of a per-frame track to a target frame count, used to
/// pre-align tracks of different lengths before comparison.
pub fn rescale_frames(track: &ArrayView2<f64>, target_frames: usize) -> Array2<f64> {
    let (frames, dim) = track.dim();
    assert!(frames > 0 && target_frames > 0, "rescale needs nonempty tracks");
    let mut out = Array2::<f64>::zeros((target_frames, dim));
    for f in 0..target_frames {
        let pos = if target_frames == 1 {
            0.0
        } else {
            f as f64 * (frames - 1) as f64 / (target_frames - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        for d in 0..dim {
            out[[f, d]] = track[[lo, d]] * (1.0 - w) + track[[hi, d]] * w;
        }
    }
    out
}

/// One line of an eval report: name, value (absent for undefined outcomes),
/// the sample count behind it, and any degeneracy flags.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub value: Option<f64>,
    pub count: usize,
    pub flags: Vec<String>,
}

impl MetricRecord {
    pub fn new(name: &str, value: f64, count: usize) -> Self {
        MetricRecord { name: name.into(), value: Some(value), count, flags: Vec::new() }
    }

    pub fn render(&self) -> String {
        let value = match self.value {
            Some(v) => format!("{v:.6}"),
            None => "undefined".to_string(),
        };
        let flags = if self.flags.is_empty() { "-".to_string() } else { self.flags.join(",") };
        format!("metric name={} value={} count={} flags={}", self.name, value, self.count, flags)
    }
}

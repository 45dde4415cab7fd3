//! Mean radial error, successful detection rate and inter-observer
//! variability, plus the per-landmark report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point;

pub const SDR_THRESHOLDS_MM: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("px_per_mm must be positive, got {0}")]
    Scale(f64),
    #[error("thresholds must be sorted ascending")]
    Unsorted,
}

/// Euclidean distance per pair, in millimetres.
pub fn radial_errors(
    preds: &[Point],
    truth: &[Point],
    px_per_mm: f64,
) -> Result<Vec<f64>, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::Length(preds.len(), truth.len()));
    }
    if px_per_mm.is_nan() || px_per_mm <= 0.0 {
        return Err(MetricsError::Scale(px_per_mm));
    }
    Ok(preds
        .iter()
        .zip(truth)
        .map(|(p, t)| p.dist(*t) / px_per_mm)
        .collect())
}

/// Mean and population standard deviation.
pub fn mre(errors: &[f64]) -> Result<(f64, f64), MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Percentage of errors `≤` each threshold.
pub fn sdr(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricsError::Unsorted);
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect())
}

/// Per-pair distance of each label to the pair's mean (half the separation),
/// in millimetres.
pub fn iov_errors(a: &[Point], b: &[Point], px_per_mm: f64) -> Result<Vec<f64>, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    if px_per_mm.is_nan() || px_per_mm <= 0.0 {
        return Err(MetricsError::Scale(px_per_mm));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| {
            let m = Point::new((p.x + q.x) / 2.0, (p.y + q.y) / 2.0);
            (p.dist(m) + q.dist(m)) / 2.0 / px_per_mm
        })
        .collect())
}

pub fn iov(a: &[Point], b: &[Point], px_per_mm: f64) -> Result<f64, MetricsError> {
    let e = iov_errors(a, b, px_per_mm)?;
    Ok(mre(&e)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkReport {
    pub name: String,
    pub count: usize,
    pub mre_mm: f64,
    pub std_mm: f64,
    pub iov_mm: Option<f64>,
    pub iov_std_mm: Option<f64>,
    /// Percentages at [`SDR_THRESHOLDS_MM`].
    pub sdr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub thresholds_mm: Vec<f64>,
    pub landmarks: Vec<LandmarkReport>,
    /// Mean of the per-landmark rows.
    pub average: LandmarkReport,
}

impl LandmarkReport {
    pub fn new(
        name: &str,
        preds: &[Point],
        truth: &[Point],
        annotators: Option<(&[Point], &[Point])>,
        px_per_mm: f64,
    ) -> Result<Self, MetricsError> {
        let e = radial_errors(preds, truth, px_per_mm)?;
        let (m, s) = mre(&e)?;
        let (iov_mm, iov_std_mm) = match annotators {
            Some((a, b)) => {
                let (im, is) = mre(&iov_errors(a, b, px_per_mm)?)?;
                (Some(im), Some(is))
            }
            None => (None, None),
        };
        Ok(LandmarkReport {
            name: name.to_string(),
            count: e.len(),
            mre_mm: m,
            std_mm: s,
            iov_mm,
            iov_std_mm,
            sdr: sdr(&e, &SDR_THRESHOLDS_MM)?,
        })
    }
}

impl EvalReport {
    pub fn new(title: &str, landmarks: Vec<LandmarkReport>) -> Result<Self, MetricsError> {
        if landmarks.is_empty() {
            return Err(MetricsError::Empty);
        }
        let k = landmarks.len() as f64;
        let avg = |f: &dyn Fn(&LandmarkReport) -> f64| landmarks.iter().map(f).sum::<f64>() / k;
        let all_iov = landmarks.iter().all(|l| l.iov_mm.is_some());
        let average = LandmarkReport {
            name: "Average".into(),
            count: landmarks.iter().map(|l| l.count).sum(),
            mre_mm: avg(&|l| l.mre_mm),
            std_mm: avg(&|l| l.std_mm),
            iov_mm: all_iov.then(|| avg(&|l| l.iov_mm.unwrap_or(0.0))),
            iov_std_mm: all_iov.then(|| avg(&|l| l.iov_std_mm.unwrap_or(0.0))),
            sdr: (0..SDR_THRESHOLDS_MM.len())
                .map(|i| avg(&|l| l.sdr[i]))
                .collect(),
        };
        Ok(EvalReport {
            title: title.to_string(),
            thresholds_mm: SDR_THRESHOLDS_MM.to_vec(),
            landmarks,
            average,
        })
    }

    /// Landmark rows with MRE, IOV and SDR columns.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let name_w = self
            .landmarks
            .iter()
            .map(|l| l.name.len() + 6)
            .max()
            .unwrap_or(8)
            .max(8);
        let _ = write!(
            s,
            "{:<name_w$} | {:>15} | {:>15}",
            "Landmark", "MRE (mm)", "IOV (mm)"
        );
        for t in &self.thresholds_mm {
            let _ = write!(s, " | {:>7}", format!("{t:.1}mm"));
        }
        s.push('\n');
        let rule_len = name_w + 2 * 18 + 10 * self.thresholds_mm.len();
        let rule = "-".repeat(rule_len);
        let _ = writeln!(s, "{rule}");
        let row = |s: &mut String, l: &LandmarkReport, label: &str| {
            let iov = match (l.iov_mm, l.iov_std_mm) {
                (Some(m), Some(d)) => format!("{m:.2} ± {d:.2}"),
                _ => "-".to_string(),
            };
            let _ = write!(
                s,
                "{:<name_w$} | {:>15} | {:>15}",
                label,
                format!("{:.2} ± {:.2}", l.mre_mm, l.std_mm),
                iov
            );
            for v in &l.sdr {
                let _ = write!(s, " | {v:>7.2}");
            }
            s.push('\n');
        };
        for (i, l) in self.landmarks.iter().enumerate() {
            row(&mut s, l, &format!("{} (L{})", l.name, i + 1));
        }
        let _ = writeln!(s, "{rule}");
        row(&mut s, &self.average, "Average");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_examples() {
        let p = [Point::new(30.0, 40.0)];
        let z = [Point::new(0.0, 0.0)];
        assert_eq!(radial_errors(&p, &z, 10.0).unwrap(), vec![5.0]);
        assert_eq!(radial_errors(&z, &z, 10.0).unwrap(), vec![0.0]);
        assert!(matches!(
            radial_errors(&p, &[], 10.0),
            Err(MetricsError::Length(1, 0))
        ));
        assert!(radial_errors(&p, &z, 0.0).is_err());
    }

    #[test]
    fn mre_examples() {
        assert_eq!(mre(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        assert_eq!(mre(&[0.0, 2.0]).unwrap(), (1.0, 1.0));
        assert_eq!(mre(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn sdr_examples() {
        assert_eq!(sdr(&[0.0; 5], &SDR_THRESHOLDS_MM).unwrap(), vec![100.0; 4]);
        assert_eq!(sdr(&[1.9, 2.1], &[2.0]).unwrap(), vec![50.0]);
        assert_eq!(sdr(&[2.0], &[2.0]).unwrap(), vec![100.0]);
        assert_eq!(sdr(&[1.0], &[3.0, 2.0]), Err(MetricsError::Unsorted));
    }

    #[test]
    fn iov_examples() {
        let a = [Point::new(0.0, 0.0)];
        let b = [Point::new(20.0, 0.0)];
        assert_eq!(iov(&a, &b, 10.0).unwrap(), 1.0);
        assert_eq!(iov(&a, &a, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn report_layout() {
        let t = [Point::new(0.0, 0.0), Point::new(100.0, 100.0)];
        let p = [Point::new(0.0, 10.0), Point::new(100.0, 130.0)];
        let l = LandmarkReport::new("Sella", &p, &t, Some((&t, &p)), 10.0).unwrap();
        assert_eq!(l.mre_mm, 2.0);
        assert_eq!(l.std_mm, 1.0);
        assert_eq!(l.sdr, vec![50.0, 50.0, 100.0, 100.0]);
        assert_eq!(l.iov_mm, Some(1.0));
        let r = EvalReport::new("Test", vec![l.clone(), l]).unwrap();
        let text = r.to_text();
        assert!(text.contains("MRE (mm)") && text.contains("IOV (mm)"));
        assert!(
            text.contains("2.0mm")
                && text.contains("2.5mm")
                && text.contains("3.0mm")
                && text.contains("4.0mm")
        );
        assert!(text.contains("Sella (L1)") && text.contains("Average"));
        assert!(text.contains("2.00 ± 1.00"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }
}

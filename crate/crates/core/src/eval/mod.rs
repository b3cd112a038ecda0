//! Confusion accumulation and the four change-detection metrics.

use crate::error::{CdError, CdResult};
use crate::raster::Raster;
use crate::scalar::Scalar;
use std::ops::Add;

/// Pixelwise confusion counts; the positive class is "changed".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Confusions over disjoint pixel sets combine by addition.
impl Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Precision, recall, F1, and IoU. `degenerate` is set when any ratio had a
/// 0/0 denominator and was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate: bool,
}

fn require_binary<S: Scalar>(name: &str, r: &Raster<S>) -> CdResult<()> {
    if r.channels() != 1 {
        return Err(CdError::InvalidRaster(format!(
            "{name} mask must be single-channel, got {}",
            r.channels()
        )));
    }
    if r.data()
        .iter()
        .any(|&v| v != S::zero() && v != S::one())
    {
        return Err(CdError::InvalidRaster(format!(
            "{name} mask contains values other than 0 and 1"
        )));
    }
    Ok(())
}

/// Exact pixel counts of prediction against ground truth. Both masks must
/// be strictly binary and of equal shape.
pub fn confusion<S: Scalar>(pred: &Raster<S>, gt: &Raster<S>) -> CdResult<Confusion> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(CdError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    require_binary("prediction", pred)?;
    require_binary("ground truth", gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == S::one(), g == S::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Like [`confusion`], but counts only pixels where `valid` is 1. Used to
/// exclude warped-border fill from scoring.
pub fn confusion_masked<S: Scalar>(
    pred: &Raster<S>,
    gt: &Raster<S>,
    valid: &Raster<S>,
) -> CdResult<Confusion> {
    if valid.height() != gt.height() || valid.width() != gt.width() {
        return Err(CdError::ShapeMismatch(
            "validity mask shape differs from ground truth".into(),
        ));
    }
    require_binary("validity", valid)?;
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(CdError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    require_binary("prediction", pred)?;
    require_binary("ground truth", gt)?;
    let mut c = Confusion::default();
    for ((&p, &g), &v) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if v != S::one() {
            continue;
        }
        match (p == S::one(), g == S::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// The four metrics from a confusion. 0/0 ratios come back as 0 with the
/// degeneracy flag set, so empty-change tiles never abort a batch.
pub fn metrics(c: &Confusion) -> Metrics {
    let mut degenerate = false;
    let pre = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let rec = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if pre + rec > 0.0 {
        2.0 * pre * rec / (pre + rec)
    } else {
        degenerate = true;
        0.0
    };
    let iou = if c.tp + c.fp + c.fn_ > 0 {
        c.tp as f64 / (c.tp + c.fp + c.fn_) as f64
    } else {
        degenerate = true;
        0.0
    };
    Metrics {
        pre,
        rec,
        f1,
        iou,
        degenerate,
    }
}

/// Metrics from stated precision and recall, following the binary-mask
/// identities f1 = 2pr/(p+r) and iou = f1/(2-f1).
pub fn metrics_from_pre_rec(pre: f64, rec: f64) -> Metrics {
    let degenerate = pre + rec <= 0.0;
    let f1 = if degenerate {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    };
    let iou = if f1 > 0.0 { f1 / (2.0 - f1) } else { 0.0 };
    Metrics {
        pre,
        rec,
        f1,
        iou,
        degenerate,
    }
}

/// One `scenario,pre,rec,f1,iou` CSV line, four decimals.
pub fn csv_line(scenario: &str, m: &Metrics) -> String {
    format!(
        "{scenario},{:.4},{:.4},{:.4},{:.4}",
        m.pre, m.rec, m.f1, m.iou
    )
}

/// The CSV header matching [`csv_line`].
pub const CSV_HEADER: &str = "scenario,pre,rec,f1,iou";

//! Verification metrics: latitude-weighted RMSE and anomaly correlation,
//! plus threshold-exceedance skill scores (CSI, SEDI).

use serde::{Deserialize, Serialize};

use crate::fieldio::{FieldTensor, GridSpec};

/// Per-row latitude weights, normalized so they sum to the row count.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights {
    pub weights: Vec<f64>,
}

impl LatWeights {
    pub fn get(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// Weights from explicit cell-center latitudes (degrees).
pub fn lat_weights_from(lats: &[f64]) -> LatWeights {
    let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos()).collect();
    let total: f64 = cos.iter().sum();
    let n = lats.len() as f64;
    LatWeights {
        weights: cos.iter().map(|c| n * c / total).collect(),
    }
}

/// Weights for the global `h`-row grid.
pub fn lat_weights(h: usize) -> LatWeights {
    let grid = GridSpec::global(h, 1);
    lat_weights_from(&(0..h).map(|i| grid.lat(i)).collect::<Vec<_>>())
}

/// Weights for a field's own registration.
pub fn lat_weights_for(field: &FieldTensor) -> LatWeights {
    lat_weights_from(&(0..field.h).map(|i| field.grid.lat(i)).collect::<Vec<_>>())
}

/// Latitude-weighted RMSE per channel.
pub fn rmse(pred: &FieldTensor, truth: &FieldTensor, w: &LatWeights) -> Vec<f64> {
    assert!(pred.same_shape(truth), "rmse shapes must match");
    assert_eq!(w.weights.len(), pred.h);
    let denom = (pred.h * pred.w) as f64;
    (0..pred.c)
        .map(|c| {
            let mut acc = 0.0;
            for i in 0..pred.h {
                let wi = w.get(i);
                for j in 0..pred.w {
                    let d = pred.get(c, i, j) - truth.get(c, i, j);
                    acc += wi * d * d;
                }
            }
            (acc / denom).sqrt()
        })
        .collect()
}

/// Latitude-weighted anomaly correlation per channel. Channels whose anomaly
/// norm vanishes come back as NaN.
pub fn acc(
    pred: &FieldTensor,
    truth: &FieldTensor,
    clim: &FieldTensor,
    w: &LatWeights,
) -> Vec<f64> {
    assert!(pred.same_shape(truth) && pred.same_shape(clim), "acc shapes must match");
    (0..pred.c)
        .map(|c| {
            let mut num = 0.0;
            let mut pp = 0.0;
            let mut tt = 0.0;
            for i in 0..pred.h {
                let wi = w.get(i);
                for j in 0..pred.w {
                    let pa = pred.get(c, i, j) - clim.get(c, i, j);
                    let ta = truth.get(c, i, j) - clim.get(c, i, j);
                    num += wi * pa * ta;
                    pp += wi * pa * pa;
                    tt += wi * ta * ta;
                }
            }
            let den = (pp * tt).sqrt();
            if den == 0.0 {
                f64::NAN
            } else {
                num / den
            }
        })
        .collect()
}

/// Threshold-exceedance contingency counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ContingencyCounts {
    pub fn tally(&mut self, pred_event: bool, truth_event: bool) {
        match (pred_event, truth_event) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Nearest-rank quantile of a sample (q in [0, 1]).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Count exceedance events of `threshold` in pred vs truth for one channel.
pub fn exceedance_counts(
    pred: &FieldTensor,
    truth: &FieldTensor,
    channel: usize,
    threshold: f64,
) -> ContingencyCounts {
    assert!(pred.same_shape(truth));
    let mut counts = ContingencyCounts::default();
    for (p, t) in pred.channel(channel).iter().zip(truth.channel(channel)) {
        counts.tally(*p > threshold, *t > threshold);
    }
    counts
}

/// Critical success index TP/(TP+FP+FN); 0 when the denominator vanishes.
pub fn csi(c: &ContingencyCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        c.tp as f64 / den as f64
    }
}

const RATE_CLAMP: f64 = 1e-9;

/// SEDI with the rate definitions F = FP/(FP+TP), H = TP/(TP+FN). Rates are
/// clamped into [1e-9, 1−1e-9] before the logs; the bool reports whether
/// clamping fired.
pub fn sedi(c: &ContingencyCounts) -> (f64, bool) {
    let f_den = (c.fp + c.tp) as f64;
    let h_den = (c.tp + c.fn_) as f64;
    let f_raw = if f_den == 0.0 { 0.0 } else { c.fp as f64 / f_den };
    let h_raw = if h_den == 0.0 { 0.0 } else { c.tp as f64 / h_den };
    let f = f_raw.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
    let h = h_raw.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
    let clamped = f != f_raw || h != h_raw;
    let num = f.ln() - h.ln() - (1.0 - f).ln() + (1.0 - h).ln();
    let den = f.ln() + h.ln() + (1.0 - f).ln() + (1.0 - h).ln();
    (num / den, clamped)
}

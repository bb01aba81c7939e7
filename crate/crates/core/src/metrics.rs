//! Mask-restricted evaluation: PSNR, Pearson correlation, and the exact
//! two-sided Wilcoxon signed-rank test.
//!
//! PSNR uses the mask-interior *mean* squared error and the reference's
//! mask-interior maximum as the peak, so values do not depend on volume size
//! or on anything outside the mask.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::mathf;
use crate::volume::{Mask, Volume, VolumeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("mask must contain at least 2 voxels, got {0}")]
    MaskTooSmall(usize),
    #[error("undefined reference peak: reference maximum inside the mask is not positive")]
    UndefinedReferencePeak,
    #[error("zero variance inside the mask ({0})")]
    ZeroVariance(&'static str),
    #[error("degenerate: all paired differences are zero")]
    Degenerate,
    #[error("exact enumeration supports 1..=25 nonzero differences, got {0}")]
    TooManyDifferences(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Evaluation summary for one (reference, test) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// +inf (serialized as the string "inf") when the volumes agree exactly.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr_db: f64,
    pub correlation: f64,
    pub n_voxels: u64,
    pub mask_source: String,
}

fn ser_psnr<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(alloc::format!("bad psnr: {s}"))),
    }
}

fn check_pair(reference: &Volume, test: &Volume, mask: &Mask) -> Result<usize, MetricsError> {
    mask.check_dims(reference)?;
    mask.check_dims(test)?;
    let n = mask.count_true();
    if n < 2 {
        return Err(MetricsError::MaskTooSmall(n));
    }
    Ok(n)
}

/// 10 log10(MAX^2 / MSE) with MAX the reference's mask-interior maximum and
/// MSE the mask-interior mean squared difference. Returns +inf when MSE = 0.
pub fn psnr(reference: &Volume, test: &Volume, mask: &Mask) -> Result<f64, MetricsError> {
    let n = check_pair(reference, test, mask)?;
    let mut max_a = f64::NEG_INFINITY;
    let mut sq = 0.0f64;
    for (i, &b) in mask.bits.iter().enumerate() {
        if !b {
            continue;
        }
        let r = reference.data[i] as f64;
        if r > max_a {
            max_a = r;
        }
        let d = r - test.data[i] as f64;
        sq += d * d;
    }
    if !(max_a > 0.0) {
        return Err(MetricsError::UndefinedReferencePeak);
    }
    let mse = sq / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * mathf::log10(max_a * max_a / mse))
}

/// Sample Pearson correlation over mask voxels.
pub fn pearson(reference: &Volume, test: &Volume, mask: &Mask) -> Result<f64, MetricsError> {
    let n = check_pair(reference, test, mask)? as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for (i, &b) in mask.bits.iter().enumerate() {
        if !b {
            continue;
        }
        let x = reference.data[i] as f64;
        let y = test.data[i] as f64;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 0.0 {
        return Err(MetricsError::ZeroVariance("reference"));
    }
    if vy <= 0.0 {
        return Err(MetricsError::ZeroVariance("test"));
    }
    let r = (n * sxy - sx * sy) / mathf::sqrt(vx * vy);
    Ok(r.clamp(-1.0, 1.0))
}

/// Exact two-sided signed-rank p-value from the full 2^n sign-assignment
/// distribution; tied |differences| get average ranks; zero differences are
/// dropped first. Requires 1..=25 nonzero differences.
///
/// Average ranks are half-integers at worst, so doubling them makes every
/// achievable statistic an integer and the distribution is computed exactly
/// by convolution over 2^n equally likely assignments.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<f64, MetricsError> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(MetricsError::Degenerate);
    }
    if n > 25 {
        return Err(MetricsError::TooManyDifferences(n));
    }
    let ranks2 = doubled_average_ranks(&nonzero);
    let w2_obs: u64 =
        nonzero.iter().zip(&ranks2).filter(|(&d, _)| d > 0.0).map(|(_, &r)| r).sum();

    // distribution of the doubled statistic over all sign assignments
    let total_rank2: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total_rank2 as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in &ranks2 {
        let r = r as usize;
        let prev = counts[..=reach].to_vec();
        for (w, &c) in prev.iter().enumerate() {
            if c > 0 {
                counts[w + r] += c;
            }
        }
        reach += r;
    }

    let le: u64 = counts[..=w2_obs as usize].iter().sum();
    let ge: u64 = counts[w2_obs as usize..].iter().sum();
    let tail = le.min(ge);
    let total = 1u64 << n;
    let p = 2.0 * tail as f64 / total as f64;
    Ok(if p > 1.0 { 1.0 } else { p })
}

/// Doubled average ranks of |values| (ties share the average of the ranks
/// they span).
fn doubled_average_ranks(values: &[f64]) -> Vec<u64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        mathf::abs(values[a]).partial_cmp(&mathf::abs(values[b])).expect("finite diffs")
    });
    let mut ranks2 = vec![0u64; n];
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j + 1 < n && mathf::abs(values[order[j + 1]]) == mathf::abs(values[order[i]]) {
            j += 1;
        }
        // ranks i+1 ..= j+1 (1-based); doubled average = (i+1) + (j+1)
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks2[k] = r2;
        }
        i = j + 1;
    }
    ranks2
}

/// Aligned text table in the published comparison layout: one row per
/// (metric, method), one column per subject.
pub fn format_eval_table(methods: &[(&str, Vec<EvalReport>)]) -> String {
    use core::fmt::Write;
    let n_subjects = methods.iter().map(|(_, rs)| rs.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{:<12} {:<16}", "Metric", "Method");
    for s in 0..n_subjects {
        let _ = write!(out, " {:>9}", alloc::format!("#{}", s + 1));
    }
    out.push('\n');
    for (metric, pick) in
        [("PSNR (dB)", 0usize), ("Correlation", 1usize)]
    {
        for (name, reports) in methods {
            let _ = write!(out, "{metric:<12} {name:<16}");
            for r in reports {
                let v = if pick == 0 { r.psnr_db } else { r.correlation };
                if v.is_infinite() {
                    let _ = write!(out, " {:>9}", "inf");
                } else {
                    let _ = write!(out, " {:>9.4}", v);
                }
            }
            out.push('\n');
        }
    }
    out
}

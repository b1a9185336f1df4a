//! PSNR, SSIM and NMSE on restacked volumes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{ImageSlice, ImageVolume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range assumed by SSIM and the default PSNR peak.
pub const DATA_RANGE: f64 = 1.0;

/// Stacks slices in order into a single-channel volume.
pub fn restack(slices: &[ImageSlice]) -> Result<ImageVolume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Invalid("cannot restack zero slices".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for (k, s) in slices.iter().enumerate() {
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape(format!(
                "slice {k} is {}x{}, slice 0 is {h}x{w}",
                s.height, s.width
            )));
        }
        data.extend_from_slice(&s.data);
    }
    ImageVolume::new(slices.len(), h, w, 1, data)
}

fn check_pair(pred: &ImageVolume, reference: &ImageVolume) -> Result<()> {
    let a = (pred.depth, pred.height, pred.width, pred.channels);
    let b = (
        reference.depth,
        reference.height,
        reference.width,
        reference.channels,
    );
    if a != b {
        return Err(Error::shape(format!("prediction {a:?} vs reference {b:?}")));
    }
    Ok(())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// PSNR in dB over raw values; `f64::INFINITY` when they are identical.
pub fn psnr_values(pred: &[f64], reference: &[f64], max_val: f64) -> Result<f64> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "{} vs {} values",
            pred.len(),
            reference.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub fn psnr(pred: &ImageVolume, reference: &ImageVolume, max_val: f64) -> Result<f64> {
    check_pair(pred, reference)?;
    psnr_values(&widen(&pred.data), &widen(&reference.data), max_val)
}

/// ‖pred − ref‖² / ‖ref‖² over raw values.
pub fn nmse_values(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::shape(format!(
            "{} vs {} values",
            pred.len(),
            reference.len()
        )));
    }
    let denom: f64 = reference.iter().map(|r| r * r).sum();
    if denom == 0.0 {
        return Err(Error::Invalid("NMSE against an all-zero reference".into()));
    }
    let num: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r) * (p - r))
        .sum();
    Ok(num / denom)
}

pub fn nmse(pred: &ImageVolume, reference: &ImageVolume) -> Result<f64> {
    check_pair(pred, reference)?;
    nmse_values(&widen(&pred.data), &widen(&reference.data))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable "valid" filtering: output is `(h−10)×(w−10)`.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let line = &img[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = taps
                .iter()
                .zip(&line[j..j + SSIM_WINDOW])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(i + k) * ow + j])
                .sum();
        }
    }
    out
}

/// Mean SSIM of one 2-D image pair over all fully-inside windows.
pub fn ssim_slice(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "{height}x{width} slice is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::shape(format!(
            "{} and {} values for {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, height, width, &taps);
    let mu_b = filter_valid(b, height, width, &taps);
    let aa = filter_valid(&prod(a, a), height, width, &taps);
    let bb = filter_valid(&prod(b, b), height, width, &taps);
    let ab = filter_valid(&prod(a, b), height, width, &taps);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean over slices of the per-slice SSIM (2-D windows).
pub fn ssim(pred: &ImageVolume, reference: &ImageVolume) -> Result<f64> {
    check_pair(pred, reference)?;
    if pred.channels != 1 {
        return Err(Error::shape("SSIM expects single-channel volumes"));
    }
    let n = pred.slice_len();
    let mut total = 0.0;
    for z in 0..pred.depth {
        let a = widen(&pred.data[z * n..(z + 1) * n]);
        let b = widen(&reference.data[z * n..(z + 1) * n]);
        total += ssim_slice(&a, &b, pred.height, pred.width)?;
    }
    Ok(total / pred.depth as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub case: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl MetricReport {
    pub fn evaluate(
        case: impl Into<String>,
        pred: &ImageVolume,
        reference: &ImageVolume,
        max_val: f64,
    ) -> Result<Self> {
        Ok(Self {
            case: case.into(),
            psnr: psnr(pred, reference, max_val)?,
            ssim: ssim(pred, reference)?,
            nmse: nmse(pred, reference)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.case,
            fmt_psnr(self.psnr),
            self.ssim,
            self.nmse
        )
    }
}

pub const METRICS_HEADER: &str = "case,psnr,ssim,nmse";

fn fmt_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Field-wise mean of several reports.
pub fn mean_report(case: impl Into<String>, reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to average".into()));
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        case: case.into(),
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        nmse: reports.iter().map(|r| r.nmse).sum::<f64>() / n,
    })
}

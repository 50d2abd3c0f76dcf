//! Per-image PSNR/SSIM tables.

use serde::Serialize;

use crate::error::Result;
use crate::io::{psnr, ssim, Dataset};
use crate::model::Network;
use crate::task::Variant;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    /// Absent when the image has no reference.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricTable {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mean_psnr = mean(rows.iter().map(|r| r.psnr));
        let mean_ssim = mean(rows.iter().map(|r| r.ssim));
        MetricTable {
            rows,
            mean_psnr,
            mean_ssim,
        }
    }

    /// `id,psnr_db,ssim` rows followed by a `mean` row; absent metrics are
    /// empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.id, cell(r.psnr), cell(r.ssim)));
        }
        s.push_str(&format!("mean,{},{}\n", cell(self.mean_psnr), cell(self.mean_ssim)));
        s
    }
}

/// Scores `enhance(input)` against each reference.
pub fn evaluate_with(data: &Dataset, mut enhance: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<MetricTable> {
    let mut rows = Vec::with_capacity(data.len());
    for r in &data.records {
        let (p, s) = match &r.reference {
            Some(reference) => {
                let out = enhance(&r.input)?;
                (Some(psnr(&out, reference)?), Some(ssim(&out, reference)?))
            }
            None => (None, None),
        };
        rows.push(MetricRow {
            id: r.id.clone(),
            psnr: p,
            ssim: s,
        });
    }
    Ok(MetricTable::from_rows(rows))
}

pub fn evaluate(net: &Network, data: &Dataset, variant: Variant) -> Result<MetricTable> {
    evaluate_with(data, |y| net.enhance(y, variant))
}

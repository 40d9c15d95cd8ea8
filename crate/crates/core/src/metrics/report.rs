use std::fmt::Write as _;

use serde_json::{json, Map, Value};

use super::{en, mi, psnr, qabf, scd, sd, ssim, vif, MetricError};
use crate::image::Image;

pub const METRIC_NAMES: [&str; 8] = ["EN", "SD", "MI", "VIF", "QABF", "SCD", "PSNR", "SSIM"];

const CONVENTIONS: &str = "output scored against the clean reference; EN and SD on the output alone; \
SD on unit scale; EN/MI on 8-bit quantised levels; VIF on 0-255 scale; SCD uses the degraded input and the reference as sources; \
PSNR on unit peak, inf for identical pairs";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image: String,
    /// Values in [`METRIC_NAMES`] order.
    pub values: [f64; 8],
}

impl MetricRow {
    /// Scores `output` against `reference`; `degraded` is the network input.
    pub fn compute(
        image: impl Into<String>,
        output: &Image,
        reference: &Image,
        degraded: &Image,
    ) -> Result<Self, MetricError> {
        Ok(Self {
            image: image.into(),
            values: [
                en(output),
                sd(output),
                mi(output, reference)?,
                vif(reference, output)?,
                qabf(output, reference)?,
                scd(output, degraded, reference)?,
                psnr(output, reference)?,
                ssim(output, reference)?,
            ],
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|m| *m == metric).map(|i| self.values[i])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub degradation: String,
    pub rows: Vec<MetricRow>,
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6}")
    }
}

fn json_value(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::String(fmt_value(v))
    }
}

impl MetricReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.get(metric)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn std(&self, metric: &str) -> Option<f64> {
        let m = self.mean(metric)?;
        if m.is_infinite() {
            return Some(f64::NAN);
        }
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.get(metric)).collect();
        Some((vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt())
    }

    /// A `#` conventions line, a header row and one row per image.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {CONVENTIONS}\nimage,{}\n", METRIC_NAMES.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| fmt_value(*v)).collect();
            let _ = writeln!(s, "{},{}", r.image, vals.join(","));
        }
        s
    }

    pub fn summary_json(&self) -> Value {
        let mut means = Map::new();
        let mut stds = Map::new();
        for m in METRIC_NAMES {
            means.insert(m.into(), self.mean(m).map_or(Value::Null, json_value));
            stds.insert(m.into(), self.std(m).map_or(Value::Null, json_value));
        }
        json!({
            "degradation": self.degradation,
            "images": self.rows.len(),
            "conventions": CONVENTIONS,
            "mean": means,
            "std": stds,
        })
    }
}

use std::fmt::Write as _;

use serde::Serialize;

use super::{DecisionKind, SimReport};
use crate::error::{Error, Result};

/// CSV columns. Layer rows fill the first three; the final `summary` row
/// carries the mean hit rate, total latency, and the four summary statistics.
pub const CSV_HEADER: &str = "layer,hit_rate,latency_ms,std,gap,transfer_fraction";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    PlotData,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" | "plot" => Ok(ReportFormat::PlotData),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn render_report(report: &SimReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::PlotData => render_plotdata(&[report]),
    }
}

fn render_csv(r: &SimReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    if r.activations == 0 {
        return out;
    }
    for (l, (rate, lat)) in r
        .static_hits
        .per_layer
        .iter()
        .zip(&r.layer_latency_ms)
        .enumerate()
    {
        let _ = writeln!(out, "{l},{rate},{lat},,,");
    }
    let _ = writeln!(
        out,
        "summary,{},{},{},{},{}",
        r.static_hits.mean, r.total_latency_ms, r.static_hits.std, r.static_hits.gap, r.transfer_fraction
    );
    out
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn render_text(r: &SimReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "strategy {}: {} tokens, {} layers, {} activations",
        r.strategy, r.tokens, r.layers, r.activations
    );
    if r.activations == 0 {
        out.push_str("no activations\n");
        return out;
    }
    let h = &r.static_hits;
    let _ = writeln!(
        out,
        "static hit rate: mean {:.2}%  std {:.2}%  max-min gap {:.2}%",
        pct(h.mean),
        pct(h.std),
        pct(h.gap)
    );
    let _ = writeln!(
        out,
        "  prefill mean {:.2}%  decode mean {:.2}%",
        pct(r.prefill_hits.mean),
        pct(r.decode_hits.mean)
    );
    let _ = writeln!(
        out,
        "GPU-served activations: {:.2}%  (n_critical = {})",
        pct(r.gpu_served_rate),
        r.critical_batch
    );
    let _ = writeln!(
        out,
        "cache: capacity {}  hits {}/{} ({:.2}%)  evictions {}",
        r.cache_capacity,
        r.cache_hits,
        r.cache_lookups,
        pct(r.cache_hit_rate),
        r.evictions
    );
    out.push_str("decisions:");
    for k in DecisionKind::ALL {
        let _ = write!(out, " {}={}", k.as_str(), r.decisions.get(k));
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "latency: total {:.3} ms  transfer {:.3} ms ({:.2}%)  per-layer std {:.3} ms",
        r.total_latency_ms,
        r.transfer_ms,
        pct(r.transfer_fraction),
        r.layer_latency_std
    );
    out
}

#[derive(Serialize)]
struct Series<'a> {
    strategy: &'a str,
    layer: Vec<usize>,
    hit_rate: &'a [f64],
    latency_ms: &'a [f64],
}

/// JSON with one per-layer series per report, suitable for plotting.
pub fn render_plotdata(reports: &[&SimReport]) -> String {
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            strategy: r.strategy.as_str(),
            layer: (0..r.static_hits.per_layer.len()).collect(),
            hit_rate: &r.static_hits.per_layer,
            latency_ms: &r.layer_latency_ms,
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "series": series }))
        .expect("plot data serializes")
}

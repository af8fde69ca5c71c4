use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dynamics::StepTrace;
use crate::error::{Error, Result};
use crate::metrics::RolloutRecord;

pub const TRACE_HEADER: &str = "# reachsteer-trace v1";
pub const ROLLOUT_HEADER: &str = "# reachsteer-rollouts v1";
pub const LOG_FORMAT: &str = "reachsteer-train-log";
pub const REPORT_VERSION: u32 = 1;

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

/// CSV with one row per step of every episode.
pub fn trace_csv(traces: &[Vec<StepTrace>]) -> String {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    out.push_str("episode,step,guidance_norm,ell,reward,distance_to_nearest_target\n");
    for (ep, trace) in traces.iter().enumerate() {
        for r in trace {
            let _ = writeln!(
                out,
                "{ep},{},{},{},{},{}",
                r.step,
                fmt_f64(r.guidance_norm),
                fmt_f64(r.ell),
                fmt_f64(r.reward),
                r.distance_to_nearest_target.map(fmt_f64).unwrap_or_default()
            );
        }
    }
    out
}

/// Parsed row of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    pub guidance_norm: f64,
    pub ell: f64,
    pub reward: f64,
    pub distance_to_nearest_target: Option<f64>,
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Checkpoint("trace file lacks its version header".into()));
    }
    lines.next();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::Config(format!("trace line {}: malformed row `{l}`", i + 3));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(TraceRow {
                episode: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                guidance_norm: num(f[2])?,
                ell: num(f[3])?,
                reward: num(f[4])?,
                distance_to_nearest_target: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}

/// Mean guidance norm per step index from parsed trace rows.
pub fn mean_guidance_from_rows(rows: &[TraceRow]) -> Vec<f64> {
    let steps = rows.iter().map(|r| r.step + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; steps];
    let mut cnt = vec![0usize; steps];
    for r in rows {
        sum[r.step] += r.guidance_norm;
        cnt[r.step] += 1;
    }
    sum.iter().zip(&cnt).map(|(s, &c)| s / c.max(1) as f64).collect()
}

pub fn rollout_csv(rows: &[RolloutRecord]) -> String {
    let mut out = String::new();
    out.push_str(ROLLOUT_HEADER);
    out.push('\n');
    out.push_str("caption_id,seed_index,reward,terminal_ell,min_ell,failed,replication,final_x\n");
    for r in rows {
        let x: Vec<String> = r.final_x.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.caption_id,
            r.seed_index,
            fmt_f64(r.reward),
            fmt_f64(r.terminal_ell),
            fmt_f64(r.min_ell),
            r.failed,
            fmt_f64(r.replication),
            x.join(" ")
        );
    }
    out
}

/// JSON-lines: a header record followed by one record per item.
pub fn jsonl<T: Serialize, H: Serialize>(header: &H, records: &[T]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// JSON document wrapped with a format name and version.
pub fn versioned_json<T: Serialize>(format: &str, body: &T) -> Result<String> {
    #[derive(Serialize)]
    struct Wrapped<'a, T> {
        format: &'a str,
        version: u32,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut s = serde_json::to_string_pretty(&Wrapped {
        format,
        version: REPORT_VERSION,
        body,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trip() {
        let traces = vec![vec![
            StepTrace {
                step: 0,
                guidance_norm: 24.0,
                ell: -0.7,
                reward: 0.0,
                distance_to_nearest_target: Some(3.5),
            },
            StepTrace {
                step: 1,
                guidance_norm: 0.1 + 0.2,
                ell: 0.3,
                reward: 0.9,
                distance_to_nearest_target: None,
            },
        ]];
        let csv = trace_csv(&traces);
        let rows = parse_trace_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].guidance_norm, 0.1 + 0.2);
        assert_eq!(rows[1].distance_to_nearest_target, None);
        assert_eq!(mean_guidance_from_rows(&rows), vec![24.0, 0.1 + 0.2]);
        assert!(parse_trace_csv("episode,step\n").is_err());
    }
}

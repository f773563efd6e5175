use std::path::Path;

use super::episode::EpisodeReport;
use crate::error::{Error, Result};

const HEADER: &str =
    "attack,success-rate,mean-queries,sd-queries,detections,raw-l2-detections,accounts,mean-distortion";

pub fn emit_report(reports: &[EpisodeReport], path: &Path) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.attack,
            r.success_rate,
            r.mean_queries,
            r.sd_queries,
            r.mean_detections,
            r.raw_l2_detections,
            r.mean_accounts,
            r.mean_distortion,
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_report(text: &str) -> Result<Vec<EpisodeReport>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(Error::Format(format!("bad report header {other:?}"))),
    }
    let mut reports = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("bad report row {line:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        reports.push(EpisodeReport {
            attack: f[0].to_string(),
            success_rate: num(f[1])?,
            mean_queries: num(f[2])?,
            sd_queries: num(f[3])?,
            mean_detections: num(f[4])?,
            raw_l2_detections: num(f[5])?,
            mean_accounts: num(f[6])?,
            mean_distortion: num(f[7])?,
        });
    }
    Ok(reports)
}

/// Threshold-vs-k sweep data as `k tau` lines (plot source).
pub fn emit_k_sweep(pairs: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("k tau\n");
    for (k, tau) in pairs {
        out.push_str(&format!("{k} {tau}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_k_sweep(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("k tau") {
        return Err(Error::Format("bad sweep header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, tau) = l
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad sweep row {l:?}")))?;
            Ok((
                k.parse().map_err(|_| Error::Format(format!("bad k {k:?}")))?,
                tau.parse().map_err(|_| Error::Format(format!("bad tau {tau:?}")))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EpisodeReport {
        EpisodeReport {
            attack: "nes".into(),
            success_rate: 0.85,
            mean_queries: 1234.5,
            sd_queries: 56.25,
            mean_detections: 61.0,
            raw_l2_detections: 8.5,
            mean_accounts: 62.0,
            mean_distortion: 0.05,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(parse_report(&text).unwrap().is_empty());
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let reports = vec![sample(), EpisodeReport { attack: "none".into(), ..sample() }];
        emit_report(&reports, &path).unwrap();
        let back = parse_report(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn sweep_round_trips_with_row_per_k() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.dat");
        let pairs = vec![(1, 0.1), (5, 0.2), (50, 0.35)];
        emit_k_sweep(&pairs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_k_sweep(&path).unwrap(), pairs);
    }

    #[test]
    fn malformed_report_rejected() {
        assert!(parse_report("bogus header\n").is_err());
        let bad = format!("{HEADER}\nnes,1,2\n");
        assert!(parse_report(&bad).is_err());
    }
}

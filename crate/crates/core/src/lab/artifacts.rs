//! CSV schemas of run artifacts, with readers that reproduce the written
//! values exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "iteration,f_out,objective,outer_metric,val_metric,test_metric,refined_edges";
pub const PROFILE_HEADER: &str = "i,j,distance,abs_hypergradient,iteration";
pub const SIGNAL_HEADER: &str = "i,j,distance,abs_signal,iteration";
pub const REFINED_HEADER: &str = "iteration,refined_edges";

/// Distance stored for edges with no path to the labelled nodes.
pub const INF_TOKEN: &str = "inf";

/// One line of `history.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub f_out: f64,
    pub objective: f64,
    /// Training metric on `V_out`.
    pub outer_metric: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub refined_edges: usize,
}

/// One edge of a per-iteration hypergradient profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub i: usize,
    pub j: usize,
    pub distance: Option<usize>,
    pub magnitude: f64,
    pub iteration: usize,
}

/// Number of edges whose weight exceeds one percent of the largest weight;
/// all-nonpositive weights count as none refined.
pub fn count_refined(weights: &[f64]) -> usize {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return 0;
    }
    let threshold = 0.01 * max;
    weights.iter().filter(|&&w| w > threshold).count()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Data lines of a CSV file after checking its header.
fn data_lines<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        Some((_, h)) => return Err(parse_err(path, 1, format!("header `{h}`, expected `{header}`"))),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let width = header.split(',').count();
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(k, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                return Err(parse_err(path, k + 1, format!("{} fields, expected {width}", f.len())));
            }
            Ok((k + 1, f))
        })
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| parse_err(path, line, format!("{name} `{s}`: {e}")))
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            r.iteration, r.f_out, r.objective, r.outer_metric, r.val_metric, r.test_metric, r.refined_edges
        )
        .expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = read(path)?;
    data_lines(path, &text, HISTORY_HEADER)?
        .into_iter()
        .map(|(k, f)| {
            Ok(HistoryRow {
                iteration: field(path, k, "iteration", f[0])?,
                f_out: field(path, k, "f_out", f[1])?,
                objective: field(path, k, "objective", f[2])?,
                outer_metric: field(path, k, "outer_metric", f[3])?,
                val_metric: field(path, k, "val_metric", f[4])?,
                test_metric: field(path, k, "test_metric", f[5])?,
                refined_edges: field(path, k, "refined_edges", f[6])?,
            })
        })
        .collect()
}

pub fn write_refined(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = format!("{REFINED_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{}", r.iteration, r.refined_edges).expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_refined(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    data_lines(path, &text, REFINED_HEADER)?
        .into_iter()
        .map(|(k, f)| Ok((field(path, k, "iteration", f[0])?, field(path, k, "refined_edges", f[1])?)))
        .collect()
}

/// Writes a profile under `header` ([`PROFILE_HEADER`] or
/// [`SIGNAL_HEADER`]).
pub fn write_profile(path: &Path, header: &str, rows: &[ProfileRow]) -> Result<()> {
    let mut out = format!("{header}\n");
    for r in rows {
        let d = r.distance.map_or_else(|| INF_TOKEN.to_string(), |d| d.to_string());
        writeln!(out, "{},{},{d},{:e},{}", r.i, r.j, r.magnitude, r.iteration).expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_profile(path: &Path, header: &str) -> Result<Vec<ProfileRow>> {
    let text = read(path)?;
    data_lines(path, &text, header)?
        .into_iter()
        .map(|(k, f)| {
            Ok(ProfileRow {
                i: field(path, k, "i", f[0])?,
                j: field(path, k, "j", f[1])?,
                distance: if f[2] == INF_TOKEN { None } else { Some(field(path, k, "distance", f[2])?) },
                magnitude: field(path, k, "magnitude", f[3])?,
                iteration: field(path, k, "iteration", f[4])?,
            })
        })
        .collect()
}

/// Edges of a profile sharing one distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub distance: Option<usize>,
    pub count: usize,
    pub max_magnitude: f64,
    /// Edges whose magnitude exceeds `1e-12`.
    pub nonzero: usize,
}

/// Per-distance summary in increasing distance, the infinite bucket last.
pub fn bucket_summary(rows: &[ProfileRow]) -> Vec<Bucket> {
    let mut buckets: std::collections::BTreeMap<(bool, usize), Bucket> = Default::default();
    for r in rows {
        let key = (r.distance.is_none(), r.distance.unwrap_or(0));
        let b = buckets.entry(key).or_insert(Bucket { distance: r.distance, count: 0, max_magnitude: 0.0, nonzero: 0 });
        b.count += 1;
        b.max_magnitude = b.max_magnitude.max(r.magnitude);
        b.nonzero += usize::from(r.magnitude > 1e-12);
    }
    buckets.into_values().collect()
}

pub fn write_buckets(path: &Path, buckets: &[Bucket]) -> Result<()> {
    let mut out = String::from("distance,count,nonzero,max_magnitude\n");
    for b in buckets {
        let d = b.distance.map_or_else(|| INF_TOKEN.to_string(), |d| d.to_string());
        writeln!(out, "{d},{},{},{:e}", b.count, b.nonzero, b.max_magnitude).expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refined_count_conventions() {
        assert_eq!(count_refined(&[0.5; 7]), 7);
        let mut w = vec![1e-6; 9];
        w[3] = 1.0;
        assert_eq!(count_refined(&w), 1);
        assert_eq!(count_refined(&[0.0, 0.0]), 0);
        assert_eq!(count_refined(&[]), 0);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            HistoryRow {
                iteration: 0,
                f_out: 0.1 + 0.2,
                objective: -1.5e-300,
                outer_metric: 1.0 / 3.0,
                val_metric: f64::NAN,
                test_metric: 0.75,
                refined_edges: 12,
            },
            HistoryRow {
                iteration: 1,
                f_out: 1e300,
                objective: 0.0,
                outer_metric: 0.5,
                val_metric: 0.25,
                test_metric: 1.0,
                refined_edges: 0,
            },
        ];
        let p = dir.path().join("h.csv");
        write_history(&p, &rows).unwrap();
        let back = read_history(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].val_metric.is_nan());
        assert_eq!(back[1], rows[1]);
        assert_eq!(back[0].f_out.to_bits(), rows[0].f_out.to_bits());

        let prof = vec![
            ProfileRow { i: 0, j: 3, distance: Some(2), magnitude: 1.234e-17, iteration: 9 },
            ProfileRow { i: 1, j: 2, distance: None, magnitude: 0.0, iteration: 9 },
        ];
        let p = dir.path().join("p.csv");
        write_profile(&p, PROFILE_HEADER, &prof).unwrap();
        assert_eq!(read_profile(&p, PROFILE_HEADER).unwrap(), prof);
        assert!(std::fs::read_to_string(&p).unwrap().contains(",inf,"));
    }

    #[test]
    fn empty_history_is_a_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{HISTORY_HEADER}\n"));
        assert!(read_history(&p).unwrap().is_empty());
        assert!(matches!(read_history(&dir.path().join("missing.csv")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn buckets_put_infinity_last() {
        let rows = vec![
            ProfileRow { i: 0, j: 1, distance: None, magnitude: 0.0, iteration: 0 },
            ProfileRow { i: 0, j: 2, distance: Some(3), magnitude: 1e-3, iteration: 0 },
            ProfileRow { i: 1, j: 2, distance: Some(0), magnitude: 2.0, iteration: 0 },
            ProfileRow { i: 1, j: 3, distance: Some(3), magnitude: 4e-3, iteration: 0 },
        ];
        let b = bucket_summary(&rows);
        assert_eq!(b.iter().map(|b| b.distance).collect::<Vec<_>>(), vec![Some(0), Some(3), None]);
        assert_eq!(b[1].count, 2);
        assert_eq!(b[1].max_magnitude, 4e-3);
        assert_eq!(b[2].nonzero, 0);
    }
}

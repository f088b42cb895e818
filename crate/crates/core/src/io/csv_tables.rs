use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::discovery::{ClusterAssignment, CondensedTree, Method};
use crate::eval::{SweepCurve, SweepPoint};

/// Sidecar holding what the CSV columns cannot: method and parameters.
#[derive(Serialize, Deserialize)]
struct AssignmentMeta {
    method: Method,
    params: BTreeMap<String, String>,
    n_clusters: usize,
    n_noise: usize,
}

fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, line: usize, column: &str) -> Result<f64, IoError> {
    s.trim().parse().map_err(|_| IoError::Parse { line, message: format!("bad {column} '{s}'") })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, IoError> {
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(File::create(path)?)))
}

fn expect_header(rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<(), IoError> {
    let header = rdr.headers()?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(IoError::Schema(format!("expected CSV header {:?}, found {:?}", expected, header)));
    }
    Ok(())
}

/// Writes `track_id,cluster_id,outlier_score` (cluster_id -1 for NOISE)
/// plus a `.meta.json` sidecar.
pub fn write_assignment(a: &ClusterAssignment, path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["track_id", "cluster_id", "outlier_score"])?;
    for i in 0..a.len() {
        let cluster = a.clusters[i].map_or(-1, |c| c as i64);
        w.write_record([a.track_ids[i].to_string(), cluster.to_string(), fmt_f64(a.outlier_scores[i])])?;
    }
    w.flush()?;
    let meta = AssignmentMeta {
        method: a.method,
        params: a.params.clone(),
        n_clusters: a.n_clusters(),
        n_noise: a.n_noise(),
    };
    let mut f = BufWriter::new(File::create(meta_path(path))?);
    serde_json::to_writer_pretty(&mut f, &meta).map_err(std::io::Error::from)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_assignment(path: &Path) -> Result<ClusterAssignment, IoError> {
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(&mut rdr, &["track_id", "cluster_id", "outlier_score"])?;
    let mut a = ClusterAssignment::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 3 {
            return Err(IoError::Parse { line, message: format!("expected 3 columns, found {}", rec.len()) });
        }
        let track_id: u64 = rec[0].trim().parse().map_err(|_| IoError::Parse { line, message: format!("bad track_id '{}'", &rec[0]) })?;
        let cluster: i64 = rec[1].trim().parse().map_err(|_| IoError::Parse { line, message: format!("bad cluster_id '{}'", &rec[1]) })?;
        if cluster < -1 {
            return Err(IoError::Parse { line, message: format!("cluster_id {cluster} below -1") });
        }
        let score = parse_f64(&rec[2], line, "outlier_score")?;
        a.track_ids.push(track_id);
        a.clusters.push((cluster >= 0).then_some(cluster as usize));
        a.outlier_scores.push(score);
    }
    let meta_file = meta_path(path);
    if meta_file.exists() {
        let meta: AssignmentMeta = serde_json::from_reader(File::open(&meta_file)?)
            .map_err(|e| IoError::Schema(format!("{}: {e}", meta_file.display())))?;
        a.method = meta.method;
        a.params = meta.params;
    }
    Ok(a)
}

/// Writes `fraction,ami,is_automatic`; the automatic point, if any, is the
/// last row.
pub fn write_sweep(curve: &SweepCurve, path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["fraction", "ami", "is_automatic"])?;
    for p in &curve.points {
        w.write_record([fmt_f64(p.fraction), fmt_f64(p.ami), "false".into()])?;
    }
    if let Some(p) = &curve.automatic {
        w.write_record([fmt_f64(p.fraction), fmt_f64(p.ami), "true".into()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<SweepCurve, IoError> {
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(&mut rdr, &["fraction", "ami", "is_automatic"])?;
    let mut curve = SweepCurve::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let point = SweepPoint { fraction: parse_f64(&rec[0], line, "fraction")?, ami: parse_f64(&rec[1], line, "ami")? };
        match rec[2].trim() {
            "false" => curve.points.push(point),
            "true" => curve.automatic = Some(point),
            other => return Err(IoError::Parse { line, message: format!("bad is_automatic '{other}'") }),
        }
    }
    Ok(curve)
}

/// Dumps the condensed tree as `parent,child,lambda_val,child_size` and the
/// per-cluster summary as `cluster,parent,birth_lambda,stability,selected`.
pub fn write_condensed_tree(tree: &CondensedTree, edges_path: &Path, clusters_path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(edges_path)?;
    w.write_record(["parent", "child", "lambda_val", "child_size"])?;
    for e in &tree.edges {
        w.write_record([e.parent.to_string(), e.child.to_string(), fmt_f64(e.lambda), e.child_size.to_string()])?;
    }
    w.flush()?;
    let mut w = csv_writer(clusters_path)?;
    w.write_record(["cluster", "parent", "birth_lambda", "stability", "selected"])?;
    for c in &tree.clusters {
        w.write_record([
            c.id.to_string(),
            c.parent.map_or_else(|| "-1".to_string(), |p| p.to_string()),
            fmt_f64(c.birth_lambda),
            fmt_f64(c.stability),
            c.selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_round_trip_with_noise() {
        let mut params = BTreeMap::new();
        params.insert("min_cluster_size".to_string(), "10".to_string());
        let a = ClusterAssignment {
            track_ids: vec![4, 7, 9],
            clusters: vec![Some(0), None, Some(1)],
            outlier_scores: vec![0.125, f64::INFINITY, 1.0 / 3.0],
            method: Method::Hdbscan,
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("assignment.csv");
        write_assignment(&a, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("track_id,cluster_id,outlier_score\n4,0,0.125\n7,-1,inf\n"));
        assert!(dir.path().join("assignment.meta.json").exists());
        assert_eq!(read_assignment(&p).unwrap(), a);
    }

    #[test]
    fn sweep_round_trip() {
        let curve = SweepCurve {
            points: vec![SweepPoint { fraction: 0.0, ami: 0.5 }, SweepPoint { fraction: 0.1, ami: 0.75 }],
            automatic: Some(SweepPoint { fraction: 0.093, ami: 0.8 }),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        write_sweep(&curve, &p).unwrap();
        assert_eq!(read_sweep(&p).unwrap(), curve);
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(read_assignment(&p), Err(IoError::Schema(_))));
    }
}

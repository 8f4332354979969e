use crate::error::{Error, Result};
use crate::inference::{TraceEntry, TrainTrace};
use crate::prediction::{GridPrediction, SupportPrediction};

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("csv: {e}"))
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = writer.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

/// `support_id,value,variance`, one row per target support.
pub fn support_csv(pred: &SupportPrediction) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["support_id", "value", "variance"]).map_err(csv_err)?;
    for ((id, v), var) in pred.support_ids.iter().zip(&pred.values).zip(&pred.variances) {
        w.write_record([id.clone(), v.to_string(), var.to_string()]).map_err(csv_err)?;
    }
    finish(w)
}

/// `x0[,x1],mean,variance`, one row per grid point.
pub fn grid_csv(pred: &GridPrediction) -> Result<String> {
    let dims = pred.points.first().map(|p| p.len()).unwrap_or(1);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..dims).map(|d| format!("x{d}")).collect();
    header.extend(["mean".to_string(), "variance".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for ((p, m), v) in pred.points.iter().zip(&pred.mean).zip(&pred.variance) {
        let mut row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
        row.push(m.to_string());
        row.push(v.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// A grid CSV read back.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub points: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GridTable {
    pub fn dimension(&self) -> usize {
        self.points.first().map(|p| p.len()).unwrap_or(0)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("csv line {line}: {s:?} is not a number")))
}

pub fn read_grid_csv(text: &str) -> Result<GridTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|h| h.to_string()).collect();
    let dims = header.len().checked_sub(2).filter(|d| (1..=2).contains(d)).ok_or_else(|| {
        Error::Parse(format!("grid csv header must be x0[,x1],mean,variance, got {header:?}"))
    })?;
    let expected: Vec<String> = (0..dims).map(|d| format!("x{d}")).chain(["mean".into(), "variance".into()]).collect();
    if header != expected {
        return Err(Error::Parse(format!("grid csv header must be {expected:?}, got {header:?}")));
    }
    let mut table = GridTable { points: Vec::new(), mean: Vec::new(), variance: Vec::new() };
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals = rec.iter().map(|s| parse_f64(s, i + 2)).collect::<Result<Vec<_>>>()?;
        table.points.push(vals[..dims].to_vec());
        table.mean.push(vals[dims]);
        table.variance.push(vals[dims + 1]);
    }
    Ok(table)
}

/// `iteration,elbo,learning_rate`, one row per iteration.
pub fn trace_csv(trace: &TrainTrace) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "elbo", "learning_rate"]).map_err(csv_err)?;
    for e in &trace.entries {
        w.write_record([e.iteration.to_string(), e.elbo.to_string(), e.learning_rate.to_string()]).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_trace_csv(text: &str) -> Result<Vec<TraceEntry>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|h| h.to_string()).collect();
    if header != ["iteration", "elbo", "learning_rate"] {
        return Err(Error::Parse(format!("trace csv header must be iteration,elbo,learning_rate, got {header:?}")));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err)?;
            let iteration = rec[0].trim().parse().map_err(|_| Error::Parse(format!("csv line {}: bad iteration", i + 2)))?;
            Ok(TraceEntry { iteration, elbo: parse_f64(&rec[1], i + 2)?, learning_rate: parse_f64(&rec[2], i + 2)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_columns() {
        let p = SupportPrediction { support_ids: vec!["a".into(), "b".into()], values: vec![1.5, -2.0], variances: vec![0.0, 0.25], clamped: 0 };
        assert_eq!(support_csv(&p).unwrap(), "support_id,value,variance\na,1.5,0\nb,-2,0.25\n");
    }

    #[test]
    fn grid_round_trip() {
        let p = GridPrediction {
            points: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            mean: vec![1.0 / 3.0, 2.0],
            variance: vec![0.5, 1e-20],
            clamped: 0,
        };
        let text = grid_csv(&p).unwrap();
        assert!(text.starts_with("x0,x1,mean,variance\n"));
        let t = read_grid_csv(&text).unwrap();
        assert_eq!(t.points, p.points);
        assert_eq!(t.mean, p.mean);
        assert_eq!(t.variance, p.variance);
        assert!(read_grid_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn trace_round_trip() {
        let trace = TrainTrace {
            entries: vec![
                TraceEntry { iteration: 0, elbo: -10.25, learning_rate: 0.01 },
                TraceEntry { iteration: 1, elbo: -9.0, learning_rate: 0.005 },
            ],
            ..TrainTrace::default()
        };
        assert_eq!(read_trace_csv(&trace_csv(&trace).unwrap()).unwrap(), trace.entries);
    }
}

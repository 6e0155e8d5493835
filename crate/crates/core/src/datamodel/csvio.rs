use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, PatientRecord, Schema, TteObservation, Visit};

/// Locations of the long-format visit table and its optional side tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub longitudinal: PathBuf,
    #[serde(default)]
    pub context: Option<PathBuf>,
    #[serde(default)]
    pub tte: Option<PathBuf>,
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Maps each declared variable to its column, rejecting unknown columns.
fn column_map(
    path: &Path,
    headers: &csv::StringRecord,
    fixed: &[&str],
    vars: &[&str],
) -> Result<Vec<usize>, DataError> {
    let p = path.display().to_string();
    for (i, name) in fixed.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(DataError::MissingColumn {
                path: p,
                column: (*name).to_string(),
            });
        }
    }
    let mut positions = vec![usize::MAX; vars.len()];
    for (i, h) in headers.iter().enumerate().skip(fixed.len()) {
        match vars.iter().position(|v| *v == h) {
            Some(k) if positions[k] == usize::MAX => positions[k] = i,
            Some(_) => {
                return Err(DataError::Parse {
                    path: p,
                    line: 1,
                    message: format!("column `{h}` appears twice"),
                })
            }
            None => {
                return Err(DataError::UnknownColumn {
                    path: p,
                    column: h.to_string(),
                })
            }
        }
    }
    if let Some(k) = positions.iter().position(|&i| i == usize::MAX) {
        return Err(DataError::MissingColumn {
            path: p,
            column: vars[k].to_string(),
        });
    }
    Ok(positions)
}

fn parse_cell(path: &Path, line: u64, cell: &str) -> Result<Option<f64>, DataError> {
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| DataError::Parse {
        path: path.display().to_string(),
        line,
        message: format!("cannot parse `{cell}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("non-finite value `{cell}`"),
        });
    }
    Ok(Some(v))
}

fn parse_row(
    path: &Path,
    line: u64,
    row: &csv::StringRecord,
    positions: &[usize],
) -> Result<(Vec<f64>, Vec<bool>), DataError> {
    let mut values = Vec::with_capacity(positions.len());
    let mut mask = Vec::with_capacity(positions.len());
    for &i in positions {
        match parse_cell(path, line, row.get(i).unwrap_or(""))? {
            Some(v) => {
                values.push(v);
                mask.push(true);
            }
            None => {
                values.push(f64::NAN);
                mask.push(false);
            }
        }
    }
    Ok((values, mask))
}

/// Reads and validates the long-format tables described by `paths`.
///
/// Rows of one patient must appear in strictly increasing time order and
/// start with a baseline visit at `t = 0`. Blank cells become unobserved.
pub fn load_dataset(paths: &DataPaths, schema: &Schema) -> Result<Vec<PatientRecord>, DataError> {
    schema.validate()?;
    let n_ctx = schema.n_context();
    let n_tte = schema.tte_outcomes.len();

    let path = paths.longitudinal.as_path();
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    let names: Vec<&str> = schema
        .longitudinal
        .iter()
        .map(|v| v.name.as_str())
        .collect();
    let positions = column_map(path, &headers, &["patient_id", "time"], &names)?;

    let mut records: Vec<PatientRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err(path))?;
        let line = row_no as u64 + 2;
        let id = row.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line,
                message: "empty patient_id".into(),
            });
        }
        let t =
            parse_cell(path, line, row.get(1).unwrap_or(""))?.ok_or_else(|| DataError::Parse {
                path: path.display().to_string(),
                line,
                message: "missing time".into(),
            })?;
        if t < 0.0 {
            return Err(DataError::NegativeTime {
                patient: id,
                time: t,
            });
        }
        let (values, mask) = parse_row(path, line, &row, &positions)?;
        let visit = Visit { t, values, mask };
        let k = *index.entry(id.clone()).or_insert_with(|| {
            records.push(PatientRecord {
                id: id.clone(),
                context: vec![f64::NAN; n_ctx],
                context_mask: vec![false; n_ctx],
                visits: Vec::new(),
                tte: vec![None; n_tte],
            });
            records.len() - 1
        });
        let rec = &mut records[k];
        if let Some(prev) = rec.visits.last() {
            if prev.t == t {
                return Err(DataError::DuplicateVisit {
                    patient: id,
                    time: t,
                });
            }
            if t < prev.t {
                return Err(DataError::NonMonotoneTime {
                    patient: id,
                    time: t,
                    previous: prev.t,
                });
            }
        }
        rec.visits.push(visit);
    }

    if let Some(path) = paths.context.as_deref() {
        let mut reader = open_reader(path)?;
        let headers = reader.headers().map_err(csv_err(path))?.clone();
        let names: Vec<&str> = schema.context.iter().map(|v| v.name.as_str()).collect();
        let positions = column_map(path, &headers, &["patient_id"], &names)?;
        let mut seen = std::collections::HashSet::new();
        for (row_no, row) in reader.records().enumerate() {
            let row = row.map_err(csv_err(path))?;
            let line = row_no as u64 + 2;
            let id = row.get(0).unwrap_or("").to_string();
            let k = *index
                .get(&id)
                .ok_or_else(|| DataError::UnknownPatient(id.clone()))?;
            if !seen.insert(k) {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("duplicate context row for patient {id}"),
                });
            }
            let (values, mask) = parse_row(path, line, &row, &positions)?;
            records[k].context = values;
            records[k].context_mask = mask;
        }
    }

    if let Some(path) = paths.tte.as_deref() {
        let mut reader = open_reader(path)?;
        let headers = reader.headers().map_err(csv_err(path))?.clone();
        column_map(
            path,
            &headers,
            &["patient_id", "outcome", "time", "event"],
            &[],
        )?;
        for (row_no, row) in reader.records().enumerate() {
            let row = row.map_err(csv_err(path))?;
            let line = row_no as u64 + 2;
            let bad = |message: String| DataError::Parse {
                path: path.display().to_string(),
                line,
                message,
            };
            let id = row.get(0).unwrap_or("").to_string();
            let k = *index
                .get(&id)
                .ok_or_else(|| DataError::UnknownPatient(id.clone()))?;
            let outcome = row.get(1).unwrap_or("");
            let o = schema
                .tte_outcomes
                .iter()
                .position(|n| n == outcome)
                .ok_or_else(|| bad(format!("unknown outcome `{outcome}`")))?;
            let time = parse_cell(path, line, row.get(2).unwrap_or(""))?
                .ok_or_else(|| bad("missing event time".into()))?;
            if time < 0.0 {
                return Err(bad(format!("negative event time {time}")));
            }
            let event = match row.get(3).unwrap_or("") {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("event flag must be 0 or 1, got `{other}`"))),
            };
            if records[k].tte[o].is_some() {
                return Err(bad(format!(
                    "duplicate outcome `{outcome}` for patient {id}"
                )));
            }
            records[k].tte[o] = Some(TteObservation { time, event });
        }
    }

    for r in &records {
        r.validate(schema)?;
    }
    Ok(records)
}

fn fmt_cell(v: f64, observed: bool) -> String {
    if observed {
        format!("{v}")
    } else {
        String::new()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, DataError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Writes records in the same formats [`load_dataset`] reads.
pub fn write_dataset(
    records: &[PatientRecord],
    schema: &Schema,
    paths: &DataPaths,
) -> Result<(), DataError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| DataError::Io {
            path: p.clone(),
            source,
        }
    };

    let path = paths.longitudinal.as_path();
    let mut w = create(path)?;
    let mut header = vec!["patient_id".to_string(), "time".to_string()];
    header.extend(schema.longitudinal.iter().map(|v| v.name.clone()));
    writeln!(w, "{}", header.join(",")).map_err(io(path))?;
    for r in records {
        for v in &r.visits {
            let mut cells = vec![r.id.clone(), format!("{}", v.t)];
            cells.extend(v.values.iter().zip(&v.mask).map(|(&x, &m)| fmt_cell(x, m)));
            writeln!(w, "{}", cells.join(",")).map_err(io(path))?;
        }
    }
    w.flush().map_err(io(path))?;

    if let Some(path) = paths.context.as_deref() {
        let mut w = create(path)?;
        let mut header = vec!["patient_id".to_string()];
        header.extend(schema.context.iter().map(|v| v.name.clone()));
        writeln!(w, "{}", header.join(",")).map_err(io(path))?;
        for r in records {
            let mut cells = vec![r.id.clone()];
            cells.extend(
                r.context
                    .iter()
                    .zip(&r.context_mask)
                    .map(|(&x, &m)| fmt_cell(x, m)),
            );
            writeln!(w, "{}", cells.join(",")).map_err(io(path))?;
        }
        w.flush().map_err(io(path))?;
    }

    if let Some(path) = paths.tte.as_deref() {
        let mut w = create(path)?;
        writeln!(w, "patient_id,outcome,time,event").map_err(io(path))?;
        for r in records {
            for (name, obs) in schema.tte_outcomes.iter().zip(&r.tte) {
                if let Some(o) = obs {
                    writeln!(w, "{},{},{},{}", r.id, name, o.time, u8::from(o.event))
                        .map_err(io(path))?;
                }
            }
        }
        w.flush().map_err(io(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::VarSpec;

    fn schema() -> Schema {
        Schema::new(
            vec![VarSpec::continuous("score"), VarSpec::continuous("lab")],
            vec![VarSpec::continuous("age")],
            vec!["death".into()],
        )
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn paths(long: PathBuf) -> DataPaths {
        DataPaths {
            longitudinal: long,
            context: None,
            tte: None,
        }
    }

    #[test]
    fn blank_cells_become_masked() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "v.csv",
            "patient_id,time,score,lab\np1,0,1.5,2\np1,3,,4\n",
        );
        let recs = load_dataset(&paths(p), &schema()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].visits.len(), 2);
        assert!(!recs[0].visits[1].mask[0]);
        assert!(recs[0].visits[1].mask[1]);
        assert!(recs[0].visits[1].values[0].is_nan());
        assert!(recs[0].context_mask.iter().all(|m| !m));
    }

    #[test]
    fn negative_time_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "v.csv",
            "patient_id,time,score,lab\np1,0,1,2\np1,-1,1,2\n",
        );
        assert!(matches!(
            load_dataset(&paths(p), &schema()),
            Err(DataError::NegativeTime { .. })
        ));
    }

    #[test]
    fn duplicate_and_non_monotone_times_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.csv",
            "patient_id,time,score,lab\np1,0,1,2\np1,0,1,2\n",
        );
        assert!(matches!(
            load_dataset(&paths(p), &schema()),
            Err(DataError::DuplicateVisit { .. })
        ));
        let p = write(
            dir.path(),
            "m.csv",
            "patient_id,time,score,lab\np1,0,1,2\np1,4,1,2\np1,2,1,2\n",
        );
        assert!(matches!(
            load_dataset(&paths(p), &schema()),
            Err(DataError::NonMonotoneTime { .. })
        ));
    }

    #[test]
    fn unknown_column_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "v.csv",
            "patient_id,time,score,lab,bogus\np1,0,1,2,3\n",
        );
        assert!(matches!(
            load_dataset(&paths(p), &schema()),
            Err(DataError::UnknownColumn { .. })
        ));
    }

    #[test]
    fn missing_baseline_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "v.csv", "patient_id,time,score,lab\np1,1,1,2\n");
        assert!(matches!(
            load_dataset(&paths(p), &schema()),
            Err(DataError::MissingBaseline { .. })
        ));
    }

    #[test]
    fn side_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let long = write(
            dir.path(),
            "v.csv",
            "patient_id,time,score,lab\na,0,1,\na,2.5,3,4\nb,0,0,1\n",
        );
        let ctx = write(dir.path(), "c.csv", "patient_id,age\na,61\nb,\n");
        let tte = write(
            dir.path(),
            "t.csv",
            "patient_id,outcome,time,event\na,death,12.5,1\n",
        );
        let p = DataPaths {
            longitudinal: long,
            context: Some(ctx),
            tte: Some(tte),
        };
        let recs = load_dataset(&p, &schema()).unwrap();
        assert_eq!(recs[0].context, vec![61.0]);
        assert!(!recs[1].context_mask[0]);
        assert_eq!(
            recs[0].tte[0],
            Some(TteObservation {
                time: 12.5,
                event: true
            })
        );
        assert_eq!(recs[1].tte[0], None);

        let out = DataPaths {
            longitudinal: dir.path().join("v2.csv"),
            context: Some(dir.path().join("c2.csv")),
            tte: Some(dir.path().join("t2.csv")),
        };
        write_dataset(&recs, &schema(), &out).unwrap();
        let again = load_dataset(&out, &schema()).unwrap();
        assert_eq!(again.len(), recs.len());
        for (a, b) in again.iter().zip(&recs) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tte, b.tte);
            assert_eq!(a.context_mask, b.context_mask);
            for (va, vb) in a.visits.iter().zip(&b.visits) {
                assert_eq!(va.t, vb.t);
                assert_eq!(va.mask, vb.mask);
            }
        }
    }
}

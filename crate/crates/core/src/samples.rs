//! Generated twin samples and their on-disk form.
//!
//! The file is CSV with one provenance comment line:
//!
//! ```text
//! # dtg-samples model=<id> seed=<u64> mode=<rollout|direct> n_samples=<n>
//! patient_id,time,sample,<var>...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::datamodel::DataError;
use crate::nbm::GenerationMode;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSamples {
    pub id: String,
    /// Index `(time · n_samples + sample) · N + variable`.
    pub draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub model_id: String,
    pub seed: u64,
    pub mode: GenerationMode,
    pub times: Vec<f64>,
    pub n_samples: usize,
    pub variables: Vec<String>,
    pub patients: Vec<PatientSamples>,
}

impl SampleSet {
    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// One draw of all variables.
    pub fn draw(&self, patient: usize, time: usize, sample: usize) -> &[f64] {
        let n = self.n_vars();
        let at = (time * self.n_samples + sample) * n;
        &self.patients[patient].draws[at..at + n]
    }

    /// All draws of one variable for one patient at one time.
    pub fn values(&self, patient: usize, time: usize, var: usize) -> Vec<f64> {
        (0..self.n_samples)
            .map(|s| self.draw(patient, time, s)[var])
            .collect()
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x == t)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(
            w,
            "# dtg-samples model={} seed={} mode={} n_samples={}",
            self.model_id,
            self.seed,
            self.mode.as_str(),
            self.n_samples
        )
        .map_err(io)?;
        write!(w, "patient_id,time,sample").map_err(io)?;
        for v in &self.variables {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for (p, ps) in self.patients.iter().enumerate() {
            for (j, t) in self.times.iter().enumerate() {
                for s in 0..self.n_samples {
                    write!(w, "{},{t},{s}", ps.id).map_err(io)?;
                    for v in self.draw(p, j, s) {
                        write!(w, ",{v}").map_err(io)?;
                    }
                    writeln!(w).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self, DataError> {
        let parse_err = |line: usize, message: String| DataError::Parse {
            path: path.display().to_string(),
            line: line as u64,
            message,
        };
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let mut next = |n: usize| -> Result<String, DataError> {
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(source)) => Err(DataError::Io {
                    path: path.display().to_string(),
                    source,
                }),
                None => Err(parse_err(n, "unexpected end of file".into())),
            }
        };

        let meta = next(1)?;
        let meta = meta
            .strip_prefix("# dtg-samples ")
            .ok_or_else(|| parse_err(1, "missing provenance line".into()))?;
        let (mut model_id, mut seed, mut mode, mut n_samples) = (None, None, None, None);
        for kv in meta.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("bad field `{kv}`")))?;
            match k {
                "model" => model_id = Some(v.to_string()),
                "seed" => seed = v.parse().ok(),
                "mode" => mode = v.parse().ok(),
                "n_samples" => n_samples = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(model_id), Some(seed), Some(mode), Some(n_samples)) =
            (model_id, seed, mode, n_samples)
        else {
            return Err(parse_err(1, "incomplete provenance line".into()));
        };

        let header = next(2)?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["patient_id", "time", "sample"] {
            return Err(parse_err(
                2,
                "header must be patient_id,time,sample,<vars>".into(),
            ));
        }
        let variables: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();

        let mut patients: Vec<PatientSamples> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        for (i, line) in lines.enumerate() {
            let lno = i + 3;
            let line = line.map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + variables.len() {
                return Err(parse_err(
                    lno,
                    format!("expected {} fields", 3 + variables.len()),
                ));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(lno, e.to_string()));
            let t = num(f[1])?;
            if patients.last().map(|p| p.id.as_str()) != Some(f[0]) {
                patients.push(PatientSamples {
                    id: f[0].to_string(),
                    draws: Vec::new(),
                });
            }
            if patients.len() == 1 && !times.contains(&t) {
                times.push(t);
            }
            let p = patients.last_mut().expect("pushed above");
            for s in &f[3..] {
                p.draws.push(num(s)?);
            }
        }
        let expected = times.len() * n_samples * variables.len();
        if let Some(p) = patients.iter().find(|p| p.draws.len() != expected) {
            return Err(parse_err(
                0,
                format!("patient `{}` has an incomplete sample block", p.id),
            ));
        }
        Ok(Self {
            model_id,
            seed,
            mode,
            times,
            n_samples,
            variables,
            patients,
        })
    }
}

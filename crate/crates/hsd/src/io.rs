//! CSV ingestion and emission.
//!
//! Files use a header row, comma separators and `.` decimals. Floats are
//! written in shortest round-trip form, so reading back reproduces them
//! exactly.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use hsd_core::design::DesignCurve;
use hsd_core::evaluation::QiniCurve;
use hsd_core::sampling::{Cohort, Stratum};
use hsd_core::simulation::RobustnessRow;
use hsd_core::{Error as CoreError, FeatureMatrix, PopulationFrame, SimulatedTruth};
use serde::{Deserialize, Serialize};

use crate::error::{HsdError, Result};

/// Which columns play which role. Columns not named are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub features: Vec<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub treatment: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
}

const ID_NAMES: &[&str] = &["id"];
const TREATMENT_NAMES: &[&str] = &["w", "treatment"];
const OUTCOME_NAMES: &[&str] = &["y", "outcome", "conversion"];
/// Columns written by this crate that are never features.
const RESERVED: &[&str] = &["stratum", "score", "prediction", "mu0", "tau", "row"];

impl ColumnSchema {
    /// Guesses roles from conventional names; everything else numeric-looking
    /// becomes a feature.
    pub fn infer(headers: &[String]) -> Self {
        let find = |names: &[&str]| headers.iter().find(|h| names.contains(&h.as_str())).cloned();
        let id = find(ID_NAMES);
        let treatment = find(TREATMENT_NAMES);
        let outcome = find(OUTCOME_NAMES);
        let features = headers
            .iter()
            .filter(|h| {
                Some(*h) != id.as_ref()
                    && Some(*h) != treatment.as_ref()
                    && Some(*h) != outcome.as_ref()
                    && !RESERVED.contains(&h.as_str())
                    && !TREATMENT_NAMES.contains(&h.as_str())
                    && !OUTCOME_NAMES.contains(&h.as_str())
            })
            .cloned()
            .collect();
        Self {
            features,
            outcome,
            treatment,
            id,
        }
    }
}

/// A CSV file held as strings, addressed by column name.
#[derive(Debug, Clone)]
pub struct Table {
    source: String,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| HsdError::io(path, e))?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn from_reader<R: Read>(reader: R, source: &str) -> Result<Self> {
        let csv_err = |e| HsdError::Csv {
            path: source.to_string(),
            source: e,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(csv_err)?;
        Ok(Self {
            source: source.to_string(),
            headers,
            rows,
        })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            CoreError::Schema(format!("{}: missing column '{name}'", self.source)).into()
        })
    }

    fn cells<'a>(&'a self, name: &str) -> Result<impl Iterator<Item = (usize, &'a str)> + 'a> {
        let j = self.index(name)?;
        // data rows start on line 2
        Ok(self
            .rows
            .iter()
            .enumerate()
            .map(move |(i, r)| (i + 2, r.get(j).unwrap_or("").trim())))
    }

    fn bad(&self, name: &str, line: usize, value: &str, what: &str) -> HsdError {
        CoreError::Validation(format!(
            "{} line {line}, column '{name}': '{value}' is not {what}",
            self.source
        ))
        .into()
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        self.cells(name)?
            .map(|(line, v)| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(self.bad(name, line, v, "a finite number")),
            })
            .collect()
    }

    pub fn u64_column(&self, name: &str) -> Result<Vec<u64>> {
        self.cells(name)?
            .map(|(line, v)| v.parse::<u64>().map_err(|_| self.bad(name, line, v, "an unsigned integer")))
            .collect()
    }

    pub fn binary_column(&self, name: &str) -> Result<Vec<u8>> {
        self.cells(name)?
            .map(|(line, v)| match v.parse::<f64>() {
                Ok(0.0) => Ok(0),
                Ok(1.0) => Ok(1),
                _ => Err(self.bad(name, line, v, "0 or 1")),
            })
            .collect()
    }

    pub fn stratum_column(&self, name: &str) -> Result<Vec<Stratum>> {
        self.cells(name)?
            .map(|(line, v)| Stratum::parse(v).ok_or_else(|| self.bad(name, line, v, "H or L")))
            .collect()
    }

    /// Builds a frame with the given roles, or inferred roles when `schema` is `None`.
    pub fn to_frame(&self, schema: Option<&ColumnSchema>) -> Result<PopulationFrame> {
        let inferred;
        let schema = match schema {
            Some(s) => s,
            None => {
                inferred = ColumnSchema::infer(&self.headers);
                &inferred
            }
        };
        let n = self.n_rows();
        let d = schema.features.len();
        let mut data = vec![0.0; n * d];
        for (j, name) in schema.features.iter().enumerate() {
            for (i, v) in self.f64_column(name)?.into_iter().enumerate() {
                data[i * d + j] = v;
            }
        }
        let features = FeatureMatrix::new(schema.features.clone(), n, data)?;
        let outcome = schema.outcome.as_deref().map(|c| self.binary_column(c)).transpose()?;
        let treatment = schema.treatment.as_deref().map(|c| self.binary_column(c)).transpose()?;
        let ids = schema.id.as_deref().map(|c| self.u64_column(c)).transpose()?;
        Ok(PopulationFrame::new(features, outcome, treatment, ids)?)
    }
}

/// Reads a frame; with no schema, roles are inferred from column names.
pub fn load_csv(path: &Path, schema: Option<&ColumnSchema>) -> Result<PopulationFrame> {
    Table::read(path)?.to_frame(schema)
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| HsdError::io(dir, e))?;
        }
    }
    File::create(path).map_err(|e| HsdError::io(path, e))
}

/// Writes rows of already formatted cells.
pub fn write_table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e| HsdError::Csv {
        path: "<output>".into(),
        source: e,
    };
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HsdError::io("<output>", e))?;
    Ok(())
}

pub fn write_table_file(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_table(create(path)?, header, rows).map_err(|e| match e {
        HsdError::Io { source, .. } => HsdError::io(path, source),
        other => other,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `id, <features>, w, y` with treatment and outcome only when present.
pub fn emit_csv<W: Write>(frame: &PopulationFrame, out: W) -> Result<()> {
    let names = frame.features().names();
    let mut header: Vec<&str> = vec!["id"];
    header.extend(names.iter().map(String::as_str));
    if frame.treatment().is_some() {
        header.push("w");
    }
    if frame.outcome().is_some() {
        header.push("y");
    }
    let rows = (0..frame.n_rows()).map(|i| {
        let mut r = Vec::with_capacity(header.len());
        r.push(frame.ids()[i].to_string());
        r.extend(frame.features().row(i).iter().map(|v| v.to_string()));
        if let Some(w) = frame.treatment() {
            r.push(w[i].to_string());
        }
        if let Some(y) = frame.outcome() {
            r.push(y[i].to_string());
        }
        r
    });
    write_table(out, &header, rows)
}

pub fn write_frame(path: &Path, frame: &PopulationFrame) -> Result<()> {
    emit_csv(frame, create(path)?)
}

pub fn write_truth(path: &Path, ids: &[u64], truth: &SimulatedTruth) -> Result<()> {
    let rows = (0..truth.len()).map(|i| {
        vec![
            ids[i].to_string(),
            truth.mu0()[i].to_string(),
            truth.tau()[i].to_string(),
        ]
    });
    write_table_file(path, &["id", "mu0", "tau"], rows)
}

pub fn read_truth(path: &Path) -> Result<(Vec<u64>, SimulatedTruth)> {
    let t = Table::read(path)?;
    let ids = t.u64_column("id")?;
    let truth = SimulatedTruth::new(t.f64_column("mu0")?, t.f64_column("tau")?)?;
    Ok((ids, truth))
}

/// `id, prediction, stratum` for every population row.
pub fn write_strata(path: &Path, ids: &[u64], predictions: &[f64], labels: &[Stratum]) -> Result<()> {
    let rows = (0..ids.len()).map(|i| {
        vec![
            ids[i].to_string(),
            predictions[i].to_string(),
            labels[i].as_str().to_string(),
        ]
    });
    write_table_file(path, &["id", "prediction", "stratum"], rows)
}

pub fn write_cohort(path: &Path, cohort: &Cohort) -> Result<()> {
    let w = cohort.treatment.as_deref();
    let rows = (0..cohort.len()).map(|i| {
        let mut r = vec![cohort.ids[i].to_string(), cohort.strata[i].as_str().to_string()];
        if let Some(w) = w {
            r.push(w[i].to_string());
        }
        r
    });
    let header: &[&str] = if w.is_some() {
        &["id", "stratum", "w"]
    } else {
        &["id", "stratum"]
    };
    write_table_file(path, header, rows)
}

pub fn write_scores(path: &Path, ids: &[u64], scores: &[f64]) -> Result<()> {
    let rows = ids
        .iter()
        .zip(scores)
        .map(|(id, s)| vec![id.to_string(), s.to_string()]);
    write_table_file(path, &["id", "score"], rows)
}

pub fn write_design_curve(path: &Path, curve: &DesignCurve) -> Result<()> {
    let rows = curve.points.iter().map(|p| {
        vec![
            p.p_h.to_string(),
            p.threshold.to_string(),
            p.realized_p_h.to_string(),
            p.v_h_hat.to_string(),
            p.v_l_hat.to_string(),
            p.q_v_hat.to_string(),
            p.r_h.to_string(),
            p.predicted_ratio.to_string(),
            (p.heavy_ties as u8).to_string(),
        ]
    });
    write_table_file(
        path,
        &[
            "p_h",
            "threshold",
            "realized_p_h",
            "v_h",
            "v_l",
            "q_v",
            "r_h",
            "predicted_ratio",
            "heavy_ties",
        ],
        rows,
    )
}

pub fn write_qini_curve(path: &Path, curve: &QiniCurve) -> Result<()> {
    let rows = curve.points.iter().map(|p| {
        vec![
            p.t.to_string(),
            opt(p.ate_t),
            opt(p.q),
            opt(p.variance_hat),
            p.n_top.to_string(),
        ]
    });
    write_table_file(path, &["t", "ate_t", "q", "variance_hat", "n_top"], rows)
}

pub fn write_robustness(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let cells = rows.iter().map(|r| {
        vec![
            r.nu.to_string(),
            r.accuracy.to_string(),
            r.vr_unadjusted.to_string(),
            r.vr_adjusted.to_string(),
        ]
    });
    write_table_file(path, &["nu", "accuracy", "vr_unadjusted", "vr_adjusted"], cells)
}

/// Looks up rows of `table_ids` in `ids`, failing on unknown ids.
pub fn align_ids(ids: &[u64], table_ids: &[u64], what: &str) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<u64, usize> =
        ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    table_ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| HsdError::Data(format!("{what}: id {id} not found")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> Table {
        Table::from_reader(s.as_bytes(), "test").unwrap()
    }

    #[test]
    fn explicit_schema() {
        let t = table("f0,f1,treatment,conversion\n0.5,1,1,0\n1.5,2,0,1\n-3,4e-2,1,1\n");
        let schema = ColumnSchema {
            features: vec!["f0".into(), "f1".into()],
            outcome: Some("conversion".into()),
            treatment: Some("treatment".into()),
            id: None,
        };
        let f = t.to_frame(Some(&schema)).unwrap();
        assert_eq!(f.n_rows(), 3);
        assert_eq!(f.features().n_cols(), 2);
        assert_eq!(f.features().get(2, 1), 0.04);
        assert_eq!(f.outcome().unwrap(), &[0, 1, 1]);
        assert_eq!(f.ids(), &[0, 1, 2]);
    }

    #[test]
    fn extra_columns_ignored() {
        let header: Vec<String> = (0..12).map(|j| format!("f{j}")).collect();
        let mut s = header.join(",");
        s.push_str(",treatment,conversion,visit,exposure\n");
        for i in 0..4 {
            let row: Vec<String> = (0..12).map(|j| (i * j) as f64 / 7.0).map(|v| v.to_string()).collect();
            s.push_str(&format!("{},{},0,1,0\n", row.join(","), i % 2));
        }
        let schema = ColumnSchema {
            features: header,
            outcome: Some("conversion".into()),
            treatment: Some("treatment".into()),
            id: None,
        };
        let f = table(&s).to_frame(Some(&schema)).unwrap();
        assert_eq!(f.features().n_cols(), 12);
        assert_eq!(f.treatment().unwrap(), &[0, 1, 0, 1]);
    }

    #[test]
    fn non_binary_outcome_names_line() {
        let t = table("x,y\n1,0\n2,2\n");
        let err = t.to_frame(None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let t = table("a,b\n1,2\n");
        let schema = ColumnSchema {
            features: vec!["a".into(), "c".into()],
            ..Default::default()
        };
        let err = t.to_frame(Some(&schema)).unwrap_err();
        assert!(matches!(err, HsdError::Core(CoreError::Schema(_))));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn gaps_rejected() {
        let t = table("a,b\n1,\n");
        assert!(t.to_frame(None).is_err());
        assert!(table("a\nfoo\n").to_frame(None).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let src = "id,x1,x2,w,y\n7,0.1,-2.5e-7,1,0\n9,3.141592653589793,1e300,0,1\n";
        let f = table(src).to_frame(None).unwrap();
        let mut out = Vec::new();
        emit_csv(&f, &mut out).unwrap();
        let back = Table::from_reader(out.as_slice(), "back").unwrap().to_frame(None).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn inferred_roles() {
        let s = ColumnSchema::infer(&["id", "x1", "stratum", "w", "y"].map(String::from));
        assert_eq!(s.features, vec!["x1".to_string()]);
        assert_eq!(s.id.as_deref(), Some("id"));
        assert_eq!(s.treatment.as_deref(), Some("w"));
        assert_eq!(s.outcome.as_deref(), Some("y"));
    }
}

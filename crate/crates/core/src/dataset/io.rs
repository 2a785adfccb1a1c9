use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_observation, Dataset, FeatureTable, Observation};
use crate::error::{Error, Result};
use crate::format::{fmt_f64, to_json_compact, write_file};
use crate::linalg::Matrix;

pub const OBSERVATIONS_JSONL: &str = "observations.jsonl";
pub const OBSERVATIONS_CSV: &str = "observations.csv";
pub const WORKLOAD_FEATURES: &str = "workload_features.csv";
pub const PLATFORM_FEATURES: &str = "platform_features.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// `observations.jsonl` with one `{"w","p","k","t"}` object per line.
    #[default]
    CanonicalJsonl,
    /// `observations.csv` with columns `w,p,k,t`; `k` is `;`-separated.
    CanonicalCsv,
}

impl DatasetFormat {
    fn observations_file(self) -> &'static str {
        match self {
            DatasetFormat::CanonicalJsonl => OBSERVATIONS_JSONL,
            DatasetFormat::CanonicalCsv => OBSERVATIONS_CSV,
        }
    }

    /// Pick the format from whichever observation file exists in `dir`.
    pub fn detect(dir: &Path) -> Option<Self> {
        if dir.join(OBSERVATIONS_JSONL).is_file() {
            Some(DatasetFormat::CanonicalJsonl)
        } else if dir.join(OBSERVATIONS_CSV).is_file() {
            Some(DatasetFormat::CanonicalCsv)
        } else {
            None
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRow {
    w: usize,
    p: usize,
    k: Vec<usize>,
    t: f64,
}

/// Load a dataset directory holding observations plus both feature tables.
pub fn load_dataset(dir: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (workload_features, workload_feature_names, workload_names) = read_feature_csv(&dir.join(WORKLOAD_FEATURES))?;
    let (platform_features, platform_feature_names, platform_names) = read_feature_csv(&dir.join(PLATFORM_FEATURES))?;
    let nw = workload_features.rows();
    let np = platform_features.rows();

    let obs_path = dir.join(format.observations_file());
    let observations = match format {
        DatasetFormat::CanonicalJsonl => read_jsonl(&obs_path)?,
        DatasetFormat::CanonicalCsv => read_obs_csv(&obs_path)?,
    };
    for (line, obs) in &observations {
        validate_observation(obs, nw, np)
            .map_err(|msg| Error::validation(format!("{}:{line}: {msg}", obs_path.display())))?;
    }

    let mut features = FeatureTable {
        workload_features,
        workload_feature_names,
        platform_features,
        platform_feature_names,
    };
    features.validate()?;
    features.drop_zero_columns();
    let dataset = Dataset {
        observations: observations.into_iter().map(|(_, o)| o).collect(),
        features,
        workload_names,
        platform_names,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a dataset directory in canonical form.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>, format: DatasetFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_feature_csv(
        &dir.join(WORKLOAD_FEATURES),
        &dataset.features.workload_features,
        &dataset.features.workload_feature_names,
        dataset.workload_names.as_deref(),
    )?;
    write_feature_csv(
        &dir.join(PLATFORM_FEATURES),
        &dataset.features.platform_features,
        &dataset.features.platform_feature_names,
        dataset.platform_names.as_deref(),
    )?;
    let mut out = String::new();
    match format {
        DatasetFormat::CanonicalJsonl => {
            for o in &dataset.observations {
                let row = ObservationRow {
                    w: o.workload,
                    p: o.platform,
                    k: o.interference.clone(),
                    t: o.runtime,
                };
                out.push_str(&to_json_compact(&row)?);
                out.push('\n');
            }
        }
        DatasetFormat::CanonicalCsv => {
            out.push_str("w,p,k,t\n");
            for o in &dataset.observations {
                let k: Vec<String> = o.interference.iter().map(|k| k.to_string()).collect();
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    o.workload,
                    o.platform,
                    k.join(";"),
                    fmt_f64(o.runtime)
                ));
            }
        }
    }
    write_file(&dir.join(format.observations_file()), out.as_bytes())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        message: message.into(),
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<(usize, Observation)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ObservationRow = serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        out.push((line_no, Observation::new(row.w, row.p, row.k, row.t)));
    }
    Ok(out)
}

fn read_obs_csv(path: &Path) -> Result<Vec<(usize, Observation)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "w,p,k,t" => {}
        _ => return Err(parse_error(path, 1, "expected header `w,p,k,t`")),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_error(
                path,
                line_no,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let int = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| parse_error(path, line_no, format!("bad {what} `{s}`: {e}")))
        };
        let interference = if fields[2].trim().is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(';')
                .map(|k| int(k, "interfering workload"))
                .collect::<Result<Vec<_>>>()?
        };
        let runtime = fields[3]
            .trim()
            .parse::<f64>()
            .map_err(|e| parse_error(path, line_no, format!("bad runtime `{}`: {e}", fields[3])))?;
        out.push((
            line_no,
            Observation::new(
                int(fields[0], "workload")?,
                int(fields[1], "platform")?,
                interference,
                runtime,
            ),
        ));
    }
    Ok(out)
}

type FeatureCsv = (Matrix, Vec<String>, Option<Vec<String>>);

fn read_feature_csv(path: &Path) -> Result<FeatureCsv> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let has_names = header.first().map(|h| h == "name").unwrap_or(false);
    let feature_names: Vec<String> = header.iter().skip(usize::from(has_names)).cloned().collect();
    let cols = feature_names.len();
    let mut names = Vec::new();
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, record) in reader.records().enumerate() {
        let line_no = idx + 2;
        let record = record.map_err(|e| parse_error(path, line_no, e.to_string()))?;
        let mut fields = record.iter();
        if has_names {
            names.push(fields.next().unwrap_or_default().to_string());
        }
        let values: Vec<&str> = fields.collect();
        if values.len() != cols {
            return Err(parse_error(
                path,
                line_no,
                format!("expected {cols} feature values, found {}", values.len()),
            ));
        }
        for v in values {
            let x = v
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_error(path, line_no, format!("bad feature `{v}`: {e}")))?;
            if !x.is_finite() {
                return Err(Error::validation(format!(
                    "{}:{line_no}: non-finite feature value",
                    path.display()
                )));
            }
            data.push(x);
        }
        rows += 1;
    }
    let names = has_names.then_some(names);
    Ok((Matrix::from_vec(rows, cols, data), feature_names, names))
}

fn write_feature_csv(path: &Path, m: &Matrix, feature_names: &[String], names: Option<&[String]>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if names.is_some() {
        header.push("name");
    }
    header.extend(feature_names.iter().map(String::as_str));
    writer.write_record(&header)?;
    for i in 0..m.rows() {
        let mut record: Vec<String> = Vec::with_capacity(m.cols() + 1);
        if let Some(names) = names {
            record.push(names[i].clone());
        }
        record.extend(m.row(i).iter().map(|&x| fmt_f64(x)));
        writer.write_record(&record)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

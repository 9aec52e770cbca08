//! On-disk formats. Every CSV starts with a `# hmm-vrso <kind> v1` line so
//! readers can tell the schema apart from the data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use hmm_vrso::{HmmParams, Observations};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const DIVE_END: &str = "dive_end";

/// Writes through a sibling temporary file so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| CliError::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub struct Table {
    buf: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(kind: &str, header: &[S]) -> Self {
        let mut first = format!("# hmm-vrso {kind} v{SCHEMA_VERSION}\n").into_bytes();
        first.reserve(1 << 12);
        let mut buf = csv::Writer::from_writer(first);
        buf.write_record(header.iter().map(|s| s.as_ref())).expect("in-memory write");
        Table { buf }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.buf.write_record(fields).expect("in-memory write");
    }

    pub fn save(self, path: &Path) -> Result<()> {
        let bytes = self.buf.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}

/// Shortest round-trip text, with an exponent for very large or small
/// magnitudes.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt(v: Option<impl ToString>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn save_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Observations with a header row and one time index per row. A final
/// `dive_end` column of 0/1 marks dive data.
pub fn read_observations(path: &Path) -> Result<Observations> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: String| CliError::bad_input(path, msg);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(&bytes[..]);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(bad("expected a time column and at least one value column".into()));
    }
    let dive = header.get(header.len() - 1) == Some(DIVE_END);
    let width = header.len() - 1;
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(bad(format!("row {} has {} fields, header has {}", r + 1, rec.len(), header.len())));
        }
        for f in rec.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| bad(format!("row {}: `{f}` is not a number", r + 1)))?;
            values.push(v);
        }
    }
    if !dive {
        return Observations::new(width, values).map_err(|e| bad(e.to_string()));
    }
    if width != 2 {
        return Err(bad(format!("dive data need exactly one value column before `{DIVE_END}`")));
    }
    let depth: Vec<f64> = values.iter().step_by(2).copied().collect();
    let ends = values
        .iter()
        .skip(1)
        .step_by(2)
        .enumerate()
        .map(|(r, &e)| match e {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(bad(format!("row {}: `{DIVE_END}` must be 0 or 1", r + 1))),
        })
        .collect::<Result<Vec<bool>>>()?;
    Observations::dives(&depth, &ends).map_err(|e| bad(e.to_string()))
}

pub fn observation_header(obs: &Observations) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    if obs.is_structured() {
        h.extend(["depth_change".to_string(), DIVE_END.to_string()]);
    } else {
        h.extend((1..=obs.dim).map(|k| format!("y{k}")));
    }
    h
}

pub fn write_observations(path: &Path, obs: &Observations) -> Result<()> {
    let mut t = Table::new("observations", &observation_header(obs));
    for i in 0..obs.len {
        let mut row = vec![(i + 1).to_string()];
        let vals = obs.row(i);
        if obs.is_structured() {
            row.push(num(vals[0]));
            row.push(if vals[1] == 1.0 { "1".into() } else { "0".into() });
        } else {
            row.extend(vals.iter().map(|&v| num(v)));
        }
        t.row(row);
    }
    t.save(path)
}

pub fn read_params(path: &Path) -> Result<HmmParams> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let p: HmmParams = serde_json::from_str(&text).map_err(|e| CliError::bad_input(path, e))?;
    p.validate()?;
    Ok(p)
}

/// Audit record written next to the outputs of every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub status: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub epochs: Option<f64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &'static str, config: &impl Serialize, seed: u64) -> Self {
        let json = serde_json::to_vec(config).expect("config serializes");
        RunManifest {
            tool: "hmm-vrso",
            version: env!("CARGO_PKG_VERSION"),
            command,
            status: "ok".into(),
            config_hash: sha256_hex(&json),
            seed,
            wall_clock_secs: 0.0,
            epochs: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_json(&dir.join("manifest.json"), self)
    }
}

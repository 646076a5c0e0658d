//! Report files. JSON reports carry a `header` object next to the payload;
//! CSV reports start with `# key: value` comment lines. No timestamps, so a
//! rerun with the same inputs writes identical bytes.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Echo of everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub deep_layers: [usize; 2],
    pub topk: usize,
    pub a_c: f32,
    pub n_prompts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fix: Option<String>,
    pub model_config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub command: String,
    pub model_sha256: String,
    pub config: RunConfig,
}

impl Header {
    pub fn new(command: &str, model_sha256: String, config: RunConfig) -> Self {
        Header {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            model_sha256,
            config,
        }
    }

    fn comment_lines(&self) -> Result<String> {
        let mut s = String::new();
        s.push_str(&format!("# tool: {} {}\n", self.tool, self.version));
        s.push_str(&format!("# schema_version: {}\n", self.schema_version));
        s.push_str(&format!("# command: {}\n", self.command));
        s.push_str(&format!("# model_sha256: {}\n", self.model_sha256));
        s.push_str(&format!("# config: {}\n", serde_json::to_string(&self.config)?));
        Ok(s)
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::with_capacity(1 << 20, file);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    header: &'a Header,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, header: &Header, body: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(&Envelope { header, body })?;
    s.push('\n');
    write_bytes(path.as_ref(), s.as_bytes())
}

/// CSV with the header as leading comment lines.
pub fn write_csv<R, I>(path: impl AsRef<Path>, header: &Header, columns: &[&str], rows: I) -> Result<()>
where
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
    I: IntoIterator<Item = R>,
{
    let csv_err = |e: csv::Error| Error::Dataset(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::Dataset(format!("csv: {e}")))?;
    let mut out = header.comment_lines()?.into_bytes();
    out.extend(body);
    write_bytes(path.as_ref(), &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Empty for `None`, shortest round-trip form otherwise.
pub fn fmt_opt(v: Option<f32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

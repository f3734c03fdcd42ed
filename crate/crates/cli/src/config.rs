//! Config documents: TOML files layered over built-in defaults, then
//! `--set dotted.path=value` overrides and the `ADSC_SEED` variable.
//!
//! Every command config starts from its `Default`, serialized to a TOML
//! table. The file and the overrides are merged into that table key by key,
//! and the result is deserialized with unknown keys rejected. The fully
//! resolved document is echoed next to the outputs, so feeding it back in
//! reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces the top-level `seed` of any config that has one.
pub const SEED_ENV: &str = "ADSC_SEED";

/// File names written into every output directory.
pub const RESOLVED_CONFIG: &str = "resolved.toml";
pub const METADATA: &str = "meta.json";

/// Where a config comes from.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    /// `dotted.path=value` strings, applied in order after the file.
    pub sets: Vec<String>,
    /// Overrides from dedicated command flags, applied last.
    pub flags: Vec<(String, Value)>,
    /// Value of [`SEED_ENV`], if any.
    pub seed_env: Option<String>,
}

impl Sources {
    pub fn from_env(file: Option<PathBuf>, sets: Vec<String>) -> Self {
        Self { file, sets, flags: Vec::new(), seed_env: std::env::var(SEED_ENV).ok() }
    }
}

/// Builds a config of type `C` from its defaults and `sources`.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(sources: &Sources) -> CliResult<C> {
    let mut table = Table::try_from(C::default()).map_err(|e| CliError::Runtime(format!("default config: {e}")))?;
    let has_seed = table.contains_key("seed");
    if let Some(path) = &sources.file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let user: Table =
            toml::from_str(&text).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
        merge(&mut table, user);
    }
    for set in &sources.sets {
        let (path, raw) =
            set.split_once('=').ok_or_else(|| CliError::Invalid(format!("override `{set}` is not path=value")))?;
        set_path(&mut table, path.trim(), parse_value(raw.trim()))?;
    }
    for (path, value) in &sources.flags {
        set_path(&mut table, path, value.clone())?;
    }
    if let (true, Some(seed)) = (has_seed, &sources.seed_env) {
        let seed: i64 =
            seed.trim().parse().map_err(|_| CliError::Invalid(format!("{SEED_ENV}={seed} is not an integer")))?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Invalid(format!("config: {e}")))
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> CliResult<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| CliError::Invalid(format!("empty key in `{path}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Invalid(format!("`{p}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// An output directory for one command run.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    started_ms: u128,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), started_ms: unix_ms() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv<S: Serialize>(&self, name: &str, rows: &[S]) -> CliResult<PathBuf> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn write_config<C: Serialize>(&self, config: &C) -> CliResult<PathBuf> {
        let text = toml::to_string(config).map_err(|e| CliError::Runtime(format!("config echo: {e}")))?;
        self.write_text(RESOLVED_CONFIG, &text)
    }

    /// Timestamps live only here, so every other output is a pure function of config and seed.
    pub fn finish(&self, command: &str) -> CliResult<PathBuf> {
        let finished = unix_ms();
        let meta = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix_ms": self.started_ms as u64,
            "finished_unix_ms": finished as u64,
            "elapsed_ms": finished.saturating_sub(self.started_ms) as u64,
        });
        self.write_json(METADATA, &meta)
    }
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        a: f64,
        b: Vec<usize>,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Doc {
        seed: u64,
        name: String,
        inner: Inner,
    }

    fn with_file(text: &str) -> (tempfile::NamedTempFile, Sources) {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        let s = Sources { file: Some(f.path().to_path_buf()), ..Sources::default() };
        (f, s)
    }

    #[test]
    fn file_overlays_defaults() {
        let (_f, s) = with_file("[inner]\na = 2.5\n");
        let d: Doc = resolve(&s).unwrap();
        assert_eq!(d, Doc { inner: Inner { a: 2.5, b: vec![] }, ..Doc::default() });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_f, s) = with_file("[inner]\nc = 1\n");
        assert!(matches!(resolve::<Doc>(&s), Err(CliError::Invalid(_))));
        let s = Sources { sets: vec!["bogus=1".into()], ..Sources::default() };
        assert!(matches!(resolve::<Doc>(&s), Err(CliError::Invalid(_))));
    }

    #[test]
    fn dotted_overrides_and_seed_env() {
        let s = Sources {
            sets: vec!["inner.b=[1, 2]".into(), "name=plain text".into(), "seed=3".into()],
            seed_env: Some("9".into()),
            ..Sources::default()
        };
        let d: Doc = resolve(&s).unwrap();
        assert_eq!(d.inner.b, vec![1, 2]);
        assert_eq!(d.name, "plain text");
        assert_eq!(d.seed, 9);
    }

    #[test]
    fn echo_round_trips() {
        let s = Sources { sets: vec!["inner.a=0.1".into(), "name=\"x\"".into()], ..Sources::default() };
        let d: Doc = resolve(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path()).unwrap();
        let path = out.write_config(&d).unwrap();
        let again: Doc = resolve(&Sources { file: Some(path), ..Sources::default() }).unwrap();
        assert_eq!(d, again);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use evoked::dataio::{CHECKPOINT_VERSION, FEATURE_VERSION, LABEL_CSV_VERSION};
use evoked::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Record of one mutating run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub format_versions: Value,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_owned(),
            config: to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: TOOL_VERSION.to_owned(),
            format_versions: serde_json::json!({
                "eevf": FEATURE_VERSION,
                "eevm": CHECKPOINT_VERSION,
                "label_csv": LABEL_CSV_VERSION,
            }),
            duration_s: 0.0,
        })
    }

    pub fn write(mut self, path: &Path, elapsed: Duration) -> Result<()> {
        self.duration_s = elapsed.as_secs_f64();
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        log::info!("wrote manifest {}", path.display());
        Ok(())
    }
}

/// `<path><suffix>`, e.g. `model.eevm` → `model.eevm.manifest.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_value(v: &impl Serialize) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Internal(e.to_string()))
}

fn merge(base: &mut Map<String, Value>, top: &Map<String, Value>) {
    for (k, v) in top {
        base.insert(k.clone(), v.clone());
    }
}

/// Effective configuration: flags over the config file over defaults.
///
/// The file may be a flat JSON object or a run manifest, whose `config`
/// object is used.
pub fn resolve<T>(config_file: Option<&Path>, flags: Map<String, Value>) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut merged) = to_value(&T::default())? else {
        return Err(Error::Internal("configuration is not an object".into()));
    };
    if let Some(path) = config_file {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let obj = match parsed.get("config") {
            Some(Value::Object(c)) if parsed.get("command").is_some() => c.clone(),
            _ => match parsed {
                Value::Object(o) => o,
                _ => return Err(Error::Input(format!("{}: expected a JSON object", path.display()))),
            },
        };
        for key in obj.keys() {
            if !merged.contains_key(key) {
                return Err(Error::Input(format!("{}: unknown setting {key:?}", path.display())));
            }
        }
        merge(&mut merged, &obj);
    }
    merge(&mut merged, &flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Input(format!("configuration: {e}")))
}

/// Collects the flags that were given into a JSON object.
#[macro_export]
macro_rules! flags {
    ($($key:literal => $val:expr),* $(,)?) => {{
        let mut m = serde_json::Map::new();
        $(
            if let Some(v) = &$val {
                m.insert($key.to_owned(), serde_json::to_value(v).expect("flag value"));
            }
        )*
        m
    }};
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        a: u32,
        b: f64,
        c: String,
    }

    #[test]
    fn precedence_is_flags_then_file_then_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        fs::write(&f, r#"{"a": 3, "b": 2.5}"#).unwrap();
        let d: Demo = resolve(Some(&f), flags! { "b" => Some(9.0), "c" => None::<String> }).unwrap();
        assert_eq!(d, Demo { a: 3, b: 9.0, c: String::new() });

        let m = dir.path().join("m.json");
        fs::write(&m, r#"{"command": "x", "config": {"c": "hi"}}"#).unwrap();
        let d: Demo = resolve(Some(&m), Map::new()).unwrap();
        assert_eq!(d.c, "hi");

        fs::write(&f, r#"{"zzz": 1}"#).unwrap();
        assert!(resolve::<Demo>(Some(&f), Map::new()).is_err());
    }

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("out/m.eevm"), ".manifest.json"), PathBuf::from("out/m.eevm.manifest.json"));
    }
}

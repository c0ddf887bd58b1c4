use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

/// Sections of a run configuration file. Every section is optional and
/// holds the same fields as the corresponding library config.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
    path: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match value {
            Value::Object(root) => Ok(Self {
                root,
                path: Some(path.to_path_buf()),
            }),
            _ => anyhow::bail!("config {} must be a JSON object", path.display()),
        }
    }

    /// Overlays section `name` of the file onto `base`.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(overlay) = self.root.get(name) else {
            return Ok(base);
        };
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, overlay);
        serde_json::from_value(v).with_context(|| {
            format!(
                "section {name:?} of {}",
                self.path.as_deref().unwrap_or(Path::new("config")).display()
            )
        })
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// `<output>.config.json`: the command, its resolved settings and the
/// format versions involved.
pub fn write_echo(output: &Path, command: &str, settings: Value) -> Result<()> {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.json");
    let echo = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "formats": {
            "checkpoint": emg_intent::model::CHECKPOINT_FORMAT,
            "predictions": emg_intent::stream::PREDICTIONS_FORMAT,
            "report": emg_intent::metrics::REPORT_FORMAT,
            "baseline": emg_intent::baseline::BASELINE_FORMAT,
        },
        "settings": settings,
    });
    fs::write(&name, serde_json::to_string_pretty(&echo)? + "\n")
        .with_context(|| format!("writing {}", PathBuf::from(&name).display()))
}

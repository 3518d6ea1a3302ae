use std::fmt;
use std::path::{Path, PathBuf};

use distildp::ExperimentConfig;

/// A config file that could not be read, parsed, or validated.
#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(
                f,
                "{}: field `{field}`: {}",
                self.path.display(),
                self.message
            ),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub bytes: Vec<u8>,
    /// Files the config refers to, resolved against the config's directory.
    pub inputs: Vec<PathBuf>,
}

/// Reads a TOML experiment config. Relative corpus paths are taken relative
/// to the config file.
pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let err = |field: Option<String>, message: String| ConfigError {
        path: path.to_path_buf(),
        field,
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| err(None, e.to_string()))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| err(None, e.to_string()))?;
    let de = toml::Deserializer::parse(text).map_err(|e| err(None, e.to_string()))?;
    let mut config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        err(Some(field), e.into_inner().message().to_string())
    })?;

    let base = path.parent().unwrap_or(Path::new("."));
    let mut inputs = Vec::new();
    for p in [&mut config.corpus.records, &mut config.corpus.schema]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
        inputs.push(p.clone());
    }
    config.validate().map_err(|e| match e {
        distildp::Error::Config { field, message } => err(Some(field), message),
        e => err(None, e.to_string()),
    })?;
    Ok(LoadedConfig {
        config,
        bytes,
        inputs,
    })
}

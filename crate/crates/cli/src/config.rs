//! Key-value settings files. A config file is flat TOML (`batch_size = 64`)
//! whose keys mirror flag names; flags always win over file values, and file
//! values win over built-in defaults. Keys a command does not use are
//! ignored so one file can serve a whole experiment.

use crate::CliError;

#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
    path: String,
}

impl ConfigFile {
    /// Load `path` if given; an absent flag means an empty config.
    pub fn load(path: Option<&str>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config `{path}`: {e}")))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config `{path}` is not valid TOML: {e}")))?;
        for (key, value) in &table {
            if value.is_table() || value.is_array() {
                return Err(CliError::Usage(format!(
                    "config `{path}`: key `{key}` must be a scalar"
                )));
            }
        }
        Ok(ConfigFile {
            table,
            path: path.into(),
        })
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(other) => Err(self.type_error(key, other, "a non-negative integer")),
        }
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(other) => Err(self.type_error(key, other, "a non-negative integer")),
        }
    }

    pub fn f32(&self, key: &str) -> Result<Option<f32>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(x)) => Ok(Some(*x as f32)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f32)),
            Some(other) => Err(self.type_error(key, other, "a number")),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(other) => Err(self.type_error(key, other, "a boolean")),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(self.type_error(key, other, "a string")),
        }
    }

    fn type_error(&self, key: &str, got: &toml::Value, want: &str) -> CliError {
        CliError::Usage(format!(
            "config `{}`: key `{key}` must be {want}, found {}",
            self.path,
            got.type_str()
        ))
    }
}

/// flags > config > default, for any scalar setting.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// flags > config, no default (setting stays optional).
pub fn resolve_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

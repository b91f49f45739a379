//! Minimal --key value flag parser for the subcommands.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Flags {
    map: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct FlagError(pub String);

impl std::fmt::Display for FlagError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Flags {
    pub fn parse(args: &[String]) -> Result<Flags, FlagError> {
        let mut map = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            if let Some(key) = a.strip_prefix("--") {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| FlagError(format!("flag --{key} needs a value")))?;
                map.insert(key.to_string(), value.clone());
                i += 2;
            } else {
                return Err(FlagError(format!("unexpected argument '{a}'")));
            }
        }
        Ok(Flags { map })
    }

    pub fn str_opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.map.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn str_required(&self, key: &str) -> Result<String, FlagError> {
        self.map
            .get(key)
            .cloned()
            .ok_or_else(|| FlagError(format!("missing required flag --{key}")))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, FlagError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| FlagError(format!("flag --{key}: bad integer '{v}'"))),
        }
    }

    pub fn usize_required(&self, key: &str) -> Result<usize, FlagError> {
        let v = self.str_required(key)?;
        v.parse().map_err(|_| FlagError(format!("flag --{key}: bad integer '{v}'")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, FlagError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| FlagError(format!("flag --{key}: bad number '{v}'"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, FlagError> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("on") | Some("true") | Some("1") => Ok(true),
            Some("off") | Some("false") | Some("0") => Ok(false),
            Some(v) => Err(FlagError(format!("flag --{key}: expected on/off, got '{v}'"))),
        }
    }
}

//! JSON reports: stable key order, no wall-clock fields.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::checkpoint::write_atomic;

/// Build facts that affect numerical results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub package: &'static str,
    pub version: &'static str,
    pub arch: &'static str,
    pub os: &'static str,
    pub debug_assertions: bool,
    pub float: &'static str,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            arch: std::env::consts::ARCH,
            os: std::env::consts::OS,
            debug_assertions: cfg!(debug_assertions),
            float: "f64",
        }
    }
}

/// A report body together with its command name and environment.
#[derive(Clone, Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub command: &'static str,
    pub environment: Environment,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &'static str, body: T) -> Self {
        Self {
            command,
            environment: Environment::current(),
            body,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("report encoding: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Body {
        zeta: u32,
        alpha: Option<f64>,
    }

    #[test]
    fn field_order_is_declaration_order() {
        let r = Report::new("demo", Body { zeta: 1, alpha: None });
        let s = to_json(&r).unwrap();
        let pos = |k: &str| s.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("command") < pos("environment"));
        assert!(pos("zeta") < pos("alpha"));
        assert!(s.contains("\"alpha\": null"));
        assert_eq!(s, to_json(&r).unwrap());
    }
}

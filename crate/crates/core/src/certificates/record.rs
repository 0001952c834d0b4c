use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Certificate method tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "JLBC")]
    Jlbc,
    #[serde(rename = "JLBC-AR")]
    JlbcMixedAr,
    #[serde(rename = "JDPath")]
    JDPath,
    #[serde(rename = "JSFNS")]
    Jsfns,
    #[serde(rename = "JSBDDM")]
    Jsbddm,
    #[serde(rename = "JMSSM")]
    Jmssm,
    #[serde(rename = "OODC")]
    Oodc,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Jlbc,
        Method::JlbcMixedAr,
        Method::JDPath,
        Method::Jsfns,
        Method::Jsbddm,
        Method::Jmssm,
        Method::Oodc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Jlbc => "JLBC",
            Method::JlbcMixedAr => "JLBC-AR",
            Method::JDPath => "JDPath",
            Method::Jsfns => "JSFNS",
            Method::Jsbddm => "JSBDDM",
            Method::Jmssm => "JMSSM",
            Method::Oodc => "OODC",
        }
    }

    /// −1 when larger certificates mean in-distribution (likelihoods),
    /// +1 when larger values mean out-of-distribution.
    pub fn sign(self) -> f64 {
        match self {
            Method::Jlbc | Method::JlbcMixedAr => -1.0,
            _ => 1.0,
        }
    }

    pub fn is_family(self) -> bool {
        matches!(self, Method::JDPath | Method::Jsfns | Method::Jsbddm | Method::Jmssm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown certificate method {s:?}")))
    }
}

/// One certificate value with its provenance and, when ground truth is
/// known, the prediction error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateRecord {
    pub sample_id: u64,
    pub dataset: String,
    pub method: Method,
    pub certificate: f64,
    #[serde(default)]
    pub error: Option<f64>,
    #[serde(default)]
    pub relative_error: Option<f64>,
}

impl CertificateRecord {
    pub fn new(sample_id: u64, method: Method, certificate: f64) -> Self {
        Self {
            sample_id,
            dataset: String::new(),
            method,
            certificate,
            error: None,
            relative_error: None,
        }
    }

    pub fn with_dataset(mut self, tag: impl Into<String>) -> Self {
        self.dataset = tag.into();
        self
    }

    pub fn with_error(mut self, error: f64, relative: f64) -> Self {
        self.error = Some(error);
        self.relative_error = Some(relative);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_parse_case_insensitively() {
        for m in Method::ALL {
            assert_eq!(m.name().to_lowercase().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.name());
        }
        assert!("nope".parse::<Method>().is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use s2t_saliency::audio::Spectrogram;
use s2t_saliency::masks::TokenMask;
use s2t_saliency::oracle::{Oracle, ProbDist, RemoteConfig, RemoteOracle, TokenSequence, ToyModel};
use s2t_saliency::Result;

use crate::CliError;

/// Environment variable naming a remote bridge when `--oracle` is absent.
pub const ORACLE_URL_ENV: &str = "S2T_ORACLE_URL";

/// `toy` or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleSpec {
    Toy,
    Remote(String),
}

impl FromStr for OracleSpec {
    type Err = CliError;

    fn from_str(s: &str) -> std::result::Result<Self, CliError> {
        match s.split_once(':') {
            _ if s == "toy" => Ok(OracleSpec::Toy),
            Some(("remote", url)) if !url.is_empty() => Ok(OracleSpec::Remote(url.to_string())),
            _ => Err(CliError::Config(format!("oracle must be `toy` or `remote:URL`, got {s:?}"))),
        }
    }
}

impl fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleSpec::Toy => f.write_str("toy"),
            OracleSpec::Remote(url) => write!(f, "remote:{url}"),
        }
    }
}

impl OracleSpec {
    /// The flag if given, else a URL from the environment, else the toy model.
    pub fn resolve(flag: Option<&str>) -> std::result::Result<Self, CliError> {
        match flag {
            Some(s) => s.parse(),
            None => match std::env::var(ORACLE_URL_ENV) {
                Ok(url) if !url.is_empty() => Ok(OracleSpec::Remote(url)),
                _ => Ok(OracleSpec::Toy),
            },
        }
    }

    pub fn build(&self) -> AnyOracle {
        match self {
            OracleSpec::Toy => AnyOracle::Toy(ToyModel::default()),
            OracleSpec::Remote(url) => AnyOracle::Remote(Box::new(RemoteOracle::new(RemoteConfig::new(url.clone())))),
        }
    }
}

pub enum AnyOracle {
    Toy(ToyModel),
    Remote(Box<RemoteOracle>),
}

impl Oracle for AnyOracle {
    fn forward(&self, x: &Spectrogram, y: &TokenSequence, m: Option<&TokenMask>) -> Result<Vec<ProbDist>> {
        match self {
            AnyOracle::Toy(o) => o.forward(x, y, m),
            AnyOracle::Remote(o) => o.forward(x, y, m),
        }
    }

    fn decode(&self, x: &Spectrogram) -> Result<TokenSequence> {
        match self {
            AnyOracle::Toy(o) => o.decode(x),
            AnyOracle::Remote(o) => o.decode(x),
        }
    }

    fn vocab(&self) -> Option<&[String]> {
        match self {
            AnyOracle::Toy(o) => o.vocab(),
            AnyOracle::Remote(o) => o.vocab(),
        }
    }
}

//! TOML persistence for fitted models and model bundles.
//!
//! Every file carries `schema_version`. Floats are written in the shortest
//! form that parses back to the same `f64`, so a save/load round trip is
//! exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::parse_error;
use crate::arima::ArimaModel;
use crate::carma::CarmaModel;
use crate::decomposition::SeasonalTrendModel;
use crate::error::{Error, Result};
use crate::pricing::MarketMeasure;

pub const SCHEMA_VERSION: u32 = 1;

/// A model that can be saved on its own.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl Artifact for SeasonalTrendModel {
    const KIND: &'static str = "seasonal_trend";
}

impl Artifact for CarmaModel {
    const KIND: &'static str = "carma";
}

impl Artifact for ArimaModel {
    const KIND: &'static str = "arima";
}

impl Artifact for MarketMeasure {
    const KIND: &'static str = "market_measure";
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    schema_version: u32,
    kind: String,
    model: T,
}

fn check_version(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Parse {
            location: "schema_version".into(),
            message: format!("unsupported schema version {found} (expected {SCHEMA_VERSION})"),
        });
    }
    Ok(())
}

fn serialize<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Invariant(format!("cannot serialize: {e}")))
}

pub fn to_toml_string<T: Artifact>(artifact: &T) -> Result<String> {
    serialize(&Envelope {
        schema_version: SCHEMA_VERSION,
        kind: T::KIND.to_string(),
        model: artifact,
    })
}

pub fn from_toml_str<T: Artifact>(text: &str) -> Result<T> {
    let env: Envelope<T> = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    check_version(env.schema_version)?;
    if env.kind != T::KIND {
        return Err(Error::Parse {
            location: "kind".into(),
            message: format!("file holds a `{}` model, expected `{}`", env.kind, T::KIND),
        });
    }
    Ok(env.model)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

pub fn save_model<T: Artifact>(artifact: &T, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_toml_string(artifact)?)?;
    Ok(())
}

pub fn load_model<T: Artifact>(path: impl AsRef<Path>) -> Result<T> {
    from_toml_str(&read(path.as_ref())?)
}

/// How an output was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesInfo {
    pub path_id: String,
    /// First timestamp, `YYYY-MM-DDTHH:MM:SS`.
    pub start_time: String,
    pub h: f64,
    pub n: usize,
    /// Minutes past midnight of the first sample.
    pub start_minute_of_day: f64,
}

/// Filter state at the end of the fitted series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleState {
    /// Minutes from the first sample to the last one; valuation time of the
    /// bundle on the series clock.
    pub t0: f64,
    /// Residual level at `t0`.
    pub level: f64,
    /// Filtered CARMA state at `t0` (empty for discrete-only bundles).
    #[serde(default)]
    pub carma_state: Vec<f64>,
    /// Most recent differenced residuals, oldest first.
    #[serde(default)]
    pub arima_history: Vec<f64>,
}

/// Everything produced by a fit: deterministic part, discrete and
/// continuous models, and the state needed to simulate forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub series: SeriesInfo,
    pub seasonal_trend: SeasonalTrendModel,
    pub arima: ArimaModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carma: Option<CarmaModel>,
    /// No continuous model: pricing falls back to discrete ARIMA paths.
    pub discrete_only: bool,
    pub state: BundleState,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        if self.discrete_only != self.carma.is_none() {
            return Err(Error::Invariant(
                "discrete_only must be set exactly when no CARMA model is present".into(),
            ));
        }
        if let Some(m) = &self.carma {
            if self.state.carma_state.len() != m.p() {
                return Err(Error::Invariant(format!(
                    "CARMA state has {} entries, model order is {}",
                    self.state.carma_state.len(),
                    m.p()
                )));
            }
        }
        if !(self.series.h.is_finite() && self.series.h > 0.0) {
            return Err(Error::Invariant("series h must be positive".into()));
        }
        let finite = [self.state.t0, self.state.level, self.series.start_minute_of_day]
            .iter()
            .chain(&self.state.carma_state)
            .chain(&self.state.arima_history)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invariant("bundle state must be finite".into()));
        }
        self.arima.validate()?;
        self.seasonal_trend.validate()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        self.validate()?;
        serialize(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bundle: Self = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bundle.to_toml_string()?)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::from_toml_str(&read(path.as_ref())?)
}

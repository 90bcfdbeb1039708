//! Additive body-frame corrections of IMU readings and per-frame noise
//! models.
//!
//! The tabulated variants are the integration point for any external model:
//! it writes a correction file with one row per IMU sample and this crate
//! applies it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covariance::NoiseDiag;
use crate::error::{invalid, Error, Result};
use crate::preintegration::ImuSequence;
use crate::Vec3;

/// Maximum timestamp disagreement between a correction row and its sample.
pub const ALIGNMENT_TOLERANCE_S: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum CorrectionModel {
    Identity,
    /// Constant sensor biases; the correction applied is their negation.
    ConstantBias { gyro: Vec3, acc: Vec3 },
    /// Per-frame additive corrections.
    Tabulated { gyro: Vec<Vec3>, acc: Vec<Vec3> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyModel {
    ConstantDiag(NoiseDiag),
    Tabulated(Vec<NoiseDiag>),
}

impl CorrectionModel {
    pub fn constant_bias(gyro: Vec3, acc: Vec3) -> Self {
        Self::ConstantBias { gyro, acc }
    }

    /// The correction that undoes this one.
    pub fn negated(&self) -> Self {
        match self {
            Self::Identity => Self::Identity,
            Self::ConstantBias { gyro, acc } => Self::ConstantBias {
                gyro: -gyro,
                acc: -acc,
            },
            Self::Tabulated { gyro, acc } => Self::Tabulated {
                gyro: gyro.iter().map(|v| -v).collect(),
                acc: acc.iter().map(|v| -v).collect(),
            },
        }
    }
}

/// `ã = a + σ_acc`, `w̃ = w + σ_gyro`, frame by frame.
pub fn apply_correction(samples: &ImuSequence, model: &CorrectionModel) -> Result<ImuSequence> {
    let mut out = samples.clone();
    match model {
        CorrectionModel::Identity => {}
        CorrectionModel::ConstantBias { gyro, acc } => {
            for s in &mut out.samples {
                s.gyro -= gyro;
                s.acc -= acc;
            }
        }
        CorrectionModel::Tabulated { gyro, acc } => {
            if gyro.len() != samples.len() || acc.len() != samples.len() {
                return Err(invalid(format!(
                    "correction table has {}/{} rows for {} samples",
                    gyro.len(),
                    acc.len(),
                    samples.len()
                )));
            }
            for ((s, g), a) in out.samples.iter_mut().zip(gyro).zip(acc) {
                s.gyro += g;
                s.acc += a;
            }
        }
    }
    Ok(out)
}

/// Per-frame noise variances for a stream.
pub fn uncertainty_of(samples: &ImuSequence, model: &UncertaintyModel) -> Result<Vec<NoiseDiag>> {
    match model {
        UncertaintyModel::ConstantDiag(d) => {
            d.validate()?;
            Ok(vec![*d; samples.len()])
        }
        UncertaintyModel::Tabulated(rows) => {
            if rows.len() != samples.len() {
                return Err(invalid(format!(
                    "uncertainty table has {} rows for {} samples",
                    rows.len(),
                    samples.len()
                )));
            }
            for r in rows {
                r.validate()?;
            }
            Ok(rows.clone())
        }
    }
}

/// One row of a correction/uncertainty file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub t: f64,
    pub sg_x: f64,
    pub sg_y: f64,
    pub sg_z: f64,
    pub sa_x: f64,
    pub sa_y: f64,
    pub sa_z: f64,
    pub eg_x: f64,
    pub eg_y: f64,
    pub eg_z: f64,
    pub ea_x: f64,
    pub ea_y: f64,
    pub ea_z: f64,
}

impl CorrectionRow {
    pub fn new(t: f64, sigma_gyro: Vec3, sigma_acc: Vec3, eta: NoiseDiag) -> Self {
        Self {
            t,
            sg_x: sigma_gyro.x,
            sg_y: sigma_gyro.y,
            sg_z: sigma_gyro.z,
            sa_x: sigma_acc.x,
            sa_y: sigma_acc.y,
            sa_z: sigma_acc.z,
            eg_x: eta.gyro.x,
            eg_y: eta.gyro.y,
            eg_z: eta.gyro.z,
            ea_x: eta.acc.x,
            ea_y: eta.acc.y,
            ea_z: eta.acc.z,
        }
    }

    pub fn sigma_gyro(&self) -> Vec3 {
        Vec3::new(self.sg_x, self.sg_y, self.sg_z)
    }

    pub fn sigma_acc(&self) -> Vec3 {
        Vec3::new(self.sa_x, self.sa_y, self.sa_z)
    }

    pub fn eta(&self) -> NoiseDiag {
        NoiseDiag::new(
            Vec3::new(self.eg_x, self.eg_y, self.eg_z),
            Vec3::new(self.ea_x, self.ea_y, self.ea_z),
        )
    }
}

/// Contents of a correction file, rows aligned 1:1 with an IMU stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectionTable {
    pub rows: Vec<CorrectionRow>,
}

impl CorrectionTable {
    /// Expands a constant model over the timestamps of `samples`.
    pub fn from_models(
        samples: &ImuSequence,
        correction: &CorrectionModel,
        uncertainty: &UncertaintyModel,
    ) -> Result<Self> {
        let eta = uncertainty_of(samples, uncertainty)?;
        let rows = samples
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (g, a) = match correction {
                    CorrectionModel::Identity => (Vec3::zeros(), Vec3::zeros()),
                    CorrectionModel::ConstantBias { gyro, acc } => (-gyro, -acc),
                    CorrectionModel::Tabulated { gyro, acc } => (gyro[k], acc[k]),
                };
                CorrectionRow::new(s.t, g, a, eta[k])
            })
            .collect::<Vec<_>>();
        if let CorrectionModel::Tabulated { gyro, acc } = correction {
            if gyro.len() != samples.len() || acc.len() != samples.len() {
                return Err(invalid("tabulated correction length mismatch"));
            }
        }
        Ok(Self { rows })
    }

    pub fn correction(&self) -> CorrectionModel {
        CorrectionModel::Tabulated {
            gyro: self.rows.iter().map(CorrectionRow::sigma_gyro).collect(),
            acc: self.rows.iter().map(CorrectionRow::sigma_acc).collect(),
        }
    }

    pub fn uncertainty(&self) -> UncertaintyModel {
        UncertaintyModel::Tabulated(self.rows.iter().map(CorrectionRow::eta).collect())
    }

    /// Errors unless there is exactly one row per sample at matching times.
    pub fn check_aligned(&self, samples: &ImuSequence) -> Result<()> {
        if self.rows.len() != samples.len() {
            return Err(invalid(format!(
                "correction file has {} rows, IMU stream has {} samples",
                self.rows.len(),
                samples.len()
            )));
        }
        for (k, (row, s)) in self.rows.iter().zip(&samples.samples).enumerate() {
            if (row.t - s.t).abs() > ALIGNMENT_TOLERANCE_S {
                return Err(invalid(format!(
                    "correction row {k} at t = {} does not match IMU sample at t = {}",
                    row.t, s.t
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        let expected = [
            "t", "sg_x", "sg_y", "sg_z", "sa_x", "sa_y", "sa_z", "eg_x", "eg_y", "eg_z", "ea_x",
            "ea_y", "ea_z",
        ];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row: 1,
                message: format!("unexpected header {:?}", headers),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<CorrectionRow>().enumerate() {
            let row = rec.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                row: i + 2,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

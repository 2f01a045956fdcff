//! CSV schemas for networks, measurements, designs, groundwater inputs and
//! model outputs. Lines starting with `#` are comments; fields are trimmed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossval::CvPair;
use crate::gwsource::{GroundwaterBody, GvfTypical, GwCatchmentResult, Method, WellScreen, Zone};
use crate::likelihood::{Measurement, MeasurementError, MeasurementSet};
use crate::network::{CatchmentNetwork, NetworkError, SubCatchment};
use crate::predict::{PredictionRecord, YearEffect};
use crate::sourcemodel::{DesignError, SourceDesign};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}, record {record}: {message}")]
    Invalid {
        path: PathBuf,
        record: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Network { path: PathBuf, source: NetworkError },
    #[error("{path}: {source}")]
    Measurement {
        path: PathBuf,
        source: MeasurementError,
    },
    #[error("{path}: {source}")]
    Design { path: PathBuf, source: DesignError },
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(r)
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut rdr = reader(open(path)?);
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let file = File::create(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "t" => Some(true),
        "0" | "false" | "no" | "n" | "f" | "" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRow {
    pub id: String,
    pub downstream: Option<String>,
    pub q: f64,
    pub qg: f64,
    pub qs: f64,
    pub area: f64,
}

pub fn read_network(path: &Path) -> Result<CatchmentNetwork<f64>, IoError> {
    let rows: Vec<NetworkRow> = read_rows(path)?;
    let catchments = rows
        .into_iter()
        .map(|r| SubCatchment {
            id: r.id,
            q_total: r.q,
            q_ground: r.qg,
            q_shallow: r.qs,
            area: r.area,
            downstream: r.downstream.filter(|d| !d.is_empty()),
        })
        .collect();
    CatchmentNetwork::build(catchments).map_err(|source| IoError::Network {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_network(path: &Path, net: &CatchmentNetwork<f64>) -> Result<(), IoError> {
    write_rows(
        path,
        net.catchments().iter().map(|c| NetworkRow {
            id: c.id.clone(),
            downstream: c.downstream.clone(),
            q: c.q_total,
            qg: c.q_ground,
            qs: c.q_shallow,
            area: c.area,
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub catchment_id: String,
    pub year: i32,
    pub value: Option<f64>,
    pub detection_limit: f64,
    pub censored: String,
}

pub fn read_measurements(path: &Path, net: &CatchmentNetwork<f64>) -> Result<MeasurementSet<f64>, IoError> {
    let rows: Vec<MeasurementRow> = read_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (k, r) in rows.into_iter().enumerate() {
        let censored = parse_flag(&r.censored).ok_or_else(|| IoError::Invalid {
            path: path.to_path_buf(),
            record: k + 1,
            message: format!("censored flag `{}` is not a boolean", r.censored),
        })?;
        out.push(Measurement {
            catchment: r.catchment_id,
            year: r.year,
            replicate: 0,
            value: r.value,
            detection_limit: r.detection_limit,
            censored,
        });
    }
    MeasurementSet::new(net, out).map_err(|source| IoError::Measurement {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_measurements(path: &Path, data: &MeasurementSet<f64>) -> Result<(), IoError> {
    write_rows(
        path,
        data.measurements().iter().map(|m| MeasurementRow {
            catchment_id: m.catchment.clone(),
            year: m.year,
            value: m.value,
            detection_limit: m.detection_limit,
            censored: if m.censored { "1" } else { "0" }.to_string(),
        }),
    )
}

/// Custom design: `catchment_id, <reference>, <factor_1>, ...`; the header
/// names become the factor names.
pub fn read_design(path: &Path, net: &CatchmentNetwork<f64>) -> Result<SourceDesign<f64>, IoError> {
    let mut rdr = reader(open(path)?);
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 2 {
        return Err(IoError::Invalid {
            path: path.to_path_buf(),
            record: 0,
            message: "design needs a catchment column and at least one source column".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let mut vals = Vec::with_capacity(names.len());
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| IoError::Invalid {
                path: path.to_path_buf(),
                record: k + 1,
                message: format!("`{field}` is not a number"),
            })?;
            vals.push(v);
        }
        let x0 = vals[0];
        rows.push((rec[0].to_string(), x0, vals[1..].to_vec()));
    }
    SourceDesign::new(net, names, rows).map_err(|source| IoError::Design {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwCatchmentRow {
    pub catchment_id: String,
    pub cg: Option<f64>,
    pub method: Method,
    pub uncertainty: String,
}

impl From<&GwCatchmentResult> for GwCatchmentRow {
    fn from(r: &GwCatchmentResult) -> Self {
        Self {
            catchment_id: r.catchment.clone(),
            cg: r.cg,
            method: r.method,
            uncertainty: r.uncertainty.clone(),
        }
    }
}

pub fn write_gw_catchments(path: &Path, rows: &[GwCatchmentResult]) -> Result<(), IoError> {
    write_rows(path, rows.iter().map(GwCatchmentRow::from))
}

/// Groundwater concentration per network catchment; unlisted or missing
/// entries are `None`.
pub fn read_groundwater_conc(path: &Path, net: &CatchmentNetwork<f64>) -> Result<Vec<Option<f64>>, IoError> {
    #[derive(Deserialize)]
    struct Row {
        catchment_id: String,
        cg: Option<f64>,
    }
    let rows: Vec<Row> = read_rows(path)?;
    let mut out = vec![None; net.len()];
    for (k, r) in rows.into_iter().enumerate() {
        let i = net.index_of(&r.catchment_id).ok_or_else(|| IoError::Invalid {
            path: path.to_path_buf(),
            record: k + 1,
            message: format!("unknown sub-catchment `{}`", r.catchment_id),
        })?;
        out[i] = r.cg;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScreenRow {
    id: String,
    x: f64,
    y: f64,
    mam_ni: Option<f64>,
    nitrate: Option<f64>,
    ph: Option<f64>,
    gvf_id: Option<String>,
    nbl_unit: String,
}

pub fn read_screens(path: &Path) -> Result<Vec<WellScreen>, IoError> {
    let rows: Vec<ScreenRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| WellScreen {
            id: r.id,
            x: r.x,
            y: r.y,
            mam_ni: r.mam_ni,
            nitrate: r.nitrate,
            ph: r.ph,
            gvf_id: r.gvf_id.filter(|g| !g.is_empty()),
            nbl_unit: r.nbl_unit,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GvfRow {
    id: String,
    ox_percent: Option<f64>,
    ph_median: Option<f64>,
    nbl_unit: String,
    surface_contact: String,
    xmin: Option<f64>,
    ymin: Option<f64>,
    xmax: Option<f64>,
    ymax: Option<f64>,
}

pub fn read_gvfs(path: &Path) -> Result<Vec<GroundwaterBody>, IoError> {
    let rows: Vec<GvfRow> = read_rows(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(k, r)| {
            let surface_contact = parse_flag(&r.surface_contact).ok_or_else(|| IoError::Invalid {
                path: path.to_path_buf(),
                record: k + 1,
                message: format!("surface_contact `{}` is not a boolean", r.surface_contact),
            })?;
            let zone = match (r.xmin, r.ymin, r.xmax, r.ymax) {
                (Some(xmin), Some(ymin), Some(xmax), Some(ymax)) => Some(Zone { xmin, ymin, xmax, ymax }),
                (None, None, None, None) => None,
                _ => {
                    return Err(IoError::Invalid {
                        path: path.to_path_buf(),
                        record: k + 1,
                        message: "zone needs all of xmin, ymin, xmax, ymax".into(),
                    })
                }
            };
            Ok(GroundwaterBody {
                id: r.id,
                ox_percent: r.ox_percent,
                ph_median: r.ph_median,
                nbl_unit: r.nbl_unit,
                surface_contact,
                zone,
            })
        })
        .collect()
}

/// Two-column id pairs, e.g. `screen_id, gvf_id` or `catchment_id, gvf_id`.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let mut rdr = reader(open(path)?);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if rec.len() != 2 {
            return Err(IoError::Invalid {
                path: path.to_path_buf(),
                record: k + 1,
                message: format!("expected 2 columns, found {}", rec.len()),
            });
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRow {
    catchment_id: String,
    lc_hat: f64,
    c_hat: f64,
    sd_lc: f64,
    sampled: u8,
    outflow_mass: f64,
    retained_mass: f64,
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord<f64>]) -> Result<(), IoError> {
    write_rows(
        path,
        preds.iter().map(|p| PredictionRow {
            catchment_id: p.catchment.clone(),
            lc_hat: p.lc_hat,
            c_hat: p.c_hat,
            sd_lc: p.sd_lc,
            sampled: u8::from(p.sampled),
            outflow_mass: p.outflow_mass,
            retained_mass: p.retained_mass,
        }),
    )
}

pub fn write_year_effects(path: &Path, effects: &[YearEffect<f64>]) -> Result<(), IoError> {
    write_rows(path, effects.iter())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairRow {
    catchment_id: String,
    lc_with: f64,
    lc_without: f64,
    fold: usize,
}

pub fn write_cv_pairs(path: &Path, pairs: &[CvPair<f64>]) -> Result<(), IoError> {
    write_rows(
        path,
        pairs.iter().map(|p| PairRow {
            catchment_id: p.catchment.clone(),
            lc_with: p.lc_with,
            lc_without: p.lc_without,
            fold: p.fold,
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub catchment_id: String,
    pub eps_hat: f64,
    pub eps_sd: f64,
    pub sampled: u8,
}

pub fn write_latent(path: &Path, rows: &[LatentRow]) -> Result<(), IoError> {
    write_rows(path, rows.iter())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub catchment_id: String,
    pub eps: f64,
    pub lc_true: f64,
    pub cg: Option<f64>,
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<(), IoError> {
    write_rows(path, rows.iter())
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut file = File::create(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    file.write_all(text.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags() {
        assert_eq!(parse_flag("TRUE"), Some(true));
        assert_eq!(parse_flag("0"), Some(false));
        assert_eq!(parse_flag("maybe"), None);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GvfTypicalRow {
    gvf_id: String,
    ni: Option<f64>,
    method: Method,
    n_screens: usize,
    aquifer_type: Option<String>,
}

pub fn write_gvf_typical(path: &Path, rows: &[GvfTypical]) -> Result<(), IoError> {
    write_rows(
        path,
        rows.iter().map(|g| GvfTypicalRow {
            gvf_id: g.gvf.clone(),
            ni: g.value,
            method: g.method,
            n_screens: g.n_screens,
            aquifer_type: g.aquifer_type.clone(),
        }),
    )
}

//! Groundwater nickel transfer: well-screen classification, typical
//! concentrations per groundwater body (GVF), and the catchment-level
//! groundwater concentration `Cg_i` with its provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::median;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GwError {
    #[error("{entity} `{id}` is missing {field}")]
    MissingField {
        entity: &'static str,
        id: String,
        field: &'static str,
    },
    #[error("{entity} `{id}`: {field} = {value} is out of range")]
    OutOfRange {
        entity: &'static str,
        id: String,
        field: &'static str,
        value: f64,
    },
    #[error("no well-screen carries a pH value")]
    NoData,
    #[error("invalid interpolation grid: {0}")]
    InvalidGrid(String),
    #[error("duplicate {entity} id `{id}`")]
    DuplicateId { entity: &'static str, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Redox {
    Oxic,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhClass {
    Low,
    Neutral,
    High,
}

/// `(nbl_unit, redox, pH class)`, displayed as e.g. `dkmj_ks/Reduced/low pH`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AquiferType {
    pub nbl_unit: String,
    pub redox: Redox,
    pub ph: PhClass,
}

impl fmt::Display for Redox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Redox::Oxic => "Oxic",
            Redox::Reduced => "Reduced",
        })
    }
}

impl fmt::Display for PhClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhClass::Low => "low pH",
            PhClass::Neutral => "neutral pH",
            PhClass::High => "high pH",
        })
    }
}

impl fmt::Display for AquiferType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.nbl_unit, self.redox, self.ph)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellScreen {
    pub id: String,
    pub x: f64,
    pub y: f64,
    /// Mean annual mean Ni (µg/l).
    pub mam_ni: Option<f64>,
    /// mg/l.
    pub nitrate: Option<f64>,
    pub ph: Option<f64>,
    pub gvf_id: Option<String>,
    pub nbl_unit: String,
}

/// Axis-aligned zone used for zonal statistics on the pH grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundwaterBody {
    pub id: String,
    /// Volumetric oxic share (%).
    pub ox_percent: Option<f64>,
    pub ph_median: Option<f64>,
    pub nbl_unit: String,
    pub surface_contact: bool,
    pub zone: Option<Zone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Estimated,
    Modelled,
    Mix,
    #[serde(rename = "NA")]
    NA,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Estimated => "Estimated",
            Method::Modelled => "Modelled",
            Method::Mix => "Mix",
            Method::NA => "NA",
        })
    }
}

impl Method {
    /// Certainty label. Estimated values rest on direct observations and are
    /// the most certain.
    pub fn uncertainty(self) -> &'static str {
        match self {
            Method::Estimated => "High certainty",
            Method::Modelled => "Low certainty",
            Method::Mix => "Moderate certainty",
            Method::NA => "Unknown",
        }
    }
}

/// Note attached to outputs carrying [`Method::uncertainty`] labels.
pub const UNCERTAINTY_NOTE: &str = "certainty labels rank values from linked screens (Estimated) as most \
certain and aquifer-type medians (Modelled) as least certain";

pub fn ph_class(ph: f64) -> PhClass {
    if ph <= 6.0 {
        PhClass::Low
    } else if ph <= 7.0 {
        PhClass::Neutral
    } else {
        PhClass::High
    }
}

pub fn redox_from_nitrate(nitrate: f64) -> Redox {
    if nitrate <= 2.0 {
        Redox::Reduced
    } else {
        Redox::Oxic
    }
}

pub fn redox_from_ox_percent(ox_percent: f64) -> Redox {
    if ox_percent > 50.0 {
        Redox::Oxic
    } else {
        Redox::Reduced
    }
}

fn check_ph(entity: &'static str, id: &str, ph: f64) -> Result<f64, GwError> {
    if ph > 0.0 && ph < 14.0 {
        Ok(ph)
    } else {
        Err(GwError::OutOfRange {
            entity,
            id: id.to_string(),
            field: "ph",
            value: ph,
        })
    }
}

pub fn classify_screen(ws: &WellScreen) -> Result<(Redox, PhClass, AquiferType), GwError> {
    let missing = |field| GwError::MissingField {
        entity: "well-screen",
        id: ws.id.clone(),
        field,
    };
    let nitrate = ws.nitrate.ok_or_else(|| missing("nitrate"))?;
    let ph = check_ph("well-screen", &ws.id, ws.ph.ok_or_else(|| missing("ph"))?)?;
    let redox = redox_from_nitrate(nitrate);
    let class = ph_class(ph);
    Ok((
        redox,
        class,
        AquiferType {
            nbl_unit: ws.nbl_unit.clone(),
            redox,
            ph: class,
        },
    ))
}

/// GVF classification; the pH falls back to the zonal median of `ph_field`
/// over the body's zone.
pub fn classify_gvf(
    g: &GroundwaterBody,
    ph_field: Option<&PhGrid>,
) -> Result<(Redox, PhClass, AquiferType), GwError> {
    let missing = |field| GwError::MissingField {
        entity: "groundwater body",
        id: g.id.clone(),
        field,
    };
    let ox = g.ox_percent.ok_or_else(|| missing("ox_percent"))?;
    if !(0.0..=100.0).contains(&ox) {
        return Err(GwError::OutOfRange {
            entity: "groundwater body",
            id: g.id.clone(),
            field: "ox_percent",
            value: ox,
        });
    }
    let ph = match g.ph_median {
        Some(ph) => ph,
        None => match (ph_field, g.zone) {
            (Some(grid), Some(zone)) => grid.zonal_median(&zone).ok_or_else(|| missing("ph_median"))?,
            _ => return Err(missing("ph_median")),
        },
    };
    let ph = check_ph("groundwater body", &g.id, ph)?;
    let redox = redox_from_ox_percent(ox);
    let class = ph_class(ph);
    Ok((
        redox,
        class,
        AquiferType {
            nbl_unit: g.nbl_unit.clone(),
            redox,
            ph: class,
        },
    ))
}

/// Median Ni per aquifer type over every classifiable screen with Ni data.
pub fn aquifer_medians(screens: &[WellScreen]) -> BTreeMap<AquiferType, f64> {
    let mut groups: BTreeMap<AquiferType, Vec<f64>> = BTreeMap::new();
    for ws in screens {
        let Some(ni) = ws.mam_ni else { continue };
        match classify_screen(ws) {
            Ok((_, _, t)) => groups.entry(t).or_default().push(ni),
            Err(e) => log::debug!("screen skipped for aquifer medians: {e}"),
        }
    }
    groups
        .into_iter()
        .filter_map(|(t, v)| median(&v).map(|m| (t, m)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GvfTypical {
    pub gvf: String,
    pub value: Option<f64>,
    /// Estimated, Modelled or NA.
    pub method: Method,
    /// Linked screens with Ni data.
    pub n_screens: usize,
    pub aquifer_type: Option<String>,
}

/// Typical Ni of one GVF: the median of its linked screens when there are
/// more than two, otherwise the median of its aquifer type.
pub fn gvf_typical(
    gvf: &str,
    aquifer_type: Option<&AquiferType>,
    linked_ni: &[f64],
    aquifer_medians: &BTreeMap<AquiferType, f64>,
) -> GvfTypical {
    let label = aquifer_type.map(|t| t.to_string());
    if linked_ni.len() > 2 {
        if let Some(m) = median(linked_ni) {
            return GvfTypical {
                gvf: gvf.to_string(),
                value: Some(m),
                method: Method::Estimated,
                n_screens: linked_ni.len(),
                aquifer_type: label,
            };
        }
    }
    let modelled = aquifer_type.and_then(|t| aquifer_medians.get(t).copied());
    GvfTypical {
        gvf: gvf.to_string(),
        value: modelled,
        method: if modelled.is_some() {
            Method::Modelled
        } else {
            Method::NA
        },
        n_screens: linked_ni.len(),
        aquifer_type: label,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwCatchmentResult {
    pub catchment: String,
    pub cg: Option<f64>,
    pub method: Method,
    pub uncertainty: String,
}

/// Unweighted mean over the intersecting GVF values that exist.
pub fn catchment_gw(catchment: &str, intersecting: &[&GvfTypical]) -> GwCatchmentResult {
    let used: Vec<&GvfTypical> = intersecting
        .iter()
        .copied()
        .filter(|g| g.value.is_some() && g.method != Method::NA)
        .collect();
    let (cg, method) = if used.is_empty() {
        (None, Method::NA)
    } else {
        let sum: f64 = used.iter().map(|g| g.value.expect("filtered")).sum();
        let est = used.iter().all(|g| g.method == Method::Estimated);
        let modl = used.iter().all(|g| g.method == Method::Modelled);
        let method = match (est, modl) {
            (true, _) => Method::Estimated,
            (_, true) => Method::Modelled,
            _ => Method::Mix,
        };
        (Some(sum / used.len() as f64), method)
    };
    GwCatchmentResult {
        catchment: catchment.to_string(),
        cg,
        method,
        uncertainty: method.uncertainty().to_string(),
    }
}

/// Regular grid of cell centres `(x0 + (i + 0.5) res, y0 + (j + 0.5) res)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x0: f64,
    pub y0: f64,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Smallest grid aligned to multiples of `resolution` covering every
    /// screen location.
    pub fn covering(screens: &[WellScreen], resolution: f64) -> Result<Self, GwError> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(GwError::InvalidGrid("resolution must be > 0".into()));
        }
        if screens.is_empty() {
            return Err(GwError::NoData);
        }
        let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
        let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in screens {
            xmin = xmin.min(s.x);
            xmax = xmax.max(s.x);
            ymin = ymin.min(s.y);
            ymax = ymax.max(s.y);
        }
        let x0 = (xmin / resolution).floor() * resolution;
        let y0 = (ymin / resolution).floor() * resolution;
        let nx = (((xmax - x0) / resolution).floor() as usize + 1).max(1);
        let ny = (((ymax - y0) / resolution).floor() as usize + 1).max(1);
        Ok(Self {
            x0,
            y0,
            resolution,
            nx,
            ny,
        })
    }

    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x0 + (ix as f64 + 0.5) * self.resolution,
            self.y0 + (iy as f64 + 0.5) * self.resolution,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhGrid {
    pub spec: GridSpec,
    /// Row-major, `values[iy * nx + ix]`.
    pub values: Vec<f64>,
}

impl PhGrid {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.spec.nx + ix]
    }

    /// Median over cells whose centres fall inside `zone`.
    pub fn zonal_median(&self, zone: &Zone) -> Option<f64> {
        let mut inside = Vec::new();
        for iy in 0..self.spec.ny {
            for ix in 0..self.spec.nx {
                let (x, y) = self.spec.center(ix, iy);
                if x >= zone.xmin && x <= zone.xmax && y >= zone.ymin && y <= zone.ymax {
                    inside.push(self.get(ix, iy));
                }
            }
        }
        median(&inside)
    }
}

/// Inverse-distance-squared interpolation of screen pH at cell centres.
pub fn idw_ph(spec: GridSpec, screens: &[WellScreen]) -> Result<PhGrid, GwError> {
    if !(spec.resolution.is_finite() && spec.resolution > 0.0) || spec.nx == 0 || spec.ny == 0 {
        return Err(GwError::InvalidGrid("grid must have cells and a positive resolution".into()));
    }
    let pts: Vec<(f64, f64, f64)> = screens
        .iter()
        .filter_map(|s| s.ph.map(|ph| (s.x, s.y, ph)))
        .collect();
    if pts.is_empty() {
        return Err(GwError::NoData);
    }
    let mut values = Vec::with_capacity(spec.nx * spec.ny);
    for iy in 0..spec.ny {
        for ix in 0..spec.nx {
            let (cx, cy) = spec.center(ix, iy);
            let mut exact = None;
            let (mut num, mut den) = (0.0, 0.0);
            for &(x, y, ph) in &pts {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                if d2.sqrt() < 1e-9 {
                    exact = Some(ph);
                    break;
                }
                num += ph / d2;
                den += 1.0 / d2;
            }
            values.push(exact.unwrap_or(num / den));
        }
    }
    Ok(PhGrid { spec, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwReport {
    pub gvf: Vec<GvfTypical>,
    pub catchments: Vec<GwCatchmentResult>,
    /// Catchment count per method.
    pub method_counts: BTreeMap<Method, usize>,
    pub aquifer_medians: BTreeMap<String, f64>,
    pub note: String,
}

/// Runs the whole transfer for `catchments`. Links combine each screen's
/// own `gvf_id` with the explicit `(screen, gvf)` pairs; `intersect` holds
/// `(catchment, gvf)` pairs.
pub fn run_pipeline(
    screens: &[WellScreen],
    gvfs: &[GroundwaterBody],
    links: &[(String, String)],
    intersect: &[(String, String)],
    catchments: &[String],
    ph_field: Option<&PhGrid>,
) -> Result<GwReport, GwError> {
    let mut seen = BTreeSet::new();
    for s in screens {
        if !seen.insert(s.id.as_str()) {
            return Err(GwError::DuplicateId {
                entity: "well-screen",
                id: s.id.clone(),
            });
        }
    }
    let mut seen = BTreeSet::new();
    for g in gvfs {
        if !seen.insert(g.id.as_str()) {
            return Err(GwError::DuplicateId {
                entity: "groundwater body",
                id: g.id.clone(),
            });
        }
    }
    let medians = aquifer_medians(screens);
    let by_id: BTreeMap<&str, &WellScreen> = screens.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut linked: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in screens {
        if let Some(g) = &s.gvf_id {
            linked.entry(g.as_str()).or_default().insert(s.id.as_str());
        }
    }
    for (s, g) in links {
        if by_id.contains_key(s.as_str()) {
            linked.entry(g.as_str()).or_default().insert(s.as_str());
        } else {
            log::warn!("link names unknown well-screen `{s}`");
        }
    }

    let mut typical: BTreeMap<&str, GvfTypical> = BTreeMap::new();
    let mut sorted: Vec<&GroundwaterBody> = gvfs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for g in &sorted {
        let ni: Vec<f64> = linked
            .get(g.id.as_str())
            .map(|ids| ids.iter().filter_map(|id| by_id[id].mam_ni).collect())
            .unwrap_or_default();
        let aq = match classify_gvf(g, ph_field) {
            Ok((_, _, t)) => Some(t),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        };
        typical.insert(g.id.as_str(), gvf_typical(&g.id, aq.as_ref(), &ni, &medians));
    }

    let contact: BTreeSet<&str> = gvfs
        .iter()
        .filter(|g| g.surface_contact)
        .map(|g| g.id.as_str())
        .collect();
    let mut per_catchment: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (c, g) in intersect {
        if contact.contains(g.as_str()) {
            per_catchment.entry(c.as_str()).or_default().insert(g.as_str());
        }
    }
    let mut ids: Vec<&String> = catchments.iter().collect();
    ids.sort();
    ids.dedup();
    let mut results = Vec::with_capacity(ids.len());
    let mut method_counts = BTreeMap::new();
    for c in ids {
        let inter: Vec<&GvfTypical> = per_catchment
            .get(c.as_str())
            .map(|gs| gs.iter().map(|g| &typical[g]).collect())
            .unwrap_or_default();
        let r = catchment_gw(c, &inter);
        *method_counts.entry(r.method).or_insert(0) += 1;
        results.push(r);
    }
    Ok(GwReport {
        gvf: typical.into_values().collect(),
        catchments: results,
        method_counts,
        aquifer_medians: medians.into_iter().map(|(t, m)| (t.to_string(), m)).collect(),
        note: UNCERTAINTY_NOTE.to_string(),
    })
}

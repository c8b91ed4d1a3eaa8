//! Simulated sensors: raw events become perceived-variable commits.
//!
//! Continuous readings are discretized into the target variable's domain,
//! gaze readings go through [`estimate_gaze_target`], and categorical
//! readings are committed as-is after a domain check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ModelStore, SlotKey, Source, StoreError, VariableKind};

/// Label returned when no object is within the angular threshold.
pub const ELSEWHERE: &str = "elsewhere";
pub const DEFAULT_GAZE_THRESHOLD_DEG: f64 = 10.0;

const UNIT_TOLERANCE: f64 = 1e-9;
/// Angles closer than this count as ties.
const TIE_EPSILON_RAD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("bins are empty")]
    EmptyBins,
    #[error("bin upper bounds must strictly increase and end at +inf")]
    NonMonotonicBins,
    #[error("cannot discretize NaN")]
    NotANumber,
    #[error("invalid gaze scene: {0}")]
    InvalidScene(String),
    #[error("payload {field}={value} is not in the domain of {slot}")]
    PayloadOutOfDomain {
        slot: SlotKey,
        field: String,
        value: String,
    },
    #[error("payload field {field} of sensor {sensor} has the wrong type")]
    PayloadType { sensor: String, field: String },
    #[error("invalid binding for {slot}: {reason}")]
    InvalidBinding { slot: SlotKey, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = PerceptionError> = std::result::Result<T, E>;

/// A payload value: number or token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Token(String),
}

impl std::fmt::Display for Scalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scalar::Number(x) => write!(f, "{x}"),
            Scalar::Token(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub timestamp: u64,
    pub sensor: String,
    #[serde(default)]
    pub payload: BTreeMap<String, Scalar>,
}

/// `(upper_bound, label)`; the bound is inclusive. In documents the last
/// bound is written `null` for +inf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(Option<f64>, String)", into = "(Option<f64>, String)")]
pub struct Bin {
    pub upper: f64,
    pub label: String,
}

impl Bin {
    pub fn new(upper: f64, label: impl Into<String>) -> Self {
        Self {
            upper,
            label: label.into(),
        }
    }
}

impl From<(Option<f64>, String)> for Bin {
    fn from((upper, label): (Option<f64>, String)) -> Self {
        Self {
            upper: upper.unwrap_or(f64::INFINITY),
            label,
        }
    }
}

impl From<Bin> for (Option<f64>, String) {
    fn from(b: Bin) -> Self {
        (Some(b.upper).filter(|u| u.is_finite()), b.label)
    }
}

fn check_bins(bins: &[Bin]) -> Result<()> {
    let last = bins.last().ok_or(PerceptionError::EmptyBins)?;
    let increasing = bins.windows(2).all(|w| w[0].upper < w[1].upper);
    if !increasing || last.upper != f64::INFINITY || bins.iter().any(|b| b.upper.is_nan()) {
        return Err(PerceptionError::NonMonotonicBins);
    }
    Ok(())
}

/// Label of the first bin with `x <= upper`.
pub fn discretize(x: f64, bins: &[Bin]) -> Result<&str> {
    check_bins(bins)?;
    if x.is_nan() {
        return Err(PerceptionError::NotANumber);
    }
    let b = bins.iter().find(|b| x <= b.upper).expect("last bin is +inf");
    Ok(&b.label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    /// Metres, in the observer's head frame.
    pub position: [f64; 3],
    /// Metres.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeScene {
    pub gaze_direction: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub threshold_deg: f64,
}

fn norm(v: &[f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angle in radians between a unit gaze and the direction to `target`.
fn angle_to(gaze: &[f64; 3], target: &[f64; 3]) -> f64 {
    (dot(gaze, target) / norm(target)).clamp(-1.0, 1.0).acos()
}

impl GazeScene {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PerceptionError::InvalidScene(m.to_string()));
        if (norm(&self.gaze_direction) - 1.0).abs() > UNIT_TOLERANCE {
            return bad("gaze direction must be a unit vector");
        }
        if !(self.threshold_deg.is_finite() && self.threshold_deg >= 0.0) {
            return bad("threshold must be a non-negative angle");
        }
        let mut labels = BTreeSet::new();
        for o in &self.objects {
            if o.radius.is_nan() || o.radius <= 0.0 {
                return bad("object radius must be positive");
            }
            if norm(&o.position) == 0.0 || o.position.iter().any(|x| !x.is_finite()) {
                return bad("object position must be finite and away from the eye");
            }
            if !labels.insert(o.label.as_str()) {
                return bad("object labels must be unique");
            }
        }
        Ok(())
    }
}

/// The object whose centre is angularly closest to the gaze ray, if within
/// the threshold; ties go to the lexicographically smallest label.
pub fn estimate_gaze_target(scene: &GazeScene) -> Result<String> {
    scene.validate()?;
    let threshold = scene.threshold_deg.to_radians();
    let mut best: Option<(f64, &str)> = None;
    for o in &scene.objects {
        let a = angle_to(&scene.gaze_direction, &o.position);
        if a > threshold {
            continue;
        }
        best = match best {
            Some((ba, bl)) if a > ba + TIE_EPSILON_RAD => Some((ba, bl)),
            Some((ba, bl)) if (a - ba).abs() <= TIE_EPSILON_RAD && bl < o.label.as_str() => Some((ba, bl)),
            _ => Some((a, o.label.as_str())),
        };
    }
    Ok(best.map_or_else(|| ELSEWHERE.to_string(), |(_, l)| l.to_string()))
}

/// Unit gaze vector from yaw (about +z, from +x) and pitch (towards +z).
pub fn gaze_from_angles(yaw_deg: f64, pitch_deg: f64) -> [f64; 3] {
    let (y, p) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    [p.cos() * y.cos(), p.cos() * y.sin(), p.sin()]
}

/// Static part of a gaze scene; the direction comes from each event's
/// `yaw_deg`/`pitch_deg` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeConfig {
    pub objects: Vec<SceneObject>,
    #[serde(default = "default_threshold")]
    pub threshold_deg: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_GAZE_THRESHOLD_DEG
}

/// How a sensor's payload becomes a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Payload token must be a domain label.
    Categorical { field: String },
    /// Numeric payload field through bins.
    Bins { field: String, bins: Vec<Bin> },
    /// `yaw_deg` / `pitch_deg` fields through the gaze estimator.
    Gaze(GazeConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorBinding {
    pub sensor: String,
    pub target: SlotKey,
    pub transform: Transform,
}

/// One commit produced by [`Perception::ingest_event`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerceivedCommit {
    pub slot: SlotKey,
    pub value: String,
    pub changed: bool,
}

/// Routes raw events through sensor bindings.
#[derive(Debug, Clone, Default)]
pub struct Perception {
    bindings: BTreeMap<String, Vec<SensorBinding>>,
    unbound: u64,
}

impl Perception {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a binding after checking it against the declared variables.
    pub fn bind(&mut self, binding: SensorBinding, store: &ModelStore) -> Result<()> {
        let spec = store.spec(&binding.target)?;
        let invalid = |reason: &str| PerceptionError::InvalidBinding {
            slot: binding.target.clone(),
            reason: reason.to_string(),
        };
        if spec.kind != VariableKind::Perceived {
            return Err(invalid("sensors may only feed perceived variables"));
        }
        match &binding.transform {
            Transform::Categorical { .. } => {}
            Transform::Bins { bins, .. } => {
                check_bins(bins)?;
                if let Some(b) = bins.iter().find(|b| spec.label_index(&b.label).is_none()) {
                    return Err(invalid(&format!("bin label {:?} not in domain", b.label)));
                }
            }
            Transform::Gaze(cfg) => {
                GazeScene {
                    gaze_direction: [1.0, 0.0, 0.0],
                    objects: cfg.objects.clone(),
                    threshold_deg: cfg.threshold_deg,
                }
                .validate()?;
                let labels = cfg.objects.iter().map(|o| o.label.as_str());
                if let Some(l) = labels.chain([ELSEWHERE]).find(|l| spec.label_index(l).is_none()) {
                    return Err(invalid(&format!("gaze label {l:?} not in domain")));
                }
            }
        }
        self.bindings.entry(binding.sensor.clone()).or_default().push(binding);
        Ok(())
    }

    pub fn bindings(&self) -> impl Iterator<Item = &SensorBinding> {
        self.bindings.values().flatten()
    }

    /// Events seen for sensors without bindings.
    pub fn unbound_count(&self) -> u64 {
        self.unbound
    }

    fn convert(&self, event: &RawEvent, b: &SensorBinding, store: &ModelStore) -> Result<Option<String>> {
        let wrong_type = |field: &str| PerceptionError::PayloadType {
            sensor: event.sensor.clone(),
            field: field.to_string(),
        };
        let number = |field: &str| match event.payload.get(field) {
            None => Ok(None),
            Some(Scalar::Number(x)) => Ok(Some(*x)),
            Some(Scalar::Token(_)) => Err(wrong_type(field)),
        };
        let label = match &b.transform {
            Transform::Categorical { field } => match event.payload.get(field) {
                None => return Ok(None),
                Some(Scalar::Token(t)) => {
                    if store.spec(&b.target)?.label_index(t).is_none() {
                        return Err(PerceptionError::PayloadOutOfDomain {
                            slot: b.target.clone(),
                            field: field.clone(),
                            value: t.clone(),
                        });
                    }
                    t.clone()
                }
                Some(Scalar::Number(_)) => return Err(wrong_type(field)),
            },
            Transform::Bins { field, bins } => match number(field)? {
                None => return Ok(None),
                Some(x) => discretize(x, bins)?.to_string(),
            },
            Transform::Gaze(cfg) => {
                let (Some(yaw), Some(pitch)) = (number("yaw_deg")?, number("pitch_deg")?) else {
                    return Ok(None);
                };
                estimate_gaze_target(&GazeScene {
                    gaze_direction: gaze_from_angles(yaw, pitch),
                    objects: cfg.objects.clone(),
                    threshold_deg: cfg.threshold_deg,
                })?
            }
        };
        Ok(Some(label))
    }

    /// Validates every bound field first, then commits them in binding
    /// order with `source = perception`. Fields absent from the payload are
    /// skipped.
    pub fn ingest_event(&mut self, event: &RawEvent, store: &mut ModelStore) -> Result<Vec<PerceivedCommit>> {
        let Some(bindings) = self.bindings.get(&event.sensor) else {
            self.unbound += 1;
            log::debug!("ignoring event from unbound sensor {:?}", event.sensor);
            return Ok(Vec::new());
        };
        let mut pending = Vec::new();
        for b in bindings {
            if let Some(label) = self.convert(event, b, store)? {
                pending.push((b.target.clone(), label));
            }
        }
        let mut out = Vec::with_capacity(pending.len());
        for (slot, value) in pending {
            let res = store.commit_value(&slot, &value, event.timestamp, Source::Perception)?;
            out.push(PerceivedCommit {
                slot,
                value,
                changed: res.changed,
            });
        }
        Ok(out)
    }
}

//! Clinical event records and their CSV interchange format.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("row {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The six clinical event classes a record can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventType {
    #[serde(rename = "DIAG")]
    Diag,
    #[serde(rename = "MED")]
    Med,
    #[serde(rename = "LAB")]
    Lab,
    #[serde(rename = "PROC")]
    Proc,
    #[serde(rename = "VITAL")]
    Vital,
    #[serde(rename = "ENC")]
    Enc,
}

impl EventType {
    pub const ALL: [EventType; 6] = [
        EventType::Diag,
        EventType::Med,
        EventType::Lab,
        EventType::Proc,
        EventType::Vital,
        EventType::Enc,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            EventType::Diag => "EVT_DIAG",
            EventType::Med => "EVT_MED",
            EventType::Lab => "EVT_LAB",
            EventType::Proc => "EVT_PROC",
            EventType::Vital => "EVT_VITAL",
            EventType::Enc => "EVT_ENC",
        }
    }

    pub fn parse(s: &str) -> Option<EventType> {
        match s.trim().to_ascii_uppercase().as_str() {
            "DIAG" => Some(EventType::Diag),
            "MED" => Some(EventType::Med),
            "LAB" => Some(EventType::Lab),
            "PROC" => Some(EventType::Proc),
            "VITAL" => Some(EventType::Vital),
            "ENC" => Some(EventType::Enc),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        &self.token()[4..]
    }
}

/// One timestamped clinical event for one patient. `value` is present iff the
/// event carries a measurement; `unit` only accompanies a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalEvent {
    pub patient_id: String,
    pub timestamp: NaiveDate,
    pub event_type: EventType,
    /// Raw clinical code; empty for uncoded events such as plain encounters.
    pub code: String,
    pub value: Option<f64>,
    pub unit: Option<String>,
    /// Care setting (OUTPATIENT, EMERGENCY, ICU, ...); empty means unknown.
    pub context: String,
}

/// Gender as recorded in the demographics file. Readers accept `SEX_*`
/// aliases; anything unrecognized is kept as Unknown and tokenizes to [UNK].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn token(&self) -> &'static str {
        match self {
            Gender::Male => "GENDER_MALE",
            Gender::Female => "GENDER_FEMALE",
            Gender::Unknown => "GENDER_UNKNOWN",
        }
    }

    pub fn parse(s: &str) -> Gender {
        match s.trim().to_ascii_uppercase().as_str() {
            "M" | "MALE" | "GENDER_MALE" | "SEX_MALE" => Gender::Male,
            "F" | "FEMALE" | "GENDER_FEMALE" | "SEX_FEMALE" => Gender::Female,
            _ => Gender::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDemographics {
    pub patient_id: String,
    pub gender: Gender,
    pub birth_date: NaiveDate,
}

/// The five fine-tuning outcomes, in head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "MI")]
    Mi,
    #[serde(rename = "STROKE")]
    Stroke,
    #[serde(rename = "MACE")]
    Mace,
    #[serde(rename = "CV_DEATH")]
    CvDeath,
    #[serde(rename = "ALL_DEATH")]
    AllDeath,
}

/// Canonical outcome order; survival-head index `i` serves `OUTCOMES[i]`.
pub const OUTCOMES: [Outcome; 5] =
    [Outcome::Mi, Outcome::Stroke, Outcome::Mace, Outcome::CvDeath, Outcome::AllDeath];

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Mi => "MI",
            Outcome::Stroke => "STROKE",
            Outcome::Mace => "MACE",
            Outcome::CvDeath => "CV_DEATH",
            Outcome::AllDeath => "ALL_DEATH",
        }
    }

    pub fn index(&self) -> usize {
        OUTCOMES.iter().position(|o| o == self).expect("known outcome")
    }
}

#[derive(Debug, Deserialize)]
struct RawEventRow {
    patient_id: String,
    timestamp: String,
    event_type: String,
    code: String,
    value: String,
    unit: String,
    context: String,
}

/// Read an events CSV (`patient_id, timestamp, event_type, code, value,
/// unit, context`). Rows keep file order; no sorting is applied here.
pub fn read_events_csv(path: &Path) -> Result<Vec<MedicalEvent>, EventIoError> {
    if !path.exists() {
        return Err(EventIoError::MissingFile(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    read_events(file)
}

pub fn read_events<R: Read>(reader: R) -> Result<Vec<MedicalEvent>, EventIoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut events = Vec::new();
    for (i, row) in rdr.deserialize::<RawEventRow>().enumerate() {
        let line = i as u64 + 2; // 1-based, after header
        let row = row?;
        let timestamp = NaiveDate::parse_from_str(row.timestamp.trim(), "%Y-%m-%d")
            .map_err(|e| EventIoError::MalformedRow { line, message: format!("bad date: {e}") })?;
        let event_type = EventType::parse(&row.event_type).ok_or_else(|| {
            EventIoError::MalformedRow {
                line,
                message: format!("unknown event type {:?}", row.event_type),
            }
        })?;
        let value = match row.value.trim() {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| EventIoError::MalformedRow {
                line,
                message: format!("bad value: {e}"),
            })?),
        };
        let unit = match row.unit.trim() {
            "" => None,
            s => Some(s.to_string()),
        };
        events.push(MedicalEvent {
            patient_id: row.patient_id.trim().to_string(),
            timestamp,
            event_type,
            code: row.code.trim().to_string(),
            value,
            unit,
            context: row.context.trim().to_string(),
        });
    }
    Ok(events)
}

pub fn write_events_csv(path: &Path, events: &[MedicalEvent]) -> Result<(), EventIoError> {
    let mut buf = Vec::new();
    write_events(&mut buf, events)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_events<W: Write>(writer: W, events: &[MedicalEvent]) -> Result<(), EventIoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["patient_id", "timestamp", "event_type", "code", "value", "unit", "context"])?;
    for e in events {
        wtr.write_record([
            e.patient_id.as_str(),
            &e.timestamp.format("%Y-%m-%d").to_string(),
            e.event_type.name(),
            e.code.as_str(),
            &e.value.map(|v| format!("{v:.4}")).unwrap_or_default(),
            e.unit.as_deref().unwrap_or(""),
            e.context.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a demographics CSV (`patient_id, gender, birth_date`).
pub fn read_patients_csv(
    path: &Path,
) -> Result<BTreeMap<String, PatientDemographics>, EventIoError> {
    if !path.exists() {
        return Err(EventIoError::MissingFile(path.display().to_string()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        if row.len() < 3 {
            return Err(EventIoError::MalformedRow { line, message: "expected 3 columns".into() });
        }
        let birth_date = NaiveDate::parse_from_str(row[2].trim(), "%Y-%m-%d")
            .map_err(|e| EventIoError::MalformedRow { line, message: format!("bad date: {e}") })?;
        let demo = PatientDemographics {
            patient_id: row[0].trim().to_string(),
            gender: Gender::parse(&row[1]),
            birth_date,
        };
        out.insert(demo.patient_id.clone(), demo);
    }
    Ok(out)
}

pub fn write_patients_csv(
    path: &Path,
    patients: &[PatientDemographics],
) -> Result<(), EventIoError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["patient_id", "gender", "birth_date"])?;
    for p in patients {
        let gender = match p.gender {
            Gender::Male => "MALE",
            Gender::Female => "FEMALE",
            Gender::Unknown => "UNKNOWN",
        };
        wtr.write_record([
            p.patient_id.as_str(),
            gender,
            &p.birth_date.format("%Y-%m-%d").to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

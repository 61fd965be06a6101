//! Reproducible synthetic cohorts with planted hazard signals.
//!
//! Each patient carries a set of chronic phenotypes drawn by prevalence.
//! Outcome event times come from exponential distributions whose rates are
//! `base_rate x product(matching rule multipliers) x age effect`; a rule for
//! a composite outcome (MACE, all-cause death) multiplies every primitive
//! component it contains, so the composite's first-event hazard scales by
//! exactly the rule's multiplier. Carried phenotypes surface as recurring
//! diagnosis events, which is what lets a sequence model recover the signal.

use crate::events::{EventType, Gender, MedicalEvent, Outcome, PatientDemographics};
use crate::phenomap::MappingTable;
use crate::rng;
use chrono::{Duration, NaiveDate};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

/// The four primitive outcome event kinds the generator can plant. The five
/// label outcomes derive from them (MACE and all-cause death are composites).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PlantedEvent {
    Mi,
    Stroke,
    CvDeath,
    NoncvDeath,
}

pub const PLANTED_EVENTS: [PlantedEvent; 4] =
    [PlantedEvent::Mi, PlantedEvent::Stroke, PlantedEvent::CvDeath, PlantedEvent::NoncvDeath];

impl PlantedEvent {
    pub fn phenotype(&self) -> &'static str {
        match self {
            PlantedEvent::Mi => "PHENO_MI",
            PlantedEvent::Stroke => "PHENO_STROKE",
            PlantedEvent::CvDeath => "PHENO_CV_DEATH",
            PlantedEvent::NoncvDeath => "PHENO_NONCV_DEATH",
        }
    }

    pub fn is_death(&self) -> bool {
        matches!(self, PlantedEvent::CvDeath | PlantedEvent::NoncvDeath)
    }

    /// Primitive components affected by a rule on the given outcome.
    pub fn components_of(outcome: Outcome) -> &'static [PlantedEvent] {
        match outcome {
            Outcome::Mi => &[PlantedEvent::Mi],
            Outcome::Stroke => &[PlantedEvent::Stroke],
            Outcome::CvDeath => &[PlantedEvent::CvDeath],
            Outcome::Mace => &[PlantedEvent::Mi, PlantedEvent::Stroke, PlantedEvent::CvDeath],
            Outcome::AllDeath => &[PlantedEvent::CvDeath, PlantedEvent::NoncvDeath],
        }
    }
}

/// Hazard multiplier applied to an outcome when the patient carries every
/// phenotype in `carriers`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedRule {
    pub carriers: BTreeSet<String>,
    pub outcome: Outcome,
    pub hazard_multiplier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub seed: u64,
    /// Chronic carrier phenotypes and their prevalence.
    pub phenotype_prevalences: BTreeMap<String, f64>,
    pub planted_rules: Vec<PlantedRule>,
    /// Base yearly rates keyed by planted phenotype (PHENO_MI, ...).
    pub base_rates_per_year: BTreeMap<String, f64>,
    /// log hazard ratio per year of age, centered at `age_center`.
    pub age_log_hr_per_year: f64,
    pub age_center: f64,
    pub age_range: (u32, u32),
    pub followup_years: (f64, f64),
    /// Background (non-carrier, non-outcome) events per patient.
    pub events_per_patient: (usize, usize),
    /// Extra stable conditions per patient beyond the carrier set.
    pub extra_conditions: (usize, usize),
    /// Mean gap between repeat diagnoses of a carried condition.
    pub condition_repeat_mean_days: f64,
    /// Fraction of background diagnoses carrying an unmapped code.
    pub unmapped_code_rate: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let mut prevalences = BTreeMap::new();
        prevalences.insert("PHENO_DIABETES".to_string(), 0.30);
        prevalences.insert("PHENO_HYPERTENSION".to_string(), 0.40);
        prevalences.insert("PHENO_HEART_FAILURE".to_string(), 0.12);
        prevalences.insert("PHENO_CKD".to_string(), 0.15);
        prevalences.insert("PHENO_TOBACCO_USE".to_string(), 0.25);

        let rule = |pheno: &str, outcome: Outcome, m: f64| PlantedRule {
            carriers: [pheno.to_string()].into_iter().collect(),
            outcome,
            hazard_multiplier: m,
        };
        // Diabetes and hypertension each double the MACE hazard, so dual
        // carriers sit at exactly x4 versus carriers of neither.
        let planted_rules = vec![
            rule("PHENO_DIABETES", Outcome::Mace, 2.0),
            rule("PHENO_HYPERTENSION", Outcome::Mace, 2.0),
            rule("PHENO_HEART_FAILURE", Outcome::Mace, 10.0),
            rule("PHENO_CKD", Outcome::Mace, 5.0),
            rule("PHENO_TOBACCO_USE", Outcome::Mace, 3.0),
            rule("PHENO_TOBACCO_USE", Outcome::AllDeath, 1.5),
            rule("PHENO_CKD", Outcome::AllDeath, 2.0),
        ];

        let mut base_rates = BTreeMap::new();
        base_rates.insert("PHENO_MI".to_string(), 0.005);
        base_rates.insert("PHENO_STROKE".to_string(), 0.003);
        base_rates.insert("PHENO_CV_DEATH".to_string(), 0.002);
        base_rates.insert("PHENO_NONCV_DEATH".to_string(), 0.020);

        CohortSpec {
            n_patients: 2000,
            seed: 42,
            phenotype_prevalences: prevalences,
            planted_rules,
            base_rates_per_year: base_rates,
            age_log_hr_per_year: 0.085,
            age_center: 60.0,
            age_range: (40, 85),
            followup_years: (2.0, 6.0),
            events_per_patient: (5, 12),
            extra_conditions: (0, 2),
            condition_repeat_mean_days: 400.0,
            unmapped_code_rate: 0.02,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        for (pheno, p) in &self.phenotype_prevalences {
            if !(0.0..=1.0).contains(p) {
                return Err(CohortError::InvalidSpec(format!("prevalence of {pheno} is {p}")));
            }
        }
        for rule in &self.planted_rules {
            if rule.hazard_multiplier <= 0.0 {
                return Err(CohortError::InvalidSpec(format!(
                    "hazard multiplier {} for {:?}",
                    rule.hazard_multiplier, rule.outcome
                )));
            }
        }
        for (pheno, r) in &self.base_rates_per_year {
            if *r <= 0.0 {
                return Err(CohortError::InvalidSpec(format!("base rate of {pheno} is {r}")));
            }
        }
        if self.followup_years.0 > self.followup_years.1 || self.followup_years.0 <= 0.0 {
            return Err(CohortError::InvalidSpec("followup_years range".into()));
        }
        if self.age_range.0 > self.age_range.1 {
            return Err(CohortError::InvalidSpec("age range".into()));
        }
        if self.events_per_patient.0 > self.events_per_patient.1 {
            return Err(CohortError::InvalidSpec("events_per_patient range".into()));
        }
        if !(0.0..=1.0).contains(&self.unmapped_code_rate) {
            return Err(CohortError::InvalidSpec("unmapped_code_rate".into()));
        }
        if self.condition_repeat_mean_days <= 0.0 {
            return Err(CohortError::InvalidSpec("condition_repeat_mean_days".into()));
        }
        Ok(())
    }

    /// Hazard multiplier for one primitive event given a carrier set and age.
    pub fn multiplier_for(
        &self,
        event: PlantedEvent,
        carriers: &BTreeSet<String>,
        age: f64,
    ) -> f64 {
        let mut m = (self.age_log_hr_per_year * (age - self.age_center)).exp();
        for rule in &self.planted_rules {
            if PlantedEvent::components_of(rule.outcome).contains(&event)
                && rule.carriers.iter().all(|c| carriers.contains(c))
            {
                m *= rule.hazard_multiplier;
            }
        }
        m
    }
}

/// Raw draw bookkeeping for one primitive outcome of one patient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeDraw {
    pub rate_per_year: f64,
    /// Raw exponential draw in days, before any censoring.
    pub time_days: f64,
    /// Whether the event was actually planted (within follow-up, before death).
    pub observed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub carriers: Vec<String>,
    pub age_at_start: u32,
    pub followup_days: i64,
    pub death_day: Option<i64>,
    pub outcomes: BTreeMap<String, OutcomeDraw>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub patients: Vec<PatientTruth>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub events: Vec<MedicalEvent>,
    pub patients: Vec<PatientDemographics>,
    pub truth: GroundTruth,
}

const COHORT_BASE_DATE: (i32, u32, u32) = (2012, 1, 1);
const UNMAPPED_POOL: usize = 20;

fn context_draw(r: &mut ChaCha20Rng) -> &'static str {
    let u = rng::unit_f64(r);
    if u < 0.7 {
        "OUTPATIENT"
    } else if u < 0.9 {
        "EMERGENCY"
    } else {
        "ICU"
    }
}

/// Generate the full cohort. Deterministic given the spec seed; per-patient
/// streams derive from `(seed, patient id)`, so generation may be
/// parallelized without changing output.
pub fn generate_cohort(spec: &CohortSpec, table: &MappingTable) -> Result<Cohort, CohortError> {
    spec.validate()?;
    let catalog: Vec<&String> = table.phenotype_catalog().iter().collect();
    let outcome_phenos: BTreeSet<&str> = PLANTED_EVENTS.iter().map(|e| e.phenotype()).collect();
    let extras_pool: Vec<&String> = catalog
        .iter()
        .filter(|p| {
            !outcome_phenos.contains(p.as_str())
                && !spec.phenotype_prevalences.contains_key(p.as_str())
        })
        .copied()
        .collect();
    let med_pool: Vec<&String> = ["PHENO_ANTIHYPERTENSIVE", "PHENO_STATIN", "PHENO_ANTICOAGULANT"]
        .iter()
        .filter_map(|name| catalog.iter().find(|p| p.as_str() == *name).copied())
        .collect();
    let lab_code = table
        .codes_for_phenotype("PHENO_CREATININE")
        .first()
        .map(|c| c.to_string())
        .unwrap_or_else(|| "CREA".to_string());

    let mut cohort = Cohort {
        events: Vec::new(),
        patients: Vec::with_capacity(spec.n_patients),
        truth: GroundTruth { seed: spec.seed, patients: Vec::with_capacity(spec.n_patients) },
    };
    let base = NaiveDate::from_ymd_opt(COHORT_BASE_DATE.0, COHORT_BASE_DATE.1, COHORT_BASE_DATE.2)
        .expect("valid base date");

    for i in 0..spec.n_patients {
        let pid = format!("P{i:06}");
        let mut r = rng::derive(spec.seed, "cohort.patient", &pid);

        let gender = if rng::bernoulli(&mut r, 0.5) { Gender::Male } else { Gender::Female };
        let age = rng::range_inclusive(&mut r, spec.age_range.0 as i64, spec.age_range.1 as i64)
            as u32;
        let start = base + Duration::days(rng::below(&mut r, 365) as i64);
        let birth_date = start - Duration::days((age as f64 * 365.25) as i64);
        let span_years = spec.followup_years.0
            + rng::unit_f64(&mut r) * (spec.followup_years.1 - spec.followup_years.0);
        let span_days = ((span_years * 365.0) as i64).max(2);

        let carriers: BTreeSet<String> = spec
            .phenotype_prevalences
            .iter()
            .filter(|(_, &p)| rng::bernoulli(&mut r, p))
            .map(|(name, _)| name.clone())
            .collect();

        // Outcome draws: exponential times from per-patient rates.
        let mut draws: BTreeMap<String, OutcomeDraw> = BTreeMap::new();
        for event in PLANTED_EVENTS {
            let base_rate = spec
                .base_rates_per_year
                .get(event.phenotype())
                .copied()
                .unwrap_or(0.0);
            if base_rate <= 0.0 {
                continue;
            }
            let rate_per_year = base_rate * spec.multiplier_for(event, &carriers, age as f64);
            let time_days = rng::exponential(&mut r, rate_per_year / 365.0);
            draws.insert(
                event.phenotype().to_string(),
                OutcomeDraw { rate_per_year, time_days, observed: false },
            );
        }
        let death_day: Option<i64> = [PlantedEvent::CvDeath, PlantedEvent::NoncvDeath]
            .iter()
            .filter_map(|e| draws.get(e.phenotype()))
            .map(|d| d.time_days.ceil() as i64)
            .filter(|&t| t <= span_days)
            .min();
        let end_day = death_day.unwrap_or(span_days);

        let mut events: Vec<MedicalEvent> = Vec::new();
        let emit = |events: &mut Vec<MedicalEvent>,
                        day: i64,
                        et: EventType,
                        code: String,
                        value: Option<f64>,
                        unit: Option<String>,
                        ctx: String| {
            events.push(MedicalEvent {
                patient_id: pid.clone(),
                timestamp: start + Duration::days(day),
                event_type: et,
                code,
                value,
                unit,
                context: ctx,
            });
        };

        // Enrollment encounter on day 0 and a close-out at end of follow-up.
        emit(&mut events, 0, EventType::Enc, String::new(), None, None, "OUTPATIENT".into());
        emit(&mut events, end_day, EventType::Enc, String::new(), None, None, "OUTPATIENT".into());

        // Chronic conditions: early first diagnosis, then recurring ones.
        let n_extras = rng::range_inclusive(
            &mut r,
            spec.extra_conditions.0 as i64,
            spec.extra_conditions.1 as i64,
        ) as usize;
        let mut conditions: Vec<String> = carriers.iter().cloned().collect();
        for _ in 0..n_extras {
            if extras_pool.is_empty() {
                break;
            }
            let pick = extras_pool[rng::below(&mut r, extras_pool.len() as u64) as usize];
            if !conditions.contains(pick) {
                conditions.push(pick.clone());
            }
        }
        for cond in &conditions {
            let codes = table.codes_for_phenotype(cond);
            if codes.is_empty() {
                continue;
            }
            let mut day = rng::below(&mut r, 31) as i64;
            let mut k = 0usize;
            while day <= span_days {
                emit(
                    &mut events,
                    day,
                    EventType::Diag,
                    codes[k % codes.len()].to_string(),
                    None,
                    None,
                    context_draw(&mut r).into(),
                );
                k += 1;
                day += rng::exponential(&mut r, 1.0 / spec.condition_repeat_mean_days).ceil()
                    as i64;
            }
        }

        // Background noise: encounters, labs with values, medications, and
        // occasional unmapped codes.
        let n_background = rng::range_inclusive(
            &mut r,
            spec.events_per_patient.0 as i64,
            spec.events_per_patient.1 as i64,
        ) as usize;
        for _ in 0..n_background {
            let day = rng::below(&mut r, span_days as u64 + 1) as i64;
            let ctx: String = context_draw(&mut r).into();
            let u = rng::unit_f64(&mut r);
            if u < 0.30 {
                let value = (1.0 + rng::normal(&mut r) * 0.3).max(0.2);
                emit(
                    &mut events,
                    day,
                    EventType::Lab,
                    lab_code.clone(),
                    Some((value * 100.0).round() / 100.0),
                    Some("mg/dL".into()),
                    ctx,
                );
            } else if u < 0.50 && !med_pool.is_empty() {
                let pheno = med_pool[rng::below(&mut r, med_pool.len() as u64) as usize];
                let codes = table.codes_for_phenotype(pheno);
                let code = codes[rng::below(&mut r, codes.len() as u64) as usize].to_string();
                emit(&mut events, day, EventType::Med, code, None, None, ctx);
            } else if u < 0.70 {
                emit(&mut events, day, EventType::Enc, String::new(), None, None, ctx);
            } else if rng::bernoulli(&mut r, spec.unmapped_code_rate) {
                let code = format!("XQ{:02}", rng::below(&mut r, UNMAPPED_POOL as u64));
                emit(&mut events, day, EventType::Diag, code, None, None, ctx);
            } else if !conditions.is_empty() {
                let cond =
                    &conditions[rng::below(&mut r, conditions.len() as u64) as usize];
                let codes = table.codes_for_phenotype(cond);
                if !codes.is_empty() {
                    let code = codes[rng::below(&mut r, codes.len() as u64) as usize].to_string();
                    emit(&mut events, day, EventType::Diag, code, None, None, ctx);
                }
            }
        }

        // Plant outcome events that fall inside follow-up and before death.
        for event in PLANTED_EVENTS {
            let Some(draw) = draws.get_mut(event.phenotype()) else { continue };
            let day = draw.time_days.ceil() as i64;
            if day > span_days || day > end_day {
                continue;
            }
            draw.observed = true;
            let codes = table.codes_for_phenotype(event.phenotype());
            let code = codes.first().map(|c| c.to_string()).unwrap_or_default();
            emit(
                &mut events,
                day,
                EventType::Diag,
                code,
                None,
                None,
                if event.is_death() { "ICU".into() } else { "EMERGENCY".into() },
            );
        }

        // Death truncates the record.
        events.retain(|e| e.timestamp.signed_duration_since(start).num_days() <= end_day);
        events.sort_by_key(|e| e.timestamp);

        cohort.patients.push(PatientDemographics {
            patient_id: pid.clone(),
            gender,
            birth_date,
        });
        cohort.truth.patients.push(PatientTruth {
            patient_id: pid,
            carriers: carriers.iter().cloned().collect(),
            age_at_start: age,
            followup_days: end_day,
            death_day,
            outcomes: draws,
        });
        cohort.events.extend(events);
    }
    Ok(cohort)
}

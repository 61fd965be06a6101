//! ICD-to-phenotype mapping and the token vocabulary built on top of it.
//!
//! Ids are assigned in a fixed category order so that identical inputs always
//! produce byte-identical vocabularies:
//!
//! ```text
//! [PAD] [MASK] [CLS] [SEP] [UNK]          ids 0..5
//! GENDER_MALE GENDER_FEMALE               ids 5..7
//! AGE_0..AGE_120                          ids 7..128
//! DAY_0..DAY_9999                         ids 128..10128
//! TIME_DELTA_* (7 buckets)                ids 10128..10135
//! EVT_* (6 event types)                   ids 10135..10141
//! VAL_LOW/NORMAL/HIGH/CRITICAL            ids 10141..10145
//! phenotypes (catalog order)              then contexts, units, CODE_ tokens
//! ```
//!
//! The fixed component is 10,145 ids; everything after it depends on the
//! mapping catalog and the corpus scan.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];
pub const GENDER_TOKENS: [&str; 2] = ["GENDER_MALE", "GENDER_FEMALE"];
pub const MAX_AGE: u32 = 120;
pub const MAX_DAY: u32 = 9999;
pub const TIME_DELTA_TOKENS: [&str; 7] = [
    "TIME_DELTA_SAME_DAY",
    "TIME_DELTA_1_7",
    "TIME_DELTA_8_30",
    "TIME_DELTA_31_90",
    "TIME_DELTA_91_180",
    "TIME_DELTA_181_365",
    "TIME_DELTA_GT_365",
];
pub const VALUE_TOKENS: [&str; 4] = ["VAL_LOW", "VAL_NORMAL", "VAL_HIGH", "VAL_CRITICAL"];

/// Ids 0..FIXED_COMPONENT_SIZE are independent of mapping and corpus except
/// for the phenotype block that follows them.
pub const FIXED_COMPONENT_SIZE: usize =
    SPECIAL_TOKENS.len() + GENDER_TOKENS.len() + (MAX_AGE as usize + 1) + (MAX_DAY as usize + 1)
        + TIME_DELTA_TOKENS.len()
        + 6
        + VALUE_TOKENS.len();

#[derive(Debug, Error)]
pub enum PhenomapError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("row {0}: malformed mapping line")]
    MalformedRow(u64),
    #[error("conflicting mapping for code {0}")]
    ConflictingMapping(String),
    #[error("duplicate token {0}")]
    DuplicateToken(String),
    #[error("token id {0} out of range")]
    IdOutOfRange(u32),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file invalid: {0}")]
    InvalidVocabFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeSystem {
    #[serde(rename = "ICD9")]
    Icd9,
    #[serde(rename = "ICD10")]
    Icd10,
}

impl CodeSystem {
    pub fn parse(s: &str) -> Option<CodeSystem> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ICD9" | "ICD-9" => Some(CodeSystem::Icd9),
            "ICD10" | "ICD-10" => Some(CodeSystem::Icd10),
            _ => None,
        }
    }
}

/// Uppercase, trim whitespace, keep dots. Idempotent.
pub fn normalize_code(raw: &str) -> String {
    raw.trim().to_ascii_uppercase()
}

/// Context strings become `CTX_<NORMALIZED>`; empty contexts read as UNKNOWN.
pub fn normalize_context(raw: &str) -> String {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return "UNKNOWN".to_string();
    }
    trimmed
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

/// Unit strings keep their case ("mg/dL" -> "mg_dL") but drop separators.
pub fn normalize_unit(raw: &str) -> String {
    raw.trim().chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// A normalized diagnosis/procedure code plus its coding system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcdCode {
    pub system: CodeSystem,
    pub code: String,
}

impl IcdCode {
    pub fn new(system: CodeSystem, raw: &str) -> Result<IcdCode, PhenomapError> {
        let code = normalize_code(raw);
        if code.is_empty() {
            return Err(PhenomapError::MalformedRow(0));
        }
        Ok(IcdCode { system, code })
    }
}

/// The two-stage code mapping: ICD code -> CCS category -> phenotype.
/// Lookups key on the normalized code string; the coding system is kept as
/// row metadata.
#[derive(Debug, Clone, Default)]
pub struct MappingTable {
    icd_to_ccs: BTreeMap<String, String>,
    ccs_to_pheno: BTreeMap<String, String>,
    code_systems: BTreeMap<String, CodeSystem>,
    pheno_catalog: Vec<String>,
}

impl MappingTable {
    pub fn is_empty(&self) -> bool {
        self.icd_to_ccs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.icd_to_ccs.len()
    }

    pub fn phenotype_count(&self) -> usize {
        self.pheno_catalog.len()
    }

    /// Phenotype names in first-appearance order; this order assigns ids.
    pub fn phenotype_catalog(&self) -> &[String] {
        &self.pheno_catalog
    }

    /// Exact-match lookup after normalization; `None` means unmapped and the
    /// tokenizer falls back to a raw `CODE_` token.
    pub fn map_code(&self, raw_code: &str) -> Option<&str> {
        let code = normalize_code(raw_code);
        let ccs = self.icd_to_ccs.get(&code)?;
        self.ccs_to_pheno.get(ccs).map(|s| s.as_str())
    }

    pub fn ccs_of(&self, raw_code: &str) -> Option<&str> {
        self.icd_to_ccs.get(&normalize_code(raw_code)).map(|s| s.as_str())
    }

    /// Codes mapping to the given phenotype, in deterministic order.
    pub fn codes_for_phenotype(&self, phenotype: &str) -> Vec<&str> {
        self.icd_to_ccs
            .iter()
            .filter(|(_, ccs)| self.ccs_to_pheno.get(*ccs).map(|p| p == phenotype).unwrap_or(false))
            .map(|(code, _)| code.as_str())
            .collect()
    }
}

/// Load the mapping TSV (`icd_code, icd_system, ccs_category, phenotype`,
/// tab-separated, one header line). Duplicate code rows that disagree on the
/// mapping are hard errors; silent override would corrupt the one-phenotype
/// semantics downstream.
pub fn load_mapping(path: &Path) -> Result<MappingTable, PhenomapError> {
    if !path.exists() {
        return Err(PhenomapError::MissingFile(path.display().to_string()));
    }
    let content = std::fs::read_to_string(path)?;
    parse_mapping(&content)
}

pub fn parse_mapping(content: &str) -> Result<MappingTable, PhenomapError> {
    let mut table = MappingTable::default();
    let mut pheno_seen: BTreeSet<String> = BTreeSet::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i as u64 + 1;
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(PhenomapError::MalformedRow(line_no));
        }
        let system =
            CodeSystem::parse(fields[1]).ok_or(PhenomapError::MalformedRow(line_no))?;
        let code = normalize_code(fields[0]);
        let ccs = fields[2].trim().to_string();
        let pheno = fields[3].trim().to_string();
        if code.is_empty() || ccs.is_empty() || pheno.is_empty() {
            return Err(PhenomapError::MalformedRow(line_no));
        }
        if let Some(existing_ccs) = table.icd_to_ccs.get(&code) {
            let existing_pheno = table.ccs_to_pheno.get(existing_ccs);
            if existing_ccs != &ccs || existing_pheno != Some(&pheno) {
                return Err(PhenomapError::ConflictingMapping(code));
            }
            continue;
        }
        if let Some(existing) = table.ccs_to_pheno.get(&ccs) {
            if existing != &pheno {
                return Err(PhenomapError::ConflictingMapping(code));
            }
        } else {
            table.ccs_to_pheno.insert(ccs.clone(), pheno.clone());
        }
        table.icd_to_ccs.insert(code.clone(), ccs);
        table.code_systems.insert(code, system);
        if pheno_seen.insert(pheno.clone()) {
            table.pheno_catalog.push(pheno);
        }
    }
    Ok(table)
}

/// Data-dependent token material collected from a corpus pass: the context,
/// unit, and unmapped-code strings actually observed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusScan {
    pub contexts: BTreeSet<String>,
    pub units: BTreeSet<String>,
    pub unmapped_codes: BTreeSet<String>,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    Special,
    Gender,
    Age,
    Day,
    TimeDelta,
    EventType,
    Value,
    Phenotype,
    Context,
    Unit,
    Code,
}

/// The bidirectional token map. Immutable once built; share freely.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    ranges: BTreeMap<TokenCategory, (u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    category_ranges: BTreeMap<TokenCategory, (u32, u32)>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token -> id; unknown strings resolve to `[UNK]`.
    pub fn id_for(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Id of a token that must exist (panics otherwise); for fixed-inventory
    /// tokens whose presence the builder guarantees.
    pub fn id_of(&self, token: &str) -> u32 {
        *self.token_to_id.get(token).unwrap_or_else(|| panic!("token {token} not in vocabulary"))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token_for(&self, id: u32) -> Result<&str, PhenomapError> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(PhenomapError::IdOutOfRange(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn category_ranges(&self) -> &BTreeMap<TokenCategory, (u32, u32)> {
        &self.ranges
    }

    pub fn range(&self, cat: TokenCategory) -> (u32, u32) {
        self.ranges[&cat]
    }

    pub fn category_of(&self, id: u32) -> Option<TokenCategory> {
        self.ranges
            .iter()
            .find(|(_, &(start, end))| id >= start && id < end)
            .map(|(&cat, _)| cat)
    }

    pub fn day_token_id(&self, day: u32) -> u32 {
        let d = day.min(MAX_DAY);
        self.range(TokenCategory::Day).0 + d
    }

    pub fn age_token_id(&self, age: u32) -> u32 {
        let a = age.min(MAX_AGE);
        self.range(TokenCategory::Age).0 + a
    }

    /// Serialize deterministically; the token array order defines ids.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let file =
            VocabFile { tokens: self.tokens.clone(), category_ranges: self.ranges.clone() };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("vocab serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<(), PhenomapError> {
        std::fs::write(path, self.to_json_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, PhenomapError> {
        if !path.exists() {
            return Err(PhenomapError::MissingFile(path.display().to_string()));
        }
        let bytes = std::fs::read(path)?;
        let file: VocabFile = serde_json::from_slice(&bytes)
            .map_err(|e| PhenomapError::InvalidVocabFile(e.to_string()))?;
        let mut token_to_id = HashMap::with_capacity(file.tokens.len());
        for (i, t) in file.tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(PhenomapError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocabulary { tokens: file.tokens, token_to_id, ranges: file.category_ranges })
    }
}

/// Assemble the full vocabulary: fixed inventories, then phenotypes in
/// catalog order, then observed contexts, units, and unmapped codes (each
/// sorted). Deterministic given the same inputs.
pub fn build_vocabulary(
    table: &MappingTable,
    observed: &CorpusScan,
) -> Result<Vocabulary, PhenomapError> {
    let mut tokens: Vec<String> = Vec::with_capacity(FIXED_COMPONENT_SIZE + table.phenotype_count());
    let mut token_to_id: HashMap<String, u32> = HashMap::new();
    let mut ranges: BTreeMap<TokenCategory, (u32, u32)> = BTreeMap::new();

    let push = |tokens: &mut Vec<String>,
                    token_to_id: &mut HashMap<String, u32>,
                    token: String|
     -> Result<(), PhenomapError> {
        let id = tokens.len() as u32;
        if token_to_id.insert(token.clone(), id).is_some() {
            return Err(PhenomapError::DuplicateToken(token));
        }
        tokens.push(token);
        Ok(())
    };

    let mut start = 0u32;
    let mut close =
        |ranges: &mut BTreeMap<TokenCategory, (u32, u32)>, cat: TokenCategory, len: usize| {
            let end = len as u32;
            ranges.insert(cat, (start, end));
            start = end;
        };

    for t in SPECIAL_TOKENS {
        push(&mut tokens, &mut token_to_id, t.to_string())?;
    }
    close(&mut ranges, TokenCategory::Special, tokens.len());

    for t in GENDER_TOKENS {
        push(&mut tokens, &mut token_to_id, t.to_string())?;
    }
    close(&mut ranges, TokenCategory::Gender, tokens.len());

    for age in 0..=MAX_AGE {
        push(&mut tokens, &mut token_to_id, format!("AGE_{age}"))?;
    }
    close(&mut ranges, TokenCategory::Age, tokens.len());

    for day in 0..=MAX_DAY {
        push(&mut tokens, &mut token_to_id, format!("DAY_{day}"))?;
    }
    close(&mut ranges, TokenCategory::Day, tokens.len());

    for t in TIME_DELTA_TOKENS {
        push(&mut tokens, &mut token_to_id, t.to_string())?;
    }
    close(&mut ranges, TokenCategory::TimeDelta, tokens.len());

    for et in crate::events::EventType::ALL {
        push(&mut tokens, &mut token_to_id, et.token().to_string())?;
    }
    close(&mut ranges, TokenCategory::EventType, tokens.len());

    for t in VALUE_TOKENS {
        push(&mut tokens, &mut token_to_id, t.to_string())?;
    }
    close(&mut ranges, TokenCategory::Value, tokens.len());
    debug_assert_eq!(tokens.len(), FIXED_COMPONENT_SIZE);

    for pheno in table.phenotype_catalog() {
        push(&mut tokens, &mut token_to_id, pheno.clone())?;
    }
    close(&mut ranges, TokenCategory::Phenotype, tokens.len());

    for ctx in &observed.contexts {
        push(&mut tokens, &mut token_to_id, format!("CTX_{}", normalize_context(ctx)))?;
    }
    close(&mut ranges, TokenCategory::Context, tokens.len());

    for unit in &observed.units {
        push(&mut tokens, &mut token_to_id, format!("UNIT_{}", normalize_unit(unit)))?;
    }
    close(&mut ranges, TokenCategory::Unit, tokens.len());

    // A mapped code never doubles as a CODE_ token; the phenotype path wins.
    for code in &observed.unmapped_codes {
        let norm = normalize_code(code);
        if table.map_code(&norm).is_some() {
            continue;
        }
        push(&mut tokens, &mut token_to_id, format!("CODE_{norm}"))?;
    }
    close(&mut ranges, TokenCategory::Code, tokens.len());

    Ok(Vocabulary { tokens, token_to_id, ranges })
}

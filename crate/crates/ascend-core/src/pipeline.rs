//! File-level pipeline commands: each function reads its inputs, runs one
//! stage, and writes outputs atomically (staging file + rename) together
//! with the effective config for exact replay.

use crate::config::{RunConfig, Split};
use crate::events::{
    self, MedicalEvent, PatientDemographics,
};
use crate::finetune::{self, FitSample};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, ModelParams};
use crate::phenomap::{self, MappingTable, Vocabulary};
use crate::pretrain::{self, MetricsRow};
use crate::rng;
use crate::seqbuild::{
    self, IndexRecord, ReferenceRanges, SequenceRecord, TokenSequence,
};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Phenomap(#[from] phenomap::PhenomapError),
    #[error(transparent)]
    Events(#[from] events::EventIoError),
    #[error(transparent)]
    SeqBuild(#[from] seqbuild::SeqBuildError),
    #[error(transparent)]
    Cohort(#[from] crate::synthcohort::CohortError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Pretrain(#[from] pretrain::PretrainError),
    #[error(transparent)]
    Finetune(#[from] finetune::FinetuneError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// Numeric failures (non-finite losses or gradients) get their own exit
    /// code at the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            PipelineError::Pretrain(
                pretrain::PretrainError::NonFiniteGradient { .. }
                    | pretrain::PretrainError::NonFiniteLoss { .. }
            ) | PipelineError::Finetune(finetune::FinetuneError::Train(
                pretrain::PretrainError::NonFiniteGradient { .. }
                    | pretrain::PretrainError::NonFiniteLoss { .. }
            ))
        )
    }
}

/// Write bytes through a staging file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let staging = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&staging)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&staging, path)?;
    Ok(())
}

/// Log the effective configuration next to a command's outputs.
pub fn write_effective_config(config: &RunConfig, dir: &Path, command: &str) -> Result<PathBuf, PipelineError> {
    let path = dir.join(format!("{command}.config.json"));
    write_atomic(&path, &config.to_pretty_json())?;
    Ok(path)
}

fn out_dir_of(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Generate the synthetic cohort and write events, demographics, and the
/// ground-truth file.
pub fn gen_cohort(config: &RunConfig) -> Result<(), PipelineError> {
    let seed = config.require_seed()?;
    let table = phenomap::load_mapping(&config.paths.mapping)?;
    let spec = crate::synthcohort::CohortSpec { seed, ..config.cohort.clone() };
    let cohort = crate::synthcohort::generate_cohort(&spec, &table)?;

    let mut events_bytes = Vec::new();
    events::write_events(&mut events_bytes, &cohort.events)?;
    write_atomic(&config.paths.events, &events_bytes)?;

    let mut patients_bytes = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut patients_bytes);
        wtr.write_record(["patient_id", "gender", "birth_date"]).map_err(events::EventIoError::from)?;
        for p in &cohort.patients {
            let gender = match p.gender {
                events::Gender::Male => "MALE",
                events::Gender::Female => "FEMALE",
                events::Gender::Unknown => "UNKNOWN",
            };
            wtr.write_record([
                p.patient_id.as_str(),
                gender,
                &p.birth_date.format("%Y-%m-%d").to_string(),
            ])
            .map_err(events::EventIoError::from)?;
        }
        wtr.flush()?;
    }
    write_atomic(&config.paths.patients, &patients_bytes)?;

    let mut truth_bytes = serde_json::to_vec_pretty(&cohort.truth).expect("truth serializes");
    truth_bytes.push(b'\n');
    write_atomic(&config.paths.ground_truth, &truth_bytes)?;

    write_effective_config(config, &out_dir_of(&config.paths.events), "gen-cohort")?;
    Ok(())
}

/// Build the vocabulary from the mapping file and a corpus scan.
pub fn build_vocab(config: &RunConfig) -> Result<Vocabulary, PipelineError> {
    let table = phenomap::load_mapping(&config.paths.mapping)?;
    if let Some(expected) = config.expected_phenotypes {
        if table.phenotype_count() != expected {
            return Err(PipelineError::Data(format!(
                "mapping defines {} phenotypes, config expects {expected}",
                table.phenotype_count()
            )));
        }
    }
    let events = events::read_events_csv(&config.paths.events)?;
    let scan = seqbuild::scan_corpus(&events, &table);
    let vocab = phenomap::build_vocabulary(&table, &scan)?;
    write_atomic(&config.paths.vocab, &vocab.to_json_bytes())?;
    write_effective_config(config, &out_dir_of(&config.paths.vocab), "build-vocab")?;
    Ok(vocab)
}

/// Group events by patient in first-appearance order.
pub fn group_by_patient(events: Vec<MedicalEvent>) -> Vec<(String, Vec<MedicalEvent>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<MedicalEvent>> = BTreeMap::new();
    for e in events {
        if !map.contains_key(&e.patient_id) {
            order.push(e.patient_id.clone());
        }
        map.entry(e.patient_id.clone()).or_default().push(e);
    }
    order
        .into_iter()
        .map(|pid| {
            let evs = map.remove(&pid).expect("grouped");
            (pid, evs)
        })
        .collect()
}

fn load_tokenization_inputs(
    config: &RunConfig,
) -> Result<
    (
        MappingTable,
        Vocabulary,
        ReferenceRanges,
        Vec<(String, Vec<MedicalEvent>)>,
        BTreeMap<String, PatientDemographics>,
    ),
    PipelineError,
> {
    let table = phenomap::load_mapping(&config.paths.mapping)?;
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    let events = events::read_events_csv(&config.paths.events)?;
    let patients = events::read_patients_csv(&config.paths.patients)?;
    let mut ranges = ReferenceRanges::new(config.lab_ranges.clone());
    ranges.fit_quantiles(&events, 20);
    let grouped = group_by_patient(events);
    Ok((table, vocab, ranges, grouped, patients))
}

/// Tokenize every patient's full history in parallel; output order follows
/// the events file, so the result is identical for any worker count.
pub fn tokenize_patients(
    grouped: &[(String, Vec<MedicalEvent>)],
    patients: &BTreeMap<String, PatientDemographics>,
    table: &MappingTable,
    vocab: &Vocabulary,
    ranges: &ReferenceRanges,
    config: &seqbuild::SeqConfig,
) -> Result<Vec<TokenSequence>, PipelineError> {
    grouped
        .par_iter()
        .map(|(pid, evs)| {
            let demo = patients
                .get(pid)
                .ok_or_else(|| PipelineError::Data(format!("no demographics for {pid}")))?;
            seqbuild::build_sequence(evs, demo, table, vocab, ranges, config)
                .map_err(PipelineError::from)
        })
        .collect()
}

/// Tokenize command: full-history sequences for pretraining.
pub fn tokenize(config: &RunConfig) -> Result<usize, PipelineError> {
    let (table, vocab, ranges, grouped, patients) = load_tokenization_inputs(config)?;
    let seqs =
        tokenize_patients(&grouped, &patients, &table, &vocab, &ranges, &config.sequence)?;
    let records: Vec<SequenceRecord> = seqs.iter().map(SequenceRecord::from).collect();
    let mut bytes = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut bytes, r).expect("record serializes");
        bytes.push(b'\n');
    }
    write_atomic(&config.paths.sequences, &bytes)?;
    write_effective_config(config, &out_dir_of(&config.paths.sequences), "tokenize")?;
    Ok(records.len())
}

/// Sample index dates, tokenize each lookback window, attach labels.
pub fn sample_indices(config: &RunConfig) -> Result<usize, PipelineError> {
    let seed = config.require_seed()?;
    let (table, vocab, ranges, grouped, patients) = load_tokenization_inputs(config)?;
    let defs = config.outcome_defs()?;
    let records: Vec<Vec<IndexRecord>> = grouped
        .par_iter()
        .map(|(pid, evs)| -> Result<Vec<IndexRecord>, PipelineError> {
            let demo = patients
                .get(pid)
                .ok_or_else(|| PipelineError::Data(format!("no demographics for {pid}")))?;
            let mut patient_rng = rng::derive(seed, "sample.index", pid);
            let samples =
                seqbuild::sample_index_dates(evs, &mut patient_rng, &table, &defs, &config.sequence);
            let mut out = Vec::with_capacity(samples.len());
            for sample in &samples {
                let seq = seqbuild::extract_window(
                    sample,
                    demo,
                    &table,
                    &vocab,
                    &ranges,
                    &config.sequence,
                )?;
                out.push(IndexRecord::new(sample, &seq));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let flat: Vec<IndexRecord> = records.into_iter().flatten().collect();
    let mut bytes = Vec::new();
    for r in &flat {
        serde_json::to_writer(&mut bytes, r).expect("record serializes");
        bytes.push(b'\n');
    }
    write_atomic(&config.paths.indices, &bytes)?;
    write_effective_config(config, &out_dir_of(&config.paths.indices), "sample-indices")?;
    Ok(flat.len())
}

fn metrics_csv(rows: &[MetricsRow]) -> Vec<u8> {
    let mut out = String::from("step,lr,train_loss,val_loss,top1,top5\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.8},{:.6},{},{},{}\n",
            r.step,
            r.lr,
            r.train_loss,
            opt(r.val_loss),
            opt(r.top1),
            opt(r.top5)
        ));
    }
    out.into_bytes()
}

/// Split sequences by patient-level assignment.
pub fn split_sequences(
    seqs: Vec<TokenSequence>,
    config: &RunConfig,
    seed: u64,
) -> (Vec<TokenSequence>, Vec<TokenSequence>, Vec<TokenSequence>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for seq in seqs {
        match config.split.assign(seed, &seq.patient_id) {
            Split::Train => train.push(seq),
            Split::Val => val.push(seq),
            Split::Test => test.push(seq),
        }
    }
    (train, val, test)
}

/// Pretrain command: masked-token training over the tokenized corpus.
pub fn run_pretrain(config: &RunConfig) -> Result<pretrain::PretrainResult, PipelineError> {
    let seed = config.require_seed()?;
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    let records: Vec<SequenceRecord> = seqbuild::read_jsonl(&config.paths.sequences)?;
    let seqs: Vec<TokenSequence> = records.into_iter().map(|r| r.into_sequence()).collect();
    let (train, val, _) = split_sequences(seqs, config, seed);
    let model_config = model::ModelConfig { vocab_size: vocab.len(), ..config.model.clone() };
    let options = config.pretrain_options(seed);
    let result = pretrain::pretrain_loop(
        &train,
        &val,
        &vocab,
        &model_config,
        &config.optimizer,
        &config.mask_policy,
        &options,
        Some(&config.paths.pretrain_dir),
        None,
    )?;
    write_atomic(&config.paths.pretrain_dir.join("metrics.csv"), &metrics_csv(&result.metrics))?;
    write_effective_config(config, &config.paths.pretrain_dir, "pretrain")?;
    Ok(result)
}

/// Read index records and split by patient into (train, val, test) fit
/// samples.
pub fn load_fit_samples(
    config: &RunConfig,
    seed: u64,
) -> Result<(Vec<FitSample>, Vec<FitSample>, Vec<FitSample>), PipelineError> {
    let records: Vec<IndexRecord> = seqbuild::read_jsonl(&config.paths.indices)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for record in &records {
        let sample = FitSample::from_record(record)
            .ok_or_else(|| PipelineError::Data(format!("record for {} lacks labels", record.patient_id)))?;
        match config.split.assign(seed, &record.patient_id) {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok((train, val, test))
}

fn finetune_csv(rows: &[finetune::EpochRow]) -> Vec<u8> {
    let mut out =
        String::from("epoch,train_loss,c_mi,c_stroke,c_mace,c_cv_death,c_all_death,mean_c\n");
    for r in rows {
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            fmt(&r.val_c_index[0]),
            fmt(&r.val_c_index[1]),
            fmt(&r.val_c_index[2]),
            fmt(&r.val_c_index[3]),
            fmt(&r.val_c_index[4]),
            fmt(&r.mean_c_index),
        ));
    }
    out.into_bytes()
}

/// Fine-tune command: Cox training from the pretrained checkpoint; writes
/// the best checkpoint and per-epoch metrics.
pub fn run_finetune(config: &RunConfig) -> Result<finetune::FinetuneResult, PipelineError> {
    let seed = config.require_seed()?;
    let (train, val, _) = load_fit_samples(config, seed)?;
    let pretrained = model::load_checkpoint(&config.paths.pretrain_dir.join("final"))?;
    let result = finetune::finetune_loop(&train, &val, &pretrained.params, &config.finetune, seed)?;
    model::save_checkpoint(
        &config.paths.finetune_dir.join("best"),
        &result.params,
        result.best_epoch.map(|e| e as u64 + 1).unwrap_or(0),
        seed,
        0,
        &Default::default(),
        &Default::default(),
    )?;
    write_atomic(&config.paths.finetune_dir.join("metrics.csv"), &finetune_csv(&result.metrics))?;
    write_effective_config(config, &config.paths.finetune_dir, "finetune")?;
    Ok(result)
}

/// Evaluate command: report over the held-out test split using the training
/// split for the Breslow baseline.
pub fn run_evaluate(config: &RunConfig) -> Result<MetricsReport, PipelineError> {
    let seed = config.require_seed()?;
    let (train, _, test) = load_fit_samples(config, seed)?;
    if test.is_empty() {
        return Err(PipelineError::Data("test split is empty".into()));
    }
    let checkpoint = model::load_checkpoint(&config.paths.finetune_dir.join("best"))?;
    let report =
        metrics::evaluate(&checkpoint.params, &test, &train, config.horizon_days, config.ties)?;
    std::fs::create_dir_all(&config.paths.report_dir)?;
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_atomic(&config.paths.report_dir.join("report.json"), &json)?;
    write_atomic(
        &config.paths.report_dir.join("report.txt"),
        metrics::render_table(&report).as_bytes(),
    )?;
    write_effective_config(config, &config.paths.report_dir, "evaluate")?;
    Ok(report)
}

/// Neighbors command: nearest tokens by embedding cosine from a checkpoint
/// (the fine-tuned one when present, else the pretrained).
pub fn run_neighbors(
    config: &RunConfig,
    token: &str,
    k: usize,
) -> Result<Vec<metrics::Neighbor>, PipelineError> {
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    let params = load_best_params(config)?;
    let neighbors = metrics::embedding_neighbors(&params, &vocab, token, k)?;
    let payload = serde_json::json!({ "token": token, "neighbors": neighbors });
    let mut bytes = serde_json::to_vec_pretty(&payload).expect("neighbors serialize");
    bytes.push(b'\n');
    write_atomic(&config.paths.neighbors, &bytes)?;
    write_effective_config(config, &out_dir_of(&config.paths.neighbors), "neighbors")?;
    Ok(neighbors)
}

fn load_best_params(config: &RunConfig) -> Result<ModelParams<f32>, PipelineError> {
    let finetuned = config.paths.finetune_dir.join("best");
    let pretrained = config.paths.pretrain_dir.join("final");
    let dir = if finetuned.join("manifest.json").exists() { finetuned } else { pretrained };
    Ok(model::load_checkpoint(&dir)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // no staging leftovers
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn grouping_preserves_first_appearance_order() {
        use crate::events::EventType;
        use chrono::NaiveDate;
        let date = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        let mk = |pid: &str| MedicalEvent {
            patient_id: pid.into(),
            timestamp: date,
            event_type: EventType::Enc,
            code: String::new(),
            value: None,
            unit: None,
            context: String::new(),
        };
        let grouped = group_by_patient(vec![mk("B"), mk("A"), mk("B"), mk("C"), mk("A")]);
        let order: Vec<&str> = grouped.iter().map(|(pid, _)| pid.as_str()).collect();
        assert_eq!(order, ["B", "A", "C"]);
        assert_eq!(grouped[0].1.len(), 2);
    }
}

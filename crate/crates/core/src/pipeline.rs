//! End-to-end run: cohort -> resample -> train -> Monte-Carlo predict ->
//! entropy mapping -> stratified evaluation -> report files.
//!
//! Every stage is a pure function of the configuration and input files, so
//! the written bundle is byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::config::{ConfigError, RunConfig, SmoteGroup};
use crate::eval::{
    confusion, distribution, radiologist_consistency, round_percent, stratified_reports,
    ConfusionMatrix, DistributionTable, EvalCase, StratumPair, StratumReport, StratumStatus,
};
use crate::io::{
    load_external_samples, load_lesions, save_model, write_augmented, write_bytes,
    write_external_samples, LoadOptions, RowDiagnostic,
};
use crate::mlp::{mc_predict, train, BayesianClassifier, MlpError, PredictiveSamples};
use crate::model::{encode_features, BiRads, FeatureLayout, LesionRecord, Pathology, Split};
use crate::resample::{smote_balance, AugmentedRecord, LabeledVector};
use crate::synth::{agreement_report, generate, oracle_birads, AgreementSummary, SynthSpec};
use crate::uncertainty::{assign_birads, BandThresholds, MapperConfig};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Synth,
    Encode,
    Resample,
    Train,
    Predict,
    Map,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Synth => "synth",
            Stage::Encode => "encode",
            Stage::Resample => "resample",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Map => "map",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    /// Caused by bad input or configuration rather than the environment.
    pub validation: bool,
}

impl PipelineError {
    fn invalid(stage: Stage, e: impl fmt::Display) -> Self {
        Self {
            stage,
            message: e.to_string(),
            validation: true,
        }
    }

    fn runtime(stage: Stage, e: impl fmt::Display) -> Self {
        Self {
            stage,
            message: e.to_string(),
            validation: false,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        let validation = !matches!(e, ConfigError::Read { .. });
        Self {
            stage: Stage::Config,
            message: e.to_string(),
            validation,
        }
    }
}

fn io_err(stage: Stage) -> impl Fn(crate::io::IoError) -> PipelineError {
    move |e| PipelineError {
        stage,
        validation: e.is_validation(),
        message: e.to_string(),
    }
}

/// Cases and, for synthetic cohorts, their exact posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub source: String,
    pub records: Vec<LesionRecord>,
    pub posteriors: Option<Vec<f64>>,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl Cohort {
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }
}

/// Synthetic cohort when `preset` is set, otherwise the lesions file.
pub fn load_cohort(cfg: &RunConfig) -> Result<Cohort, PipelineError> {
    if let Some(name) = &cfg.preset {
        let spec = SynthSpec::preset(name, cfg.synth_cases, cfg.seed)
            .map_err(|e| PipelineError::invalid(Stage::Synth, e))?;
        let cases = generate(&spec).map_err(|e| PipelineError::invalid(Stage::Synth, e))?;
        let (records, posteriors) = cases.into_iter().map(|c| (c.record, c.posterior)).unzip();
        return Ok(Cohort {
            source: format!("synthetic:{name}"),
            records,
            posteriors: Some(posteriors),
            diagnostics: Vec::new(),
        });
    }
    let path = cfg.lesions.as_ref().ok_or_else(|| {
        PipelineError::invalid(
            Stage::Config,
            "either a preset or a lesions file is required",
        )
    })?;
    let opts = LoadOptions {
        strict: cfg.strict,
        aliases: cfg.column_aliases.clone(),
    };
    let table = load_lesions(path, &opts).map_err(io_err(Stage::Load))?;
    let posteriors = if !table.posteriors.is_empty() && table.posteriors.iter().all(Option::is_some)
    {
        Some(table.posteriors.iter().map(|p| p.unwrap()).collect())
    } else {
        None
    };
    Ok(Cohort {
        source: "lesions".into(),
        records: table.records,
        posteriors,
        diagnostics: table.diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub n_train: usize,
    pub n_synthetic: usize,
    pub layer_sizes: Vec<usize>,
    pub layout_hash: String,
    pub final_loss: f64,
}

/// Model, the (possibly resampled) training set, and its summary.
pub type Trained = (
    BayesianClassifier<f64>,
    Vec<AugmentedRecord<f64>>,
    TrainingSummary,
);

/// Trains on the train split, resampled when `cfg.smote` is set.
pub fn train_on_cohort(cfg: &RunConfig, cohort: &Cohort) -> Result<Trained, PipelineError> {
    let layout = FeatureLayout::standard();
    let train_idx = cohort.split(Split::Train);
    if train_idx.is_empty() {
        return Err(PipelineError::invalid(
            Stage::Load,
            "no records in the train split",
        ));
    }
    let labeled = train_idx
        .iter()
        .map(|&i| {
            let r = &cohort.records[i];
            Ok(LabeledVector {
                vector: encode_features(&r.features, &layout)?,
                birads: r.radiologist_birads,
                pathology: r.pathology,
            })
        })
        .collect::<Result<Vec<_>, crate::model::ModelError>>()
        .map_err(|e| PipelineError::invalid(Stage::Encode, e))?;
    let augmented = if cfg.smote {
        smote_balance(&labeled, &cfg.smote_config())
            .map_err(|e| PipelineError::invalid(Stage::Resample, e))?
    } else {
        labeled
            .into_iter()
            .enumerate()
            .map(|(i, record)| AugmentedRecord {
                record,
                origin: crate::resample::Origin::Original(i),
            })
            .collect()
    };
    let data: Vec<_> = augmented
        .iter()
        .map(|a| (a.record.vector.clone(), a.record.pathology))
        .collect();
    let model = train(
        &data,
        &layout,
        &cfg.hidden,
        cfg.dropout()?,
        &cfg.train_config(),
    )
    .map_err(|e| match e {
        MlpError::NonFinite(_) => PipelineError::runtime(Stage::Train, e),
        e => PipelineError::invalid(Stage::Train, e),
    })?;
    let summary = TrainingSummary {
        n_train: train_idx.len(),
        n_synthetic: augmented.iter().filter(|a| a.is_synthetic()).count(),
        layer_sizes: model.params.layer_sizes(),
        layout_hash: layout.hash().to_string(),
        final_loss: model.final_loss,
    };
    Ok((model, augmented, summary))
}

/// Seed of the `index`-th scored case (SplitMix64 of the run seed).
pub fn case_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Monte-Carlo predictions for the test split, in cohort order.
pub fn predict_test_split(
    cfg: &RunConfig,
    model: &BayesianClassifier<f64>,
    cohort: &Cohort,
) -> Result<Vec<(usize, PredictiveSamples<f64>)>, PipelineError> {
    let test_idx = cohort.split(Split::Test);
    if test_idx.is_empty() {
        return Err(PipelineError::invalid(
            Stage::Load,
            "no records in the test split",
        ));
    }
    test_idx
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let x = encode_features(&cohort.records[i].features, &model.layout)
                .map_err(|e| PipelineError::invalid(Stage::Encode, e))?;
            let (samples, _) = mc_predict(model, &x, cfg.passes, case_seed(cfg.seed, k as u64))
                .map_err(|e| PipelineError::invalid(Stage::Predict, e))?;
            Ok((i, samples))
        })
        .collect()
}

fn pct<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_percent(*v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub passes: usize,
    pub b2_epsilon: f64,
    pub thresholds: BandThresholds<f64>,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub smote: bool,
    pub smote_k: usize,
    pub smote_group: SmoteGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub case_id: String,
    pub pathology: Pathology,
    pub radiologist: BiRads,
    pub p_benign: f64,
    pub p_malignant: f64,
    pub entropy: f64,
    pub model: BiRads,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posterior: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<BiRads>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub stratum: BiRads,
    #[serde(serialize_with = "pct")]
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub source: String,
    pub settings: Settings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    pub diagnostics: Vec<RowDiagnostic>,
    pub n_test: usize,
    /// Label accuracy of `p_malignant >= 0.5` against pathology, percent.
    #[serde(serialize_with = "pct")]
    pub test_accuracy: f64,
    pub strata: Vec<StratumPair>,
    pub radiologist_consistency: Vec<ConsistencyRow>,
    pub confusion: ConfusionMatrix,
    pub distribution: DistributionTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementSummary>,
    pub predictions: Vec<Prediction>,
}

impl ReportBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serialises") + "\n"
    }
}

/// Maps and evaluates scored cases. `scored` pairs a cohort index with that
/// case's stochastic outputs; this is the path both internal and external
/// predictions take.
pub fn evaluate_scored(
    cfg: &RunConfig,
    cohort: &Cohort,
    scored: &[(usize, PredictiveSamples<f64>)],
    training: Option<TrainingSummary>,
) -> Result<ReportBundle, PipelineError> {
    let passes = scored.first().map_or(cfg.passes, |s| s.1.passes());
    let mapper = match cfg.b2_epsilon {
        Some(eps) => {
            MapperConfig::new(eps).map_err(|e| PipelineError::invalid(Stage::Config, e))?
        }
        None => MapperConfig::for_passes(passes),
    };
    let mut predictions = Vec::with_capacity(scored.len());
    let mut cases = Vec::with_capacity(scored.len());
    let mut correct = 0usize;
    for (i, samples) in scored {
        let r = &cohort.records[*i];
        let dist = samples
            .mean()
            .map_err(|e| PipelineError::invalid(Stage::Map, e))?;
        let (h, band) =
            assign_birads(&dist, &mapper).map_err(|e| PipelineError::invalid(Stage::Map, e))?;
        if dist.predicted_label() == r.pathology {
            correct += 1;
        }
        let posterior = cohort.posteriors.as_ref().map(|p| p[*i]);
        let oracle = posterior
            .map(|p| oracle_birads(p, &mapper))
            .transpose()
            .map_err(|e| PipelineError::invalid(Stage::Map, e))?;
        predictions.push(Prediction {
            case_id: r.case_id.clone(),
            pathology: r.pathology,
            radiologist: r.radiologist_birads,
            p_benign: dist.p_benign(),
            p_malignant: dist.p_malignant(),
            entropy: h,
            model: band,
            posterior,
            oracle,
        });
        cases.push(EvalCase {
            case_id: r.case_id.clone(),
            pathology: r.pathology,
            radiologist: r.radiologist_birads,
            model: band,
        });
    }
    let ev = |e| PipelineError::invalid(Stage::Evaluate, e);
    let strata = stratified_reports(&cases).map_err(ev)?;
    let test_records: Vec<LesionRecord> = scored
        .iter()
        .map(|(i, _)| cohort.records[*i].clone())
        .collect();
    let consistency = radiologist_consistency(&test_records)
        .map_err(ev)?
        .into_iter()
        .map(|(stratum, accuracy)| ConsistencyRow { stratum, accuracy })
        .collect();
    let agreement = if predictions.iter().all(|p| p.oracle.is_some()) && !predictions.is_empty() {
        let model: Vec<_> = predictions.iter().map(|p| p.model).collect();
        let oracle: Vec<_> = predictions.iter().map(|p| p.oracle.unwrap()).collect();
        let truth: Vec<_> = predictions.iter().map(|p| p.pathology).collect();
        Some(
            agreement_report(&model, &oracle, &truth)
                .map_err(|e| PipelineError::invalid(Stage::Evaluate, e))?,
        )
    } else {
        None
    };
    Ok(ReportBundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        source: cohort.source.clone(),
        settings: Settings {
            seed: cfg.seed,
            passes,
            b2_epsilon: mapper.b2_prob_epsilon(),
            thresholds: *mapper.thresholds(),
            dropout_rate: cfg.dropout_rate,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            hidden: cfg.hidden.clone(),
            smote: cfg.smote,
            smote_k: cfg.smote_k,
            smote_group: cfg.smote_group,
        },
        training,
        diagnostics: cohort.diagnostics.clone(),
        n_test: scored.len(),
        test_accuracy: if scored.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / scored.len() as f64
        },
        strata,
        radiologist_consistency: consistency,
        confusion: confusion(&cases).map_err(ev)?,
        distribution: distribution(&cases),
        agreement,
        predictions,
    })
}

/// Scores the cases named in an external samples file against the lesion
/// metadata of `cohort`, in cohort order.
pub fn attach_external(
    cohort: &Cohort,
    mut samples: BTreeMap<String, PredictiveSamples<f64>>,
) -> Result<Vec<(usize, PredictiveSamples<f64>)>, PipelineError> {
    let mut scored = Vec::with_capacity(samples.len());
    for (i, r) in cohort.records.iter().enumerate() {
        if let Some(s) = samples.remove(&r.case_id) {
            scored.push((i, s));
        }
    }
    if let Some(id) = samples.keys().next() {
        return Err(PipelineError::invalid(
            Stage::Load,
            format!("samples for case {id:?} have no lesion record"),
        ));
    }
    Ok(scored)
}

/// What a run produced, besides the files it wrote.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub bundle: ReportBundle,
    pub json: String,
}

pub const BUNDLE_FILE: &str = "bundle.json";
pub const STRATA_FILE: &str = "strata.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const AUGMENTED_FILE: &str = "augmented.csv";

/// Runs every stage and writes the report files under `cfg.out`.
///
/// With `cfg.samples` set, training and prediction are skipped and the
/// external outputs are scored against the lesion metadata instead.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let cohort = load_cohort(cfg)?;
    let out = cfg.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| PipelineError::runtime(Stage::Write, e))?;
    let bundle = if let Some(path) = &cfg.samples {
        let samples = load_external_samples(path).map_err(io_err(Stage::Load))?;
        let scored = attach_external(&cohort, samples)?;
        evaluate_scored(cfg, &cohort, &scored, None)?
    } else {
        let (model, augmented, summary) = train_on_cohort(cfg, &cohort)?;
        if let Some(p) = &cfg.model {
            save_model(&model, p).map_err(io_err(Stage::Write))?;
        }
        if cfg.smote {
            let mut buf = Vec::new();
            write_augmented(&mut buf, &augmented, &model.layout).map_err(io_err(Stage::Write))?;
            write_file(&out.join(AUGMENTED_FILE), &buf)?;
        }
        let scored = predict_test_split(cfg, &model, &cohort)?;
        let mut buf = Vec::new();
        write_external_samples(
            &mut buf,
            scored
                .iter()
                .map(|(i, s)| (cohort.records[*i].case_id.as_str(), s)),
        )
        .map_err(io_err(Stage::Write))?;
        write_file(&out.join(SAMPLES_FILE), &buf)?;
        evaluate_scored(cfg, &cohort, &scored, Some(summary))?
    };
    let json = write_reports(&bundle, out)?;
    Ok(PipelineOutput { bundle, json })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_bytes(path, bytes).map_err(io_err(Stage::Write))
}

/// Writes the JSON bundle and its CSV tables; returns the JSON text.
pub fn write_reports(bundle: &ReportBundle, out: &Path) -> Result<String, PipelineError> {
    std::fs::create_dir_all(out).map_err(|e| PipelineError::runtime(Stage::Write, e))?;
    let json = bundle.to_json();
    write_file(&out.join(BUNDLE_FILE), json.as_bytes())?;
    write_file(
        &out.join(STRATA_FILE),
        strata_csv(&bundle.strata).as_bytes(),
    )?;
    write_file(
        &out.join(PREDICTIONS_FILE),
        predictions_csv(&bundle.predictions).as_bytes(),
    )?;
    write_file(
        &out.join(CONFUSION_FILE),
        confusion_csv(&bundle.confusion).as_bytes(),
    )?;
    Ok(json)
}

fn fmt2(v: f64) -> String {
    format!("{:.2}", round_percent(v))
}

/// One row per class row of every report; unscored reports get one row with
/// blank metrics.
pub fn strata_csv(strata: &[StratumPair]) -> String {
    let mut s = String::from(
        "stratum,assigner,status,n,n_benign,n_malignant,n_indeterminate,class,precision,recall,f1,accuracy\n",
    );
    let mut emit = |r: &StratumReport| {
        let head = format!(
            "{},{},{{}},{},{},{},{}",
            r.stratum, r.assigner, r.n, r.n_benign, r.n_malignant, r.n_indeterminate
        );
        match &r.status {
            StratumStatus::Evaluated(m) => {
                for (class, row) in [
                    ("benign", &m.benign),
                    ("malignant", &m.malignant),
                    ("macro", &m.macro_avg),
                ] {
                    s += &format!(
                        "{},{},{},{},{},{}\n",
                        head.replace("{}", "evaluated"),
                        class,
                        fmt2(row.precision),
                        fmt2(row.recall),
                        fmt2(row.f1),
                        fmt2(m.accuracy)
                    );
                }
            }
            StratumStatus::NotEvaluable => {
                s += &format!("{},,,,,\n", head.replace("{}", "not_evaluable"));
            }
            StratumStatus::Empty => s += &format!("{},,,,,\n", head.replace("{}", "empty")),
        }
    };
    for pair in strata {
        emit(&pair.radiologist);
        emit(&pair.model);
    }
    s
}

pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let with_oracle = predictions.iter().any(|p| p.oracle.is_some());
    let mut s = String::from("case_id,pathology,radiologist,p_benign,p_malignant,entropy,model");
    if with_oracle {
        s += ",posterior,oracle";
    }
    s.push('\n');
    for p in predictions {
        s += &format!(
            "{},{},{},{},{},{},{}",
            csv_field(&p.case_id),
            p.pathology,
            p.radiologist,
            p.p_benign,
            p.p_malignant,
            p.entropy,
            p.model
        );
        if with_oracle {
            let post = p.posterior.map(|v| v.to_string()).unwrap_or_default();
            let orc = p.oracle.map(|b| b.to_string()).unwrap_or_default();
            s += &format!(",{post},{orc}");
        }
        s.push('\n');
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let mut s = String::from("radiologist");
    for c in &m.cols {
        s += &format!(",{c}");
    }
    s.push('\n');
    for (r, row) in m.rows.iter().zip(&m.counts) {
        s += &r.to_string();
        for v in row {
            s += &format!(",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<_> = (0..1000).map(|i| case_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(case_seed(7, 0), case_seed(8, 0));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn missing_input_is_a_validation_error() {
        let cfg = RunConfig::default();
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.validation);
        assert_eq!(err.stage, Stage::Config);
    }
}

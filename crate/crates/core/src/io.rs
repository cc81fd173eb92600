//! File formats: lesion tables, external probability samples, augmented
//! training sets and persisted models.
//!
//! All CSVs are comma-separated UTF-8 with a required header row; quoted
//! fields are accepted. Floats are written in shortest round-trip form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mlp::{
    BayesianClassifier, DropoutConfig, Layer, NetworkParams, PredictiveDistribution,
    PredictiveSamples,
};
use crate::model::{
    parse_margins, parse_shapes, BiRads, FeatureLayout, LesionRecord, MorphFeatures, Pathology,
    Slot, Split, View,
};
use crate::resample::{AugmentedRecord, Origin};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("case {case_id}: missing pass index {index}")]
    MissingPass { case_id: String, index: usize },
    #[error("case {case_id} has {got} passes, expected {expected}")]
    InconsistentPasses {
        case_id: String,
        expected: usize,
        got: usize,
    },
    #[error("samples file holds no rows")]
    NoSamples,
    #[error("model schema version {found}, expected {expected}")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },
    #[error("model file: {0}")]
    Model(String),
}

impl IoError {
    /// Errors caused by malformed input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, IoError::File { .. })
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<File, IoError> {
    File::create(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `bytes` to `path`, creating or truncating it.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    create(path)?
        .write_all(bytes)
        .map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })
}

pub const LESION_COLUMNS: [&str; 9] = [
    "case_id",
    "view",
    "breast_density",
    "mass_shape",
    "mass_margins",
    "subtlety",
    "birads_assessment",
    "pathology",
    "split",
];

pub const POSTERIOR_COLUMN: &str = "posterior";

/// Header spellings seen in public releases of the dataset's tables.
pub fn default_column_aliases() -> BTreeMap<String, String> {
    [
        ("assessment", "birads_assessment"),
        ("image_view", "view"),
        ("density", "breast_density"),
        ("breast density", "breast_density"),
        ("mass shape", "mass_shape"),
        ("mass margins", "mass_margins"),
        ("patient_id", "case_id"),
    ]
    .into_iter()
    .map(|(a, c)| (a.to_string(), c.to_string()))
    .collect()
}

fn normalise_header(h: &str) -> String {
    h.trim().to_ascii_lowercase().replace([' ', '-'], "_")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    /// Abort on the first malformed row instead of collecting diagnostics.
    pub strict: bool,
    /// Alternative header name to canonical column name.
    pub aliases: BTreeMap<String, String>,
}

/// A malformed row that was skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowDiagnostic {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LesionTable {
    pub records: Vec<LesionRecord>,
    /// Per-record value of the optional posterior column.
    pub posteriors: Vec<Option<f64>>,
    pub diagnostics: Vec<RowDiagnostic>,
}

pub fn load_lesions(path: &Path, opts: &LoadOptions) -> Result<LesionTable, IoError> {
    read_lesions(open(path)?, opts)
}

pub fn read_lesions<R: Read>(reader: R, opts: &LoadOptions) -> Result<LesionTable, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let aliases: BTreeMap<String, String> = opts
        .aliases
        .iter()
        .map(|(a, c)| (normalise_header(a), normalise_header(c)))
        .collect();
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| {
            let n = normalise_header(h);
            aliases.get(&n).cloned().unwrap_or(n)
        })
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let mut cols = [0usize; 9];
    for (slot, name) in cols.iter_mut().zip(LESION_COLUMNS) {
        *slot = find(name).ok_or_else(|| IoError::MissingColumn(name.to_string()))?;
    }
    let posterior_col = find(POSTERIOR_COLUMN);

    let mut table = LesionTable::default();
    let mut seen = BTreeSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(cols[i]).unwrap_or("").trim();
        let parsed = parse_lesion_row(&field).and_then(|rec| {
            let posterior = match posterior_col.map(|c| row.get(c).unwrap_or("").trim()) {
                None | Some("") => None,
                Some(tok) => {
                    let p: f64 = tok
                        .parse()
                        .map_err(|_| format!("posterior {tok:?} is not a number"))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(format!("posterior {p} outside [0, 1]"));
                    }
                    Some(p)
                }
            };
            if !seen.insert(rec.case_id.clone()) {
                return Err(format!("duplicate case_id {:?}", rec.case_id));
            }
            Ok((rec, posterior))
        });
        match parsed {
            Ok((rec, posterior)) => {
                table.records.push(rec);
                table.posteriors.push(posterior);
            }
            Err(message) if opts.strict => return Err(IoError::Row { line, message }),
            Err(message) => table.diagnostics.push(RowDiagnostic { line, message }),
        }
    }
    Ok(table)
}

fn parse_lesion_row<'a>(field: &impl Fn(usize) -> &'a str) -> Result<LesionRecord, String> {
    let case_id = field(0);
    if case_id.is_empty() {
        return Err("empty case_id".into());
    }
    let view: View = field(1)
        .parse()
        .map_err(|e: crate::model::ModelError| e.to_string())?;
    let int = |i: usize, what: &str| {
        field(i)
            .parse::<u8>()
            .map_err(|_| format!("{what} {:?} is not a small integer", field(i)))
    };
    let density = int(2, "breast_density")?;
    let subtlety = int(5, "subtlety")?;
    let birads: BiRads = field(6)
        .parse()
        .map_err(|e: crate::model::ModelError| e.to_string())?;
    if matches!(birads, BiRads::B1 | BiRads::B6) {
        return Err(format!("{birads}: B1/B6 rejected at ingest"));
    }
    let pathology: Pathology = field(7)
        .parse()
        .map_err(|e: crate::model::ModelError| e.to_string())?;
    let split: Split = field(8)
        .parse()
        .map_err(|e: crate::model::ModelError| e.to_string())?;
    let features = MorphFeatures::new(
        parse_shapes(field(3)),
        parse_margins(field(4)),
        density,
        subtlety,
        view,
    )
    .map_err(|e| e.to_string())?;
    Ok(LesionRecord {
        case_id: case_id.to_string(),
        features,
        radiologist_birads: birads,
        pathology,
        split,
    })
}

fn birads_token(b: BiRads) -> &'static str {
    match b {
        BiRads::B0 => "0",
        BiRads::B1 => "1",
        BiRads::B2 => "2",
        BiRads::B3 => "3",
        BiRads::B4 => "4",
        BiRads::B4a => "4a",
        BiRads::B4b => "4b",
        BiRads::B4c => "4c",
        BiRads::B5 => "5",
        BiRads::B6 => "6",
    }
}

fn pathology_token(p: Pathology) -> &'static str {
    match p {
        Pathology::Benign => "BENIGN",
        Pathology::Malignant => "MALIGNANT",
    }
}

/// Lesion table in the canonical column order, plus a posterior column when
/// `posteriors` is given.
pub fn write_lesions<W: Write>(
    writer: W,
    records: &[LesionRecord],
    posteriors: Option<&[f64]>,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = LESION_COLUMNS.to_vec();
    if posteriors.is_some() {
        header.push(POSTERIOR_COLUMN);
    }
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let f = &r.features;
        let mut row = vec![
            r.case_id.clone(),
            f.view().to_string(),
            f.density().to_string(),
            f.shape_string(),
            f.margins_string(),
            f.subtlety().to_string(),
            birads_token(r.radiologist_birads).to_string(),
            pathology_token(r.pathology).to_string(),
            r.split.to_string(),
        ];
        if let Some(ps) = posteriors {
            row.push(ps[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: "<lesions>".into(),
        source,
    })?;
    Ok(())
}

pub const SAMPLE_COLUMNS: [&str; 4] = ["case_id", "pass_index", "p_benign", "p_malignant"];

/// Largest tolerated deviation of `p_benign + p_malignant` from 1.
pub const SAMPLE_SUM_TOLERANCE: f64 = 1e-6;

pub fn load_external_samples(
    path: &Path,
) -> Result<BTreeMap<String, PredictiveSamples<f64>>, IoError> {
    read_external_samples(open(path)?)
}

/// Per-case stochastic outputs keyed by case id, passes in index order.
///
/// Pairs within [`SAMPLE_SUM_TOLERANCE`] of unit sum but outside floating
/// tolerance are rescaled to sum to one.
pub fn read_external_samples<R: Read>(
    reader: R,
) -> Result<BTreeMap<String, PredictiveSamples<f64>>, IoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(normalise_header).collect();
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(SAMPLE_COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn(name.to_string()))?;
    }

    let mut by_case: BTreeMap<String, BTreeMap<usize, PredictiveDistribution<f64>>> =
        BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| IoError::Row { line, message };
        let field = |i: usize| row.get(cols[i]).unwrap_or("").trim();
        let case_id = field(0);
        if case_id.is_empty() {
            return Err(bad("empty case_id".into()));
        }
        let index: usize = field(1)
            .parse()
            .map_err(|_| bad(format!("pass_index {:?} is not an integer", field(1))))?;
        let prob = |i: usize| {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|p| (0.0..=1.0).contains(p))
                .ok_or_else(|| {
                    bad(format!(
                        "{} {:?} is not a probability",
                        SAMPLE_COLUMNS[i],
                        field(i)
                    ))
                })
        };
        let (pb, pm) = (prob(2)?, prob(3)?);
        let sum = pb + pm;
        if (sum - 1.0).abs() > SAMPLE_SUM_TOLERANCE {
            return Err(bad(format!(
                "p_benign + p_malignant = {sum}, off by more than 1e-6"
            )));
        }
        let (pb, pm) = if (sum - 1.0).abs() <= f64::sum_tolerance() {
            (pb, pm)
        } else {
            (pb / sum, pm / sum)
        };
        let dist = PredictiveDistribution::new(pb, pm).map_err(|e| bad(e.to_string()))?;
        if by_case
            .entry(case_id.to_string())
            .or_default()
            .insert(index, dist)
            .is_some()
        {
            return Err(bad(format!("case {case_id}: duplicate pass index {index}")));
        }
    }

    let mut expected: Option<(String, usize)> = None;
    let mut out = BTreeMap::new();
    for (case_id, passes) in by_case {
        for (want, &got) in passes.keys().enumerate() {
            if want != got {
                return Err(IoError::MissingPass {
                    case_id,
                    index: want,
                });
            }
        }
        let t = passes.len();
        match &expected {
            None => expected = Some((case_id.clone(), t)),
            Some((_, e)) if *e != t => {
                return Err(IoError::InconsistentPasses {
                    case_id,
                    expected: *e,
                    got: t,
                })
            }
            Some(_) => {}
        }
        let samples = PredictiveSamples::new(passes.into_values().collect(), 0)
            .map_err(|e| IoError::Model(e.to_string()))?;
        out.insert(case_id, samples);
    }
    if out.is_empty() {
        return Err(IoError::NoSamples);
    }
    Ok(out)
}

/// Inverse of [`read_external_samples`]; cases in the order given.
pub fn write_external_samples<'a, W: Write>(
    writer: W,
    samples: impl IntoIterator<Item = (&'a str, &'a PredictiveSamples<f64>)>,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SAMPLE_COLUMNS)?;
    for (case_id, s) in samples {
        for (t, d) in s.per_pass().iter().enumerate() {
            w.write_record([
                case_id.to_string(),
                t.to_string(),
                d.p_benign().to_string(),
                d.p_malignant().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|source| IoError::File {
        path: "<samples>".into(),
        source,
    })?;
    Ok(())
}

/// Resampled training set: provenance columns followed by one column per
/// feature slot.
pub fn write_augmented<W: Write, T: Scalar>(
    writer: W,
    records: &[AugmentedRecord<T>],
    layout: &FeatureLayout,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "row",
        "synthetic",
        "base",
        "neighbor",
        "u",
        "birads",
        "pathology",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(layout.slot_names());
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let (synthetic, base, neighbor, u) = match r.origin {
            Origin::Original(j) => ("false", j.to_string(), String::new(), String::new()),
            Origin::Synthetic { base, neighbor, u } => (
                "true",
                base.to_string(),
                neighbor.to_string(),
                u.to_f64_lossless().to_string(),
            ),
        };
        let mut row = vec![
            i.to_string(),
            synthetic.to_string(),
            base,
            neighbor,
            u,
            birads_token(r.record.birads).to_string(),
            pathology_token(r.record.pathology).to_string(),
        ];
        row.extend(
            r.record
                .vector
                .values()
                .iter()
                .map(|v| v.to_f64_lossless().to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: "<augmented>".into(),
        source,
    })?;
    Ok(())
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayoutDoc {
    version: String,
    slots: Vec<String>,
    hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerDoc>,
    dropout_rate: f64,
    layout: LayoutDoc,
    seed: u64,
    final_loss: f64,
}

/// JSON text of a model. Weights are stored row-major per layer.
pub fn model_to_json<T: Scalar>(model: &BayesianClassifier<T>) -> Result<String, IoError> {
    let doc = ModelDoc {
        schema_version: MODEL_SCHEMA_VERSION,
        layer_sizes: model.params.layer_sizes(),
        layers: model
            .params
            .layers()
            .iter()
            .map(|l| LayerDoc {
                weights: l.weights().iter().map(|v| v.to_f64_lossless()).collect(),
                bias: l.bias().iter().map(|v| v.to_f64_lossless()).collect(),
            })
            .collect(),
        dropout_rate: model.dropout.rate(),
        layout: LayoutDoc {
            version: model.layout.version().to_string(),
            slots: model.layout.slot_names(),
            hash: model.layout.hash().to_string(),
        },
        seed: model.seed,
        final_loss: model.final_loss,
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

pub fn model_from_json<T: Scalar>(text: &str) -> Result<BayesianClassifier<T>, IoError> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    if doc.schema_version != MODEL_SCHEMA_VERSION {
        return Err(IoError::SchemaVersion {
            expected: MODEL_SCHEMA_VERSION,
            found: doc.schema_version,
        });
    }
    let sizes = &doc.layer_sizes;
    if sizes.len() < 2 {
        return Err(IoError::Model(format!(
            "layer_sizes {sizes:?} needs at least two entries"
        )));
    }
    if doc.layers.len() != sizes.len() - 1 {
        return Err(IoError::Model(format!(
            "{} layers stored for layer_sizes {sizes:?}",
            doc.layers.len()
        )));
    }
    let layers = doc
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (n_in, n_out) = (sizes[i], sizes[i + 1]);
            if l.weights.len() != n_in * n_out {
                return Err(IoError::Layer {
                    layer: i,
                    message: format!(
                        "{} weights stored, {n_out}x{n_in} = {} expected",
                        l.weights.len(),
                        n_in * n_out
                    ),
                });
            }
            if l.bias.len() != n_out {
                return Err(IoError::Layer {
                    layer: i,
                    message: format!("{} biases stored, {n_out} expected", l.bias.len()),
                });
            }
            let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect();
            Layer::new(n_in, n_out, conv(&l.weights), conv(&l.bias)).map_err(|e| IoError::Layer {
                layer: i,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let params = NetworkParams::from_layers(layers).map_err(|e| IoError::Model(e.to_string()))?;
    let slots = doc
        .layout
        .slots
        .iter()
        .map(|s| Slot::parse(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IoError::Model(e.to_string()))?;
    let layout = FeatureLayout::new(doc.layout.version.clone(), slots);
    if layout.hash() != doc.layout.hash {
        return Err(IoError::Model(format!(
            "layout hash {} does not match its slots (recomputed {})",
            doc.layout.hash,
            layout.hash()
        )));
    }
    if layout.len() != sizes[0] {
        return Err(IoError::Layer {
            layer: 0,
            message: format!(
                "input width {} but layout has {} slots",
                sizes[0],
                layout.len()
            ),
        });
    }
    let dropout =
        DropoutConfig::new(doc.dropout_rate).map_err(|e| IoError::Model(e.to_string()))?;
    Ok(BayesianClassifier {
        params,
        dropout,
        layout,
        seed: doc.seed,
        final_loss: doc.final_loss,
    })
}

pub fn save_model<T: Scalar>(model: &BayesianClassifier<T>, path: &Path) -> Result<(), IoError> {
    write_bytes(path, model_to_json(model)?.as_bytes())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<BayesianClassifier<T>, IoError> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })?;
    model_from_json(&text)
}

//! Synthetic lesion cohorts with a known Bayes posterior.
//!
//! Pathology is drawn from the class prior, then shape, margin, density and
//! subtlety independently from class-conditional tables. Because the tables
//! are known, `p(malignant | features)` is exact and its BI-RADS band is the
//! reference the trained model is compared against.

use rand::Rng;
use serde::Serialize;

use crate::mlp::{stream_rng, PredictiveDistribution};
use crate::model::{
    implied_pathology, BiRads, LesionRecord, Margin, MorphFeatures, Pathology, Shape, Split, View,
};
use crate::uncertainty::{map_birads_from_prob, MapperConfig};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("posterior {0} outside [0, 1]")]
    PosteriorOutOfRange(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unknown preset {0:?} (expected \"separable\" or \"overlapping\")")]
    UnknownPreset(String),
}

const TABLE_TOLERANCE: f64 = 1e-12;

/// Class-conditional descriptor distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassTables {
    pub shape: Vec<(Shape, f64)>,
    pub margins: Vec<(Margin, f64)>,
    /// P(density = 1..=4).
    pub density: [f64; 4],
    /// P(subtlety = 1..=5).
    pub subtlety: [f64; 5],
}

impl ClassTables {
    fn validate(&self, class: Pathology) -> Result<(), SynthError> {
        let check = |name: &str, probs: &mut dyn Iterator<Item = f64>| {
            let mut sum = 0.0;
            for p in probs {
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(SynthError::InvalidSpec(format!(
                        "{class} {name} table has entry {p}"
                    )));
                }
                sum += p;
            }
            if sum == 0.0 {
                return Err(SynthError::InvalidSpec(format!(
                    "{class} {name} table assigns zero probability to every value"
                )));
            }
            if (sum - 1.0).abs() > TABLE_TOLERANCE {
                return Err(SynthError::InvalidSpec(format!(
                    "{class} {name} table sums to {sum}"
                )));
            }
            Ok(())
        };
        check("shape", &mut self.shape.iter().map(|e| e.1))?;
        check("margin", &mut self.margins.iter().map(|e| e.1))?;
        check("density", &mut self.density.iter().copied())?;
        check("subtlety", &mut self.subtlety.iter().copied())?;
        Ok(())
    }

    /// Probability of a single-valued descriptor combination.
    pub fn likelihood(&self, shape: Shape, margin: Margin, density: u8, subtlety: u8) -> f64 {
        let ps = lookup(&self.shape, shape);
        let pm = lookup(&self.margins, margin);
        ps * pm * self.density[usize::from(density) - 1] * self.subtlety[usize::from(subtlety) - 1]
    }
}

fn lookup<K: PartialEq>(table: &[(K, f64)], key: K) -> f64 {
    table
        .iter()
        .filter(|(k, _)| *k == key)
        .map(|(_, p)| p)
        .sum()
}

fn sample_index<R: Rng>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative total
    last
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub n_cases: usize,
    pub benign_fraction: f64,
    pub benign: ClassTables,
    pub malignant: ClassTables,
    /// Fraction of cases assigned to the test split.
    pub test_fraction: f64,
    /// Probability the simulated radiologist withholds a score (B0).
    pub radiologist_b0_rate: f64,
    /// Probability the simulated radiologist lands one coarse category off
    /// the reference band.
    pub radiologist_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_cases == 0 {
            return Err(SynthError::InvalidSpec("n_cases must be positive".into()));
        }
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(SynthError::InvalidSpec(format!(
                    "{name} = {v} outside (0, 1)"
                )))
            }
        };
        open_unit("benign_fraction", self.benign_fraction)?;
        open_unit("test_fraction", self.test_fraction)?;
        for (name, v) in [
            ("radiologist_b0_rate", self.radiologist_b0_rate),
            ("radiologist_noise", self.radiologist_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        self.benign.validate(Pathology::Benign)?;
        self.malignant.validate(Pathology::Malignant)?;
        Ok(())
    }

    /// Exact `p(malignant | features)` by Bayes' rule.
    pub fn posterior(&self, shape: Shape, margin: Margin, density: u8, subtlety: u8) -> f64 {
        let lb = self.benign_fraction * self.benign.likelihood(shape, margin, density, subtlety);
        let lm = (1.0 - self.benign_fraction)
            * self.malignant.likelihood(shape, margin, density, subtlety);
        if lb + lm == 0.0 {
            1.0 - self.benign_fraction
        } else {
            lm / (lb + lm)
        }
    }

    /// Supports of the two classes do not intersect in shape or margin, so
    /// every posterior is exactly 0 or 1.
    pub fn separable(n_cases: usize, seed: u64) -> Self {
        Self {
            n_cases,
            benign_fraction: 0.55,
            benign: ClassTables {
                shape: vec![(Shape::Oval, 0.5), (Shape::Round, 0.5)],
                margins: vec![(Margin::Circumscribed, 0.6), (Margin::Obscured, 0.4)],
                density: [0.2, 0.35, 0.3, 0.15],
                subtlety: [0.05, 0.1, 0.2, 0.3, 0.35],
            },
            malignant: ClassTables {
                shape: vec![(Shape::Irregular, 0.7), (Shape::Lobulated, 0.3)],
                margins: vec![
                    (Margin::Spiculated, 0.5),
                    (Margin::IllDefined, 0.3),
                    (Margin::Microlobulated, 0.2),
                ],
                density: [0.15, 0.3, 0.35, 0.2],
                subtlety: [0.1, 0.15, 0.2, 0.25, 0.3],
            },
            test_fraction: 0.3,
            radiologist_b0_rate: 0.05,
            radiologist_noise: 0.2,
            seed,
        }
    }

    /// Shared descriptors with shifted frequencies; produces posteriors
    /// across the whole unit interval, including the B4 sub-bands.
    pub fn overlapping(n_cases: usize, seed: u64) -> Self {
        Self {
            n_cases,
            benign_fraction: 0.55,
            benign: ClassTables {
                shape: vec![
                    (Shape::Oval, 0.35),
                    (Shape::Round, 0.30),
                    (Shape::Irregular, 0.10),
                    (Shape::Lobulated, 0.20),
                    (Shape::Other, 0.05),
                ],
                margins: vec![
                    (Margin::Circumscribed, 0.40),
                    (Margin::Obscured, 0.30),
                    (Margin::Microlobulated, 0.10),
                    (Margin::Spiculated, 0.05),
                    (Margin::IllDefined, 0.15),
                ],
                density: [0.2, 0.35, 0.3, 0.15],
                subtlety: [0.05, 0.1, 0.2, 0.3, 0.35],
            },
            malignant: ClassTables {
                shape: vec![
                    (Shape::Oval, 0.10),
                    (Shape::Round, 0.10),
                    (Shape::Irregular, 0.45),
                    (Shape::Lobulated, 0.25),
                    (Shape::Other, 0.10),
                ],
                margins: vec![
                    (Margin::Circumscribed, 0.08),
                    (Margin::Obscured, 0.12),
                    (Margin::Microlobulated, 0.15),
                    (Margin::Spiculated, 0.35),
                    (Margin::IllDefined, 0.30),
                ],
                density: [0.15, 0.3, 0.35, 0.2],
                subtlety: [0.1, 0.15, 0.2, 0.25, 0.3],
            },
            test_fraction: 0.3,
            radiologist_b0_rate: 0.05,
            radiologist_noise: 0.2,
            seed,
        }
    }

    pub fn preset(name: &str, n_cases: usize, seed: u64) -> Result<Self, SynthError> {
        match name {
            "separable" => Ok(Self::separable(n_cases, seed)),
            "overlapping" => Ok(Self::overlapping(n_cases, seed)),
            other => Err(SynthError::UnknownPreset(other.to_string())),
        }
    }
}

/// A generated case and its exact malignancy posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub record: LesionRecord,
    pub posterior: f64,
}

const RADIOLOGIST_SCALE: [BiRads; 4] = [BiRads::B2, BiRads::B3, BiRads::B4, BiRads::B5];

/// Samples `spec.n_cases` cases; deterministic given `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthCase>, SynthError> {
    spec.validate()?;
    let mapper = MapperConfig::<f64>::default();
    let mut rng = stream_rng(spec.seed, 0);
    let width = spec.n_cases.to_string().len();
    (0..spec.n_cases)
        .map(|i| {
            let pathology = if rng.gen::<f64>() < spec.benign_fraction {
                Pathology::Benign
            } else {
                Pathology::Malignant
            };
            let tables = match pathology {
                Pathology::Benign => &spec.benign,
                Pathology::Malignant => &spec.malignant,
            };
            let shape = tables.shape[sample_index(tables.shape.iter().map(|e| e.1), &mut rng)].0;
            let margin =
                tables.margins[sample_index(tables.margins.iter().map(|e| e.1), &mut rng)].0;
            let density = sample_index(tables.density.iter().copied(), &mut rng) as u8 + 1;
            let subtlety = sample_index(tables.subtlety.iter().copied(), &mut rng) as u8 + 1;
            let view = if rng.gen::<bool>() {
                View::MLO
            } else {
                View::CC
            };
            let split = if rng.gen::<f64>() < spec.test_fraction {
                Split::Test
            } else {
                Split::Train
            };
            let posterior = spec.posterior(shape, margin, density, subtlety);
            let reference = oracle_birads(posterior, &mapper)?.coarse();
            let radiologist = if rng.gen::<f64>() < spec.radiologist_b0_rate {
                BiRads::B0
            } else if rng.gen::<f64>() < spec.radiologist_noise {
                let pos = RADIOLOGIST_SCALE
                    .iter()
                    .position(|&b| b == reference)
                    .unwrap();
                let up = rng.gen::<bool>();
                let j = match (pos, up) {
                    (0, _) => 1,
                    (p, _) if p == RADIOLOGIST_SCALE.len() - 1 => p - 1,
                    (p, true) => p + 1,
                    (p, false) => p - 1,
                };
                RADIOLOGIST_SCALE[j]
            } else {
                reference
            };
            let features =
                MorphFeatures::new([shape].into(), [margin].into(), density, subtlety, view)
                    .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
            Ok(SynthCase {
                record: LesionRecord {
                    case_id: format!("syn-{i:0width$}"),
                    features,
                    radiologist_birads: radiologist,
                    pathology,
                    split,
                },
                posterior,
            })
        })
        .collect()
}

/// Band of the exact posterior, through the shared probability mapper.
pub fn oracle_birads(posterior: f64, cfg: &MapperConfig<f64>) -> Result<BiRads, SynthError> {
    if !(0.0..=1.0).contains(&posterior) {
        return Err(SynthError::PosteriorOutOfRange(posterior));
    }
    let dist = PredictiveDistribution::from_malignant(posterior)
        .map_err(|_| SynthError::PosteriorOutOfRange(posterior))?;
    Ok(map_birads_from_prob(&dist, cfg))
}

/// Model versus reference-band agreement, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub n: usize,
    /// Same coarse category (4a/4b/4c collapsed).
    pub coarse_agreement: f64,
    /// Same implied pathology band.
    pub band_agreement: f64,
    /// Pathology-consistency accuracy of the model's categories.
    pub model_consistency: f64,
    /// Pathology-consistency accuracy of the reference categories.
    pub oracle_consistency: f64,
}

pub fn agreement_report(
    model: &[BiRads],
    oracle: &[BiRads],
    pathology: &[Pathology],
) -> Result<AgreementSummary, SynthError> {
    if model.len() != oracle.len() || model.len() != pathology.len() {
        return Err(SynthError::LengthMismatch(format!(
            "{} model, {} oracle, {} pathology labels",
            model.len(),
            oracle.len(),
            pathology.len()
        )));
    }
    let n = model.len();
    let pct = |k: usize| {
        if n == 0 {
            0.0
        } else {
            100.0 * k as f64 / n as f64
        }
    };
    let band = |b: BiRads| implied_pathology(b).ok().flatten();
    let coarse = model
        .iter()
        .zip(oracle)
        .filter(|(m, o)| m.coarse() == o.coarse())
        .count();
    let bands = model
        .iter()
        .zip(oracle)
        .filter(|(m, o)| band(**m).is_some() && band(**m) == band(**o))
        .count();
    let consistent = |xs: &[BiRads]| {
        xs.iter()
            .zip(pathology)
            .filter(|(b, p)| band(**b) == Some(**p))
            .count()
    };
    Ok(AgreementSummary {
        n,
        coarse_agreement: pct(coarse),
        band_agreement: pct(bands),
        model_consistency: pct(consistent(model)),
        oracle_consistency: pct(consistent(oracle)),
    })
}

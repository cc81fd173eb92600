//! Domain vocabulary: BI-RADS scale, pathology, morphological descriptors,
//! lesion records and the fixed feature encoding consumed by the network.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unscored category {0}: B0, B1 and B6 carry no malignancy band")]
    UnscoredCategory(BiRads),
    #[error("encoding error: layout has no slot for {0}")]
    MissingSlot(String),
    #[error("encoding error: slot {0} cannot be produced from morphological features")]
    UnencodableSlot(String),
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("cannot parse {what} from {token:?}")]
    Parse { what: &'static str, token: String },
}

/// BI-RADS assessment category, including the subdivided 4a/4b/4c levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BiRads {
    B0,
    B1,
    B2,
    B3,
    B4,
    B4a,
    B4b,
    B4c,
    B5,
    B6,
}

impl BiRads {
    pub const ALL: [BiRads; 10] = [
        BiRads::B0,
        BiRads::B1,
        BiRads::B2,
        BiRads::B3,
        BiRads::B4,
        BiRads::B4a,
        BiRads::B4b,
        BiRads::B4c,
        BiRads::B5,
        BiRads::B6,
    ];

    /// Categories the probability/entropy mapper can emit, in increasing
    /// order of malignancy likelihood.
    pub const MAPPED: [BiRads; 6] = [
        BiRads::B2,
        BiRads::B3,
        BiRads::B4a,
        BiRads::B4b,
        BiRads::B4c,
        BiRads::B5,
    ];

    /// Coarse categories used for stratification and the confusion matrix.
    pub const COARSE_SCORED: [BiRads; 5] =
        [BiRads::B0, BiRads::B2, BiRads::B3, BiRads::B4, BiRads::B5];

    /// Collapses the 4a/4b/4c subdivision onto B4.
    pub fn coarse(self) -> BiRads {
        match self {
            BiRads::B4a | BiRads::B4b | BiRads::B4c => BiRads::B4,
            other => other,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BiRads::B0 => "B0",
            BiRads::B1 => "B1",
            BiRads::B2 => "B2",
            BiRads::B3 => "B3",
            BiRads::B4 => "B4",
            BiRads::B4a => "B4a",
            BiRads::B4b => "B4b",
            BiRads::B4c => "B4c",
            BiRads::B5 => "B5",
            BiRads::B6 => "B6",
        }
    }
}

impl fmt::Display for BiRads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BiRads {
    type Err = ModelError;

    /// Accepts `"4a"`, `"B4a"`, `"BI-RADS 4a"` and case variants.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let t = t
            .strip_prefix("bi-rads")
            .or_else(|| t.strip_prefix("birads"))
            .or_else(|| t.strip_prefix('b'))
            .unwrap_or(&t)
            .trim();
        let b = match t {
            "0" => BiRads::B0,
            "1" => BiRads::B1,
            "2" => BiRads::B2,
            "3" => BiRads::B3,
            "4" => BiRads::B4,
            "4a" => BiRads::B4a,
            "4b" => BiRads::B4b,
            "4c" => BiRads::B4c,
            "5" => BiRads::B5,
            "6" => BiRads::B6,
            _ => {
                return Err(ModelError::Parse {
                    what: "BI-RADS category",
                    token: s.to_string(),
                })
            }
        };
        Ok(b)
    }
}

/// Biopsy-confirmed ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pathology {
    Benign,
    Malignant,
}

impl Pathology {
    pub const BOTH: [Pathology; 2] = [Pathology::Benign, Pathology::Malignant];

    /// Index of this class in the network's two-unit output.
    pub fn index(self) -> usize {
        match self {
            Pathology::Benign => 0,
            Pathology::Malignant => 1,
        }
    }

    pub fn other(self) -> Pathology {
        match self {
            Pathology::Benign => Pathology::Malignant,
            Pathology::Malignant => Pathology::Benign,
        }
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathology::Benign => "Benign",
            Pathology::Malignant => "Malignant",
        })
    }
}

impl FromStr for Pathology {
    type Err = ModelError;

    /// `BENIGN_WITHOUT_CALLBACK` folds into [`Pathology::Benign`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BENIGN" | "BENIGN_WITHOUT_CALLBACK" => Ok(Pathology::Benign),
            "MALIGNANT" => Ok(Pathology::Malignant),
            _ => Err(ModelError::Parse {
                what: "pathology",
                token: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Shape {
    Oval,
    Round,
    Irregular,
    Lobulated,
    Other,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Oval,
        Shape::Round,
        Shape::Irregular,
        Shape::Lobulated,
        Shape::Other,
    ];

    fn token(self) -> &'static str {
        match self {
            Shape::Oval => "oval",
            Shape::Round => "round",
            Shape::Irregular => "irregular",
            Shape::Lobulated => "lobulated",
            Shape::Other => "other",
        }
    }

    fn from_token(t: &str) -> Shape {
        match t {
            "OVAL" => Shape::Oval,
            "ROUND" => Shape::Round,
            "IRREGULAR" => Shape::Irregular,
            "LOBULATED" => Shape::Lobulated,
            _ => Shape::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Margin {
    Circumscribed,
    Obscured,
    Microlobulated,
    Spiculated,
    IllDefined,
    Other,
}

impl Margin {
    pub const ALL: [Margin; 6] = [
        Margin::Circumscribed,
        Margin::Obscured,
        Margin::Microlobulated,
        Margin::Spiculated,
        Margin::IllDefined,
        Margin::Other,
    ];

    fn token(self) -> &'static str {
        match self {
            Margin::Circumscribed => "circumscribed",
            Margin::Obscured => "obscured",
            Margin::Microlobulated => "microlobulated",
            Margin::Spiculated => "spiculated",
            Margin::IllDefined => "ill_defined",
            Margin::Other => "other",
        }
    }

    fn from_token(t: &str) -> Margin {
        match t {
            "CIRCUMSCRIBED" => Margin::Circumscribed,
            "OBSCURED" => Margin::Obscured,
            "MICROLOBULATED" => Margin::Microlobulated,
            "SPICULATED" => Margin::Spiculated,
            "ILL_DEFINED" | "ILLDEFINED" | "ILL DEFINED" => Margin::IllDefined,
            _ => Margin::Other,
        }
    }
}

/// Splits a hyphen-joined descriptor string into its recognized parts.
/// Unrecognized and empty tokens map to `Other`; the result is never empty.
pub fn parse_shapes(s: &str) -> BTreeSet<Shape> {
    split_compound(s).map(|t| Shape::from_token(&t)).collect()
}

/// See [`parse_shapes`].
pub fn parse_margins(s: &str) -> BTreeSet<Margin> {
    split_compound(s).map(|t| Margin::from_token(&t)).collect()
}

fn split_compound(s: &str) -> impl Iterator<Item = String> + '_ {
    let mut parts: Vec<String> = s
        .split('-')
        .map(|t| t.trim().to_ascii_uppercase())
        .filter(|t| !t.is_empty())
        .collect();
    if parts.is_empty() {
        parts.push(String::new());
    }
    parts.into_iter()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

impl FromStr for View {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CC" => Ok(View::CC),
            "MLO" => Ok(View::MLO),
            _ => Err(ModelError::Parse {
                what: "view",
                token: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::CC => "CC",
            View::MLO => "MLO",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "test" | "testing" => Ok(Split::Test),
            _ => Err(ModelError::Parse {
                what: "split",
                token: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Morphological descriptors of one mass.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MorphFeatures {
    shape: BTreeSet<Shape>,
    margins: BTreeSet<Margin>,
    density: u8,
    subtlety: u8,
    view: View,
}

impl MorphFeatures {
    pub fn new(
        shape: BTreeSet<Shape>,
        margins: BTreeSet<Margin>,
        density: u8,
        subtlety: u8,
        view: View,
    ) -> Result<Self, ModelError> {
        if shape.is_empty() {
            return Err(ModelError::InvalidFeatures("empty shape set".into()));
        }
        if margins.is_empty() {
            return Err(ModelError::InvalidFeatures("empty margin set".into()));
        }
        if !(1..=4).contains(&density) {
            return Err(ModelError::InvalidFeatures(format!(
                "breast density {density} outside 1..=4"
            )));
        }
        if !(1..=5).contains(&subtlety) {
            return Err(ModelError::InvalidFeatures(format!(
                "subtlety {subtlety} outside 1..=5"
            )));
        }
        Ok(Self {
            shape,
            margins,
            density,
            subtlety,
            view,
        })
    }

    pub fn shape(&self) -> &BTreeSet<Shape> {
        &self.shape
    }

    pub fn margins(&self) -> &BTreeSet<Margin> {
        &self.margins
    }

    pub fn density(&self) -> u8 {
        self.density
    }

    pub fn subtlety(&self) -> u8 {
        self.subtlety
    }

    pub fn view(&self) -> View {
        self.view
    }

    /// Hyphen-joined shape descriptor, as it appears in lesion CSVs.
    pub fn shape_string(&self) -> String {
        join_tokens(self.shape.iter().map(|s| s.token()))
    }

    pub fn margins_string(&self) -> String {
        join_tokens(self.margins.iter().map(|m| m.token()))
    }
}

fn join_tokens<'a>(it: impl Iterator<Item = &'a str>) -> String {
    it.map(|t| t.to_ascii_uppercase())
        .collect::<Vec<_>>()
        .join("-")
}

/// One case of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    pub case_id: String,
    pub features: MorphFeatures,
    pub radiologist_birads: BiRads,
    pub pathology: Pathology,
    pub split: Split,
}

/// Outcome of checking a BI-RADS category against pathology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Consistency {
    Consistent,
    Inconsistent,
    /// Un-subdivided B4 spans both pathologies and cannot be audited.
    Indeterminate,
}

/// Pathology class a scored category commits to, or `None` for B4.
pub fn implied_pathology(b: BiRads) -> Result<Option<Pathology>, ModelError> {
    match b {
        BiRads::B2 | BiRads::B3 | BiRads::B4a | BiRads::B4b => Ok(Some(Pathology::Benign)),
        BiRads::B4c | BiRads::B5 => Ok(Some(Pathology::Malignant)),
        BiRads::B4 => Ok(None),
        BiRads::B0 | BiRads::B1 | BiRads::B6 => Err(ModelError::UnscoredCategory(b)),
    }
}

/// Benign truth must land in {B2, B3, B4a, B4b}; malignant truth in {B4c, B5}.
pub fn consistent_with_pathology(b: BiRads, p: Pathology) -> Result<Consistency, ModelError> {
    Ok(match implied_pathology(b)? {
        None => Consistency::Indeterminate,
        Some(q) if q == p => Consistency::Consistent,
        Some(_) => Consistency::Inconsistent,
    })
}

/// One position of the encoded feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Slot {
    Shape(Shape),
    Margin(Margin),
    Density,
    Subtlety,
    /// 1.0 for MLO, 0.0 for CC.
    ViewMlo,
    /// Free-form numeric input not derived from morphology.
    Raw(String),
}

impl Slot {
    pub fn name(&self) -> String {
        match self {
            Slot::Shape(s) => format!("shape:{}", s.token()),
            Slot::Margin(m) => format!("margin:{}", m.token()),
            Slot::Density => "density".into(),
            Slot::Subtlety => "subtlety".into(),
            Slot::ViewMlo => "view:mlo".into(),
            Slot::Raw(n) => format!("raw:{n}"),
        }
    }

    pub fn parse(name: &str) -> Result<Slot, ModelError> {
        let bad = || ModelError::Parse {
            what: "layout slot",
            token: name.to_string(),
        };
        if let Some(t) = name.strip_prefix("shape:") {
            return Shape::ALL
                .into_iter()
                .find(|s| s.token() == t)
                .map(Slot::Shape)
                .ok_or_else(bad);
        }
        if let Some(t) = name.strip_prefix("margin:") {
            return Margin::ALL
                .into_iter()
                .find(|m| m.token() == t)
                .map(Slot::Margin)
                .ok_or_else(bad);
        }
        if let Some(t) = name.strip_prefix("raw:") {
            return Ok(Slot::Raw(t.to_string()));
        }
        match name {
            "density" => Ok(Slot::Density),
            "subtlety" => Ok(Slot::Subtlety),
            "view:mlo" => Ok(Slot::ViewMlo),
            _ => Err(bad()),
        }
    }

    pub fn is_multi_hot(&self) -> bool {
        matches!(self, Slot::Shape(_) | Slot::Margin(_))
    }
}

/// Ordered, versioned description of what each feature slot encodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    version: String,
    slots: Vec<Slot>,
    hash: String,
}

pub const STANDARD_LAYOUT_VERSION: &str = "morph-v1";

impl FeatureLayout {
    pub fn new(version: impl Into<String>, slots: Vec<Slot>) -> Self {
        let version = version.into();
        let hash = layout_hash(&version, &slots);
        Self {
            version,
            slots,
            hash,
        }
    }

    /// Shape multi-hot, margin multi-hot, density, subtlety, view.
    pub fn standard() -> Self {
        let mut slots: Vec<Slot> = Shape::ALL.into_iter().map(Slot::Shape).collect();
        slots.extend(Margin::ALL.into_iter().map(Slot::Margin));
        slots.extend([Slot::Density, Slot::Subtlety, Slot::ViewMlo]);
        Self::new(STANDARD_LAYOUT_VERSION, slots)
    }

    /// Layout of `n` anonymous numeric inputs `raw:x0..`.
    pub fn raw(n: usize) -> Self {
        Self::new(
            format!("raw-{n}"),
            (0..n).map(|i| Slot::Raw(format!("x{i}"))).collect(),
        )
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Short content hash of version and slot order.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn slot_names(&self) -> Vec<String> {
        self.slots.iter().map(Slot::name).collect()
    }

    pub fn multi_hot_indices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_multi_hot())
            .map(|(i, _)| i)
            .collect()
    }

    fn position(&self, slot: &Slot) -> Result<usize, ModelError> {
        self.slots
            .iter()
            .position(|s| s == slot)
            .ok_or_else(|| ModelError::MissingSlot(slot.name()))
    }

    /// Wraps raw values as a vector of this layout.
    pub fn vector<T: Scalar>(&self, values: Vec<T>) -> Result<FeatureVector<T>, ModelError> {
        if values.len() != self.len() {
            return Err(ModelError::InvalidFeatures(format!(
                "vector of length {} for layout {} with {} slots",
                values.len(),
                self.hash,
                self.len()
            )));
        }
        Ok(FeatureVector {
            values,
            layout_hash: self.hash.clone(),
        })
    }
}

fn layout_hash(version: &str, slots: &[Slot]) -> String {
    let mut h = Sha256::new();
    h.update(version.as_bytes());
    for s in slots {
        h.update(b"\n");
        h.update(s.name().as_bytes());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Network input tagged with the hash of the layout that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    values: Vec<T>,
    layout_hash: String,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn layout_hash(&self) -> &str {
        &self.layout_hash
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout tag, new values. Used by resampling.
    pub fn with_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout_hash: self.layout_hash.clone(),
        }
    }
}

/// Encodes descriptors into `layout`: multi-hot shape and margin slots,
/// density as `(d-1)/3`, subtlety as `(s-1)/4`, view as an MLO indicator.
pub fn encode_features<T: Scalar>(
    features: &MorphFeatures,
    layout: &FeatureLayout,
) -> Result<FeatureVector<T>, ModelError> {
    let mut values = vec![T::zero(); layout.len()];
    for s in &features.shape {
        values[layout.position(&Slot::Shape(*s))?] = T::one();
    }
    for m in &features.margins {
        values[layout.position(&Slot::Margin(*m))?] = T::one();
    }
    for (i, slot) in layout.slots.iter().enumerate() {
        match slot {
            Slot::Shape(_) | Slot::Margin(_) => {}
            Slot::Density => {
                values[i] = T::lit(f64::from(features.density - 1) / 3.0);
            }
            Slot::Subtlety => {
                values[i] = T::lit(f64::from(features.subtlety - 1) / 4.0);
            }
            Slot::ViewMlo => {
                values[i] = if features.view == View::MLO {
                    T::one()
                } else {
                    T::zero()
                };
            }
            Slot::Raw(_) => return Err(ModelError::UnencodableSlot(slot.name())),
        }
    }
    layout.vector(values)
}

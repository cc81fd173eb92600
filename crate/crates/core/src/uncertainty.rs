//! Predictive entropy and the entropy-band assignment of BI-RADS scores.
//!
//! BI-RADS bands are defined on the probability of malignancy:
//!
//! | category | p (malignant)        |
//! |----------|----------------------|
//! | B2       | `p <= eps` (≅ 0)     |
//! | B3       | `eps < p <= 0.02`    |
//! | B4a      | `0.02 < p <= 0.10`   |
//! | B4b      | `0.10 < p < 0.50`    |
//! | B4c      | `0.50 <= p < 0.95`   |
//! | B5       | `p >= 0.95`          |
//!
//! Binary entropy (base 2) is symmetric around 0.5, so the same band edges
//! become entropy thresholds on each side of the predicted label. The
//! entropy route is what the pipeline uses; the probability route is its
//! bijective counterpart and serves as a cross-check.

use serde::{Deserialize, Serialize};

use crate::mlp::PredictiveDistribution;
use crate::model::{BiRads, Pathology};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("predictive entropy {0} outside [0, 1]")]
    EntropyOutOfRange(f64),
    #[error("B2 probability epsilon {0} must lie in [0, 0.02)")]
    InvalidEpsilon(f64),
}

/// Upper edge of the B3 band in malignancy probability.
pub const P_B3_MAX: f64 = 0.02;
/// Upper edge of the B4a band.
pub const P_B4A_MAX: f64 = 0.10;
/// Lower edge of the B5 band.
pub const P_B5_MIN: f64 = 0.95;
/// Probabilities at or above this belong to the malignant branch.
pub const P_MALIGNANT_BRANCH: f64 = 0.5;

/// Slack allowed on the `[0, 1]` entropy domain.
const ENTROPY_SLACK: f64 = 1e-9;

/// `-p log2 p` with `0 log 0 = 0`.
fn entropy_term<T: Scalar>(p: T) -> T {
    if p <= T::zero() {
        T::zero()
    } else {
        -p * p.log2()
    }
}

/// Base-2 Shannon entropy of the two-class predictive distribution.
pub fn predictive_entropy<T: Scalar>(dist: &PredictiveDistribution<T>) -> T {
    entropy_term(dist.p_benign()) + entropy_term(dist.p_malignant())
}

/// Entropy of `(1 - p, p)`, evaluated exactly as [`predictive_entropy`]
/// would evaluate `PredictiveDistribution::from_malignant(p)`.
pub fn binary_entropy<T: Scalar>(p_malignant: T) -> T {
    entropy_term(T::one() - p_malignant) + entropy_term(p_malignant)
}

/// Entropy cut-offs separating the BI-RADS bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandThresholds<T> {
    /// B2 / B3 edge on the benign side.
    pub h_b2: T,
    /// B3 / B4a edge, `H2(0.02)`.
    pub h_b3: T,
    /// B4a / B4b edge, `H2(0.10)`.
    pub h_b4a: T,
    /// B5 / B4c edge on the malignant side, `H2(0.05)`.
    pub h_b5: T,
}

impl<T: Scalar> BandThresholds<T> {
    /// Full-precision thresholds with the B2 edge at `H2(b2_prob_epsilon)`.
    pub fn with_b2_epsilon(b2_prob_epsilon: T) -> Self {
        Self {
            h_b2: binary_entropy(b2_prob_epsilon),
            h_b3: binary_entropy(T::lit(P_B3_MAX)),
            h_b4a: binary_entropy(T::lit(P_B4A_MAX)),
            // evaluated at p = 0.95 rather than 0.05 so a distribution sitting
            // exactly on the edge reproduces the threshold bit for bit
            h_b5: binary_entropy(T::lit(P_B5_MIN)),
        }
    }

    /// `h_b2 < h_b3 < h_b4a <= 1` and `0 < h_b5 < h_b4a`.
    pub fn is_ordered(&self) -> bool {
        T::zero() <= self.h_b2
            && self.h_b2 < self.h_b3
            && self.h_b3 < self.h_b4a
            && self.h_b4a <= T::one()
            && T::zero() < self.h_b5
            && self.h_b5 < self.h_b4a
    }
}

/// Number of stochastic passes the default B2 epsilon is tuned for.
pub const DEFAULT_PASSES: usize = 100;

/// Largest epsilon the `1 / (2T)` default may reach.
pub const MAX_DEFAULT_EPSILON: f64 = 0.01;

/// Default B2 tolerance for a `passes`-pass estimator: `1 / (2T)`, capped at
/// [`MAX_DEFAULT_EPSILON`] so it stays inside the B3 band.
pub fn default_b2_epsilon(passes: usize) -> f64 {
    (1.0 / (2.0 * passes.max(1) as f64)).min(MAX_DEFAULT_EPSILON)
}

/// Thresholds for the default configuration (`T = 100`).
pub fn derive_thresholds<T: Scalar>() -> BandThresholds<T> {
    BandThresholds::with_b2_epsilon(T::lit(default_b2_epsilon(DEFAULT_PASSES)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig<T> {
    thresholds: BandThresholds<T>,
    b2_prob_epsilon: T,
}

impl<T: Scalar> MapperConfig<T> {
    pub fn new(b2_prob_epsilon: T) -> Result<Self, UncertaintyError> {
        if !(b2_prob_epsilon >= T::zero() && b2_prob_epsilon < T::lit(P_B3_MAX)) {
            return Err(UncertaintyError::InvalidEpsilon(
                b2_prob_epsilon.to_f64_lossless(),
            ));
        }
        Ok(Self {
            thresholds: BandThresholds::with_b2_epsilon(b2_prob_epsilon),
            b2_prob_epsilon,
        })
    }

    pub fn for_passes(passes: usize) -> Self {
        Self::new(T::lit(default_b2_epsilon(passes))).expect("default epsilon below 0.02")
    }

    pub fn thresholds(&self) -> &BandThresholds<T> {
        &self.thresholds
    }

    pub fn b2_prob_epsilon(&self) -> T {
        self.b2_prob_epsilon
    }
}

impl<T: Scalar> Default for MapperConfig<T> {
    fn default() -> Self {
        Self::for_passes(DEFAULT_PASSES)
    }
}

/// Band lookup on the malignancy probability.
pub fn map_birads_from_prob<T: Scalar>(
    dist: &PredictiveDistribution<T>,
    cfg: &MapperConfig<T>,
) -> BiRads {
    let p = dist.p_malignant();
    if p <= cfg.b2_prob_epsilon {
        BiRads::B2
    } else if p <= T::lit(P_B3_MAX) {
        BiRads::B3
    } else if p <= T::lit(P_B4A_MAX) {
        BiRads::B4a
    } else if p < T::lit(P_MALIGNANT_BRANCH) {
        BiRads::B4b
    } else if p < T::lit(P_B5_MIN) {
        BiRads::B4c
    } else {
        BiRads::B5
    }
}

/// Entropy-band assignment conditioned on the predicted label.
pub fn map_birads_from_entropy<T: Scalar>(
    predicted: Pathology,
    entropy: T,
    cfg: &MapperConfig<T>,
) -> Result<BiRads, UncertaintyError> {
    let slack = T::lit(ENTROPY_SLACK);
    if !(entropy >= -slack && entropy <= T::one() + slack) {
        return Err(UncertaintyError::EntropyOutOfRange(
            entropy.to_f64_lossless(),
        ));
    }
    let th = &cfg.thresholds;
    Ok(match predicted {
        Pathology::Benign => {
            if entropy <= th.h_b2 {
                BiRads::B2
            } else if entropy <= th.h_b3 {
                BiRads::B3
            } else if entropy <= th.h_b4a {
                BiRads::B4a
            } else {
                BiRads::B4b
            }
        }
        Pathology::Malignant => {
            if entropy <= th.h_b5 {
                BiRads::B5
            } else {
                BiRads::B4c
            }
        }
    })
}

/// Entropy of `dist` and the category it earns.
pub fn assign_birads<T: Scalar>(
    dist: &PredictiveDistribution<T>,
    cfg: &MapperConfig<T>,
) -> Result<(T, BiRads), UncertaintyError> {
    let h = predictive_entropy(dist);
    map_birads_from_entropy(dist.predicted_label(), h, cfg).map(|b| (h, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{consistent_with_pathology, Consistency};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(p: f64) -> PredictiveDistribution<f64> {
        PredictiveDistribution::from_malignant(p).unwrap()
    }

    /// Independent evaluation: natural log divided by ln 2.
    fn h2_oracle(p: f64) -> f64 {
        let t = |q: f64| {
            if q == 0.0 {
                0.0
            } else {
                -q * q.ln() / std::f64::consts::LN_2
            }
        };
        t(p) + t(1.0 - p)
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(predictive_entropy(&dist(0.5)), 1.0);
        assert_eq!(predictive_entropy(&dist(0.0)), 0.0);
        assert_eq!(predictive_entropy(&dist(1.0)), 0.0);
        assert_abs_diff_eq!(predictive_entropy(&dist(0.02)), 0.1414, epsilon = 5e-5);
        assert_abs_diff_eq!(
            predictive_entropy(&dist(0.02)),
            h2_oracle(0.02),
            epsilon = 1e-15
        );
    }

    #[test]
    fn thresholds_match_band_edges() {
        let th = derive_thresholds::<f64>();
        assert_abs_diff_eq!(th.h_b4a, 0.4690, epsilon = 5e-4);
        assert_abs_diff_eq!(th.h_b5, 0.2864, epsilon = 5e-4);
        assert_abs_diff_eq!(th.h_b3, 0.1414, epsilon = 5e-4);
        assert_abs_diff_eq!(th.h_b3, h2_oracle(0.02), epsilon = 1e-15);
        assert_abs_diff_eq!(th.h_b4a, h2_oracle(0.10), epsilon = 1e-15);
        assert_abs_diff_eq!(th.h_b5, h2_oracle(0.05), epsilon = 1e-15);
        assert_abs_diff_eq!(th.h_b2, h2_oracle(0.005), epsilon = 1e-15);
        assert!(th.is_ordered());
        assert!(MapperConfig::<f64>::new(0.0)
            .unwrap()
            .thresholds()
            .is_ordered());
    }

    #[test]
    fn log_base_is_two() {
        // base 2 is the only base giving H(0.5) = 1 and these rounded constants
        let th = derive_thresholds::<f64>();
        assert_eq!(binary_entropy(0.5f64), 1.0);
        assert_eq!((th.h_b3 * 100.0).round() / 100.0, 0.14);
        assert_eq!((th.h_b4a * 1000.0).round() / 1000.0, 0.469);
        assert_eq!((th.h_b5 * 1000.0).round() / 1000.0, 0.286);
    }

    #[test]
    fn default_epsilon() {
        assert_eq!(default_b2_epsilon(100), 0.005);
        assert_eq!(default_b2_epsilon(10), 0.01);
        assert_eq!(default_b2_epsilon(0), 0.01);
        assert!(MapperConfig::<f64>::new(0.02).is_err());
        assert!(MapperConfig::<f64>::new(-0.1).is_err());
        assert_eq!(
            MapperConfig::<f64>::for_passes(1000).b2_prob_epsilon(),
            0.0005
        );
    }

    #[test]
    fn prob_mapping_examples() {
        let cfg = MapperConfig::default();
        assert_eq!(map_birads_from_prob(&dist(0.97), &cfg), BiRads::B5);
        assert_eq!(map_birads_from_prob(&dist(0.0), &cfg), BiRads::B2);
        assert_eq!(map_birads_from_prob(&dist(0.05), &cfg), BiRads::B4a);
        assert_eq!(map_birads_from_prob(&dist(0.02), &cfg), BiRads::B3);
        assert_eq!(map_birads_from_prob(&dist(0.1), &cfg), BiRads::B4a);
        assert_eq!(map_birads_from_prob(&dist(0.3), &cfg), BiRads::B4b);
        assert_eq!(map_birads_from_prob(&dist(0.5), &cfg), BiRads::B4c);
        assert_eq!(map_birads_from_prob(&dist(0.95), &cfg), BiRads::B5);
        assert_eq!(map_birads_from_prob(&dist(0.005), &cfg), BiRads::B2);
        assert_eq!(map_birads_from_prob(&dist(0.0051), &cfg), BiRads::B3);
    }

    #[test]
    fn entropy_mapping_examples() {
        let cfg = MapperConfig::default();
        assert_abs_diff_eq!(binary_entropy(0.97f64), 0.194, epsilon = 5e-4);
        assert_eq!(
            map_birads_from_entropy(Pathology::Malignant, 0.19, &cfg),
            Ok(BiRads::B5)
        );
        assert_eq!(map_birads_from_prob(&dist(0.97), &cfg), BiRads::B5);
        assert_eq!(
            map_birads_from_entropy(Pathology::Benign, 0.0, &cfg),
            Ok(BiRads::B2)
        );
        assert_eq!(
            map_birads_from_entropy(Pathology::Benign, 0.30, &cfg),
            Ok(BiRads::B4a)
        );
        assert_eq!(
            map_birads_from_entropy(Pathology::Benign, 0.9, &cfg),
            Ok(BiRads::B4b)
        );
        assert_eq!(
            map_birads_from_entropy(Pathology::Malignant, 0.9, &cfg),
            Ok(BiRads::B4c)
        );
        assert_eq!(
            map_birads_from_entropy(Pathology::Benign, 1.0 + 1e-10, &cfg),
            Ok(BiRads::B4b)
        );
        assert!(map_birads_from_entropy(Pathology::Benign, 1.01, &cfg).is_err());
        assert!(map_birads_from_entropy(Pathology::Benign, -0.01, &cfg).is_err());
        assert!(map_birads_from_entropy(Pathology::Benign, f64::NAN, &cfg).is_err());
    }

    #[test]
    fn shared_endpoint_goes_to_b5() {
        let cfg = MapperConfig::<f64>::default();
        let h = cfg.thresholds().h_b5;
        assert_eq!(
            map_birads_from_entropy(Pathology::Malignant, h, &cfg),
            Ok(BiRads::B5)
        );
    }

    #[test]
    fn branch_agreement_grid() {
        for cfg in [
            MapperConfig::default(),
            MapperConfig::new(0.0).unwrap(),
            MapperConfig::for_passes(10),
        ] {
            for i in 0..=10_000u32 {
                let d = dist(f64::from(i) / 10_000.0);
                let (_, by_entropy) = assign_birads(&d, &cfg).unwrap();
                assert_eq!(
                    by_entropy,
                    map_birads_from_prob(&d, &cfg),
                    "p = {}",
                    d.p_malignant()
                );
            }
        }
    }

    #[test]
    fn monotone_and_pathology_consistent() {
        let cfg = MapperConfig::default();
        let mut last = 0;
        for i in 0..=10_000u32 {
            let p = f64::from(i) / 10_000.0;
            let b = map_birads_from_prob(&dist(p), &cfg);
            let rank = BiRads::MAPPED.iter().position(|&m| m == b).unwrap();
            assert!(rank >= last);
            last = rank;
            let truth = if p < 0.5 {
                Pathology::Benign
            } else {
                Pathology::Malignant
            };
            assert_eq!(
                consistent_with_pathology(b, truth),
                Ok(Consistency::Consistent)
            );
        }
        assert_eq!(last, BiRads::MAPPED.len() - 1);
    }

    proptest! {
        #[test]
        fn entropy_symmetric_and_bounded(p in 0.0f64..=1.0) {
            let a = PredictiveDistribution::new(p, 1.0 - p).unwrap();
            let b = PredictiveDistribution::new(1.0 - p, p).unwrap();
            prop_assert_eq!(predictive_entropy(&a), predictive_entropy(&b));
            let h = predictive_entropy(&a);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn branch_agreement_random(p in 0.0f64..=1.0, eps in 0.0f64..0.019) {
            let cfg = MapperConfig::new(eps).unwrap();
            let d = dist(p);
            prop_assert_eq!(assign_birads(&d, &cfg).unwrap().1, map_birads_from_prob(&d, &cfg));
        }
    }

    #[test]
    fn f32_thresholds() {
        let th = derive_thresholds::<f32>();
        assert!((th.h_b4a - 0.469).abs() < 1e-3);
        assert!(th.is_ordered());
    }
}

//! Context encoding for the linear policies.
//!
//! Layout: `[1.0 (intercept), one-hot block per categorical, scaled value per
//! numeric]`, features in schema order. Categoricals take an integer index in
//! `[0, cardinality)`; numerics are min-max scaled from `[lo, hi]` to `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FeatureKind, FeatureSpec};

/// Raw request context: feature name to value.
pub type RawContext = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Intercept-only context, used by bandits without a schema.
    pub fn intercept() -> Self {
        ContextVector(vec![1.0])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("unknown context feature {0:?}")]
    UnknownFeature(String),
    #[error("context feature {0:?} is out of range")]
    OutOfRange(String),
    #[error("missing context feature {0:?}")]
    MissingFeature(String),
}

/// Encoded dimension of a schema: `1 + Σ cardinalities + #numerics`.
pub fn encoded_dim(schema: &[FeatureSpec]) -> usize {
    1 + schema
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Categorical { cardinality } => cardinality,
            FeatureKind::Numeric { .. } => 1,
        })
        .sum::<usize>()
}

pub fn encode_context(schema: &[FeatureSpec], raw: &RawContext) -> Result<ContextVector, EncodeError> {
    if let Some(unknown) = raw.keys().find(|k| !schema.iter().any(|f| &f.name == *k)) {
        return Err(EncodeError::UnknownFeature(unknown.clone()));
    }
    let mut out = Vec::with_capacity(encoded_dim(schema));
    out.push(1.0);
    for f in schema {
        let v = *raw
            .get(&f.name)
            .ok_or_else(|| EncodeError::MissingFeature(f.name.clone()))?;
        if !v.is_finite() {
            return Err(EncodeError::OutOfRange(f.name.clone()));
        }
        match f.kind {
            FeatureKind::Categorical { cardinality } => {
                if v < 0.0 || v.fract() != 0.0 || v >= cardinality as f64 {
                    return Err(EncodeError::OutOfRange(f.name.clone()));
                }
                let start = out.len();
                out.resize(start + cardinality, 0.0);
                out[start + v as usize] = 1.0;
            }
            FeatureKind::Numeric { lo, hi } => {
                if v < lo || v > hi {
                    return Err(EncodeError::OutOfRange(f.name.clone()));
                }
                out.push((v - lo) / (hi - lo));
            }
        }
    }
    Ok(ContextVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(pairs: &[(&str, f64)]) -> RawContext {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn one_hot_first_category() {
        let s = [FeatureSpec::categorical("device", 2)];
        let x = encode_context(&s, &raw(&[("device", 0.0)])).unwrap();
        assert_eq!(x.0, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn numeric_midpoint() {
        let s = [FeatureSpec::numeric("hour", 0.0, 24.0)];
        let x = encode_context(&s, &raw(&[("hour", 12.0)])).unwrap();
        assert_eq!(x.0, vec![1.0, 0.5]);
    }

    #[test]
    fn mixed_schema() {
        let s = [
            FeatureSpec::categorical("pos", 3),
            FeatureSpec::numeric("price", 0.0, 100.0),
        ];
        let x = encode_context(&s, &raw(&[("pos", 2.0), ("price", 25.0)])).unwrap();
        assert_eq!(x.0, vec![1.0, 0.0, 0.0, 1.0, 0.25]);
        assert_eq!(x.dim(), encoded_dim(&s));
    }

    #[test]
    fn errors_name_the_feature() {
        let s = [
            FeatureSpec::categorical("pos", 3),
            FeatureSpec::numeric("price", 0.0, 100.0),
        ];
        assert_eq!(
            encode_context(&s, &raw(&[("pos", 3.0), ("price", 1.0)])),
            Err(EncodeError::OutOfRange("pos".into()))
        );
        assert_eq!(
            encode_context(&s, &raw(&[("pos", 1.5), ("price", 1.0)])),
            Err(EncodeError::OutOfRange("pos".into()))
        );
        assert_eq!(
            encode_context(&s, &raw(&[("pos", 1.0), ("price", 101.0)])),
            Err(EncodeError::OutOfRange("price".into()))
        );
        assert_eq!(
            encode_context(&s, &raw(&[("pos", 1.0)])),
            Err(EncodeError::MissingFeature("price".into()))
        );
        assert_eq!(
            encode_context(&s, &raw(&[("pos", 1.0), ("price", 1.0), ("zip", 1.0)])),
            Err(EncodeError::UnknownFeature("zip".into()))
        );
    }

    #[test]
    fn empty_schema_is_intercept() {
        assert_eq!(
            encode_context(&[], &RawContext::new()).unwrap(),
            ContextVector::intercept()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encoding_invariants(cards in proptest::collection::vec(1usize..6, 0..4),
                                   nums in proptest::collection::vec(0.0f64..1.0, 0..3),
                                   picks in proptest::collection::vec(0usize..100, 4)) {
                let mut schema = Vec::new();
                let mut r = RawContext::new();
                for (i, &c) in cards.iter().enumerate() {
                    schema.push(FeatureSpec::categorical(format!("c{i}"), c));
                    r.insert(format!("c{i}"), (picks[i] % c) as f64);
                }
                for (i, &u) in nums.iter().enumerate() {
                    schema.push(FeatureSpec::numeric(format!("n{i}"), -5.0, 5.0));
                    r.insert(format!("n{i}"), -5.0 + 10.0 * u);
                }
                let x = encode_context(&schema, &r).unwrap();
                let again = encode_context(&schema, &r).unwrap();
                prop_assert_eq!(
                    serde_json::to_vec(&x).unwrap(),
                    serde_json::to_vec(&again).unwrap()
                );
                prop_assert_eq!(x.dim(), encoded_dim(&schema));
                prop_assert_eq!(x.0[0], 1.0);
                prop_assert!(x.0.iter().all(|v| v.is_finite()));
                let mut at = 1;
                for &c in &cards {
                    let block: f64 = x.0[at..at + c].iter().sum();
                    prop_assert_eq!(block, 1.0);
                    at += c;
                }
            }
        }
    }
}

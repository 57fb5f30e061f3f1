//! Class taxonomy: names, average sizes, sweep aggregation windows and
//! tracking radii.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregationStrategy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("duplicate class `{0}`")]
    Duplicate(String),
    #[error("class `{name}`: {msg}")]
    Invalid { name: String, msg: String },
    #[error("taxonomy has no classes")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Average (l, w, h) in meters.
    pub avg_dims: [f64; 3],
    #[serde(default)]
    pub aggregation: AggregationStrategy,
    #[serde(default = "default_match_radius")]
    pub match_radius: f64,
}

fn default_match_radius() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyDoc", into = "TaxonomyDoc")]
pub struct Taxonomy {
    classes: Vec<ClassSpec>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyDoc {
    classes: Vec<ClassSpec>,
}

impl TryFrom<TaxonomyDoc> for Taxonomy {
    type Error = TaxonomyError;
    fn try_from(doc: TaxonomyDoc) -> Result<Self, Self::Error> {
        Taxonomy::new(doc.classes)
    }
}

impl From<Taxonomy> for TaxonomyDoc {
    fn from(t: Taxonomy) -> Self {
        TaxonomyDoc { classes: t.classes }
    }
}

impl Taxonomy {
    pub fn new(classes: Vec<ClassSpec>) -> Result<Self, TaxonomyError> {
        if classes.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if c.avg_dims.iter().any(|d| !d.is_finite() || *d <= 0.0) {
                return Err(TaxonomyError::Invalid {
                    name: c.name.clone(),
                    msg: "average dimensions must be positive".into(),
                });
            }
            if !c.match_radius.is_finite() || c.match_radius < 0.0 {
                return Err(TaxonomyError::Invalid {
                    name: c.name.clone(),
                    msg: "match radius must be nonnegative".into(),
                });
            }
            if index.insert(c.name.clone(), i).is_some() {
                return Err(TaxonomyError::Duplicate(c.name.clone()));
            }
        }
        Ok(Self { classes, index })
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ClassSpec, TaxonomyError> {
        self.index
            .get(name)
            .map(|&i| &self.classes[i])
            .ok_or_else(|| TaxonomyError::UnknownClass(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }
}

impl Default for Taxonomy {
    /// Eighteen driving-scene classes. Aggregation windows are the best
    /// per-class past/future sweep counts from a per-class sweep study;
    /// average sizes are typical real-world dimensions.
    fn default() -> Self {
        let c = |name: &str, dims: [f64; 3], past: u32, future: u32| ClassSpec {
            name: name.to_string(),
            avg_dims: dims,
            aggregation: AggregationStrategy { past, future },
            match_radius: 2.0,
        };
        Taxonomy::new(vec![
            c("car", [4.6, 1.9, 1.7], 0, 0),
            c("truck", [6.9, 2.5, 2.8], 1, 1),
            c("trailer", [12.0, 2.9, 3.9], 2, 0),
            c("bus", [11.1, 2.9, 3.5], 0, 0),
            c("construction-vehicle", [6.4, 2.8, 3.2], 0, 0),
            c("bicycle", [1.7, 0.6, 1.3], 0, 2),
            c("motorcycle", [2.1, 0.8, 1.5], 1, 1),
            c("emergency-vehicle", [5.5, 2.2, 2.4], 6, 0),
            c("adult", [0.7, 0.7, 1.75], 1, 1),
            c("child", [0.5, 0.5, 1.2], 6, 0),
            c("police-officer", [0.7, 0.7, 1.8], 1, 1),
            c("construction-worker", [0.7, 0.7, 1.8], 0, 2),
            c("stroller", [1.0, 0.6, 1.1], 0, 10),
            c("personal-mobility", [1.2, 0.6, 1.4], 1, 1),
            c("pushable-pullable", [0.8, 0.6, 1.0], 0, 2),
            c("debris", [1.0, 0.8, 0.5], 0, 0),
            c("traffic-cone", [0.4, 0.4, 0.9], 0, 2),
            c("barrier", [2.5, 0.5, 1.0], 0, 0),
        ])
        .expect("built-in taxonomy is valid")
    }
}

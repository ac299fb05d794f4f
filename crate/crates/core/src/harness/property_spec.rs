use serde::{Deserialize, Serialize};

use super::config::DatasetChoice;
use super::sweep::anchor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::verify::{make_property, RobustnessProperty};

/// A property as stored on disk: an anchor by test-set reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySpec {
    pub dataset: DatasetChoice,
    pub index: usize,
    /// Defaults to the dataset label.
    #[serde(default)]
    pub label: Option<usize>,
    pub epsilon: f64,
}

impl PropertySpec {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Resolves against the test split of `dataset`.
    pub fn resolve(&self, choice: DatasetChoice, test: &Dataset) -> Result<RobustnessProperty> {
        if choice != self.dataset {
            return Err(Error::InvalidArgument(format!(
                "property refers to {}, loaded dataset is {choice}",
                self.dataset
            )));
        }
        let x = anchor(test, self.index)?;
        let label = self.label.unwrap_or(test.label(self.index));
        if label >= test.num_classes() {
            return Err(Error::InvalidArgument(format!("label {label} is not a class")));
        }
        make_property(&x, label, self.epsilon)
    }
}

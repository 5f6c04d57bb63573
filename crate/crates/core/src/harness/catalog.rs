use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    ImageToImage,
    Segmentation,
    Inpainting,
    Sentiment,
    Translation,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Task::Classification => "classification",
            Task::ImageToImage => "image-to-image",
            Task::Segmentation => "segmentation",
            Task::Inpainting => "inpainting",
            Task::Sentiment => "sentiment",
            Task::Translation => "translation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCatalogEntry {
    pub name: String,
    pub parameters_millions: f64,
    pub task: Task,
    /// Reported top-1 accuracy in [0, 1]; user-supplied, never defaulted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_accuracy: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("model {0:?}: parameters_millions must be positive")]
    BadParameters(String),
    #[error("model {0:?}: reported_accuracy must lie in [0, 1]")]
    BadAccuracy(String),
    #[error("model {0:?} listed twice")]
    Duplicate(String),
}

impl ModelCatalogEntry {
    fn validate(&self) -> Result<(), CatalogError> {
        if !(self.parameters_millions > 0.0 && self.parameters_millions.is_finite()) {
            return Err(CatalogError::BadParameters(self.name.clone()));
        }
        if self.reported_accuracy.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(CatalogError::BadAccuracy(self.name.clone()));
        }
        Ok(())
    }
}

/// Image classification models with their approximate parameter counts.
const BUILTIN: [(&str, f64); 7] = [
    ("MobileNet-V2", 5.0),
    ("Inception-V3", 25.0),
    ("Inception-V4", 35.0),
    ("Inception-ResNet-V2", 60.0),
    ("ResNet-V2-50", 30.0),
    ("ResNet-V2-152", 70.0),
    ("VGG-16", 150.0),
];

/// Ordered, name-unique model list.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCatalog {
    entries: Vec<ModelCatalogEntry>,
}

impl Default for ModelCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ModelCatalog {
    pub fn builtin() -> Self {
        Self {
            entries: BUILTIN
                .iter()
                .map(|&(name, p)| ModelCatalogEntry {
                    name: name.to_owned(),
                    parameters_millions: p,
                    task: Task::Classification,
                    reported_accuracy: None,
                })
                .collect(),
        }
    }

    /// Built-in entries overlaid with `extra`: an extra entry named like a
    /// built-in replaces it in place, others are appended.
    pub fn with_entries(extra: &[ModelCatalogEntry]) -> Result<Self, CatalogError> {
        let mut catalog = Self::builtin();
        for (i, e) in extra.iter().enumerate() {
            e.validate()?;
            if extra[..i].iter().any(|o| o.name == e.name) {
                return Err(CatalogError::Duplicate(e.name.clone()));
            }
            match catalog.entries.iter_mut().find(|o| o.name == e.name) {
                Some(slot) => *slot = e.clone(),
                None => catalog.entries.push(e.clone()),
            }
        }
        Ok(catalog)
    }

    pub fn get(&self, name: &str) -> Option<&ModelCatalogEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[ModelCatalogEntry] {
        &self.entries
    }
}

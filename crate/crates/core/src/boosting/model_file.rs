use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GbtModel, Objective, Tree};
use crate::error::{PclvError, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    objective: Objective,
    base_score: f64,
    eta: f64,
    n_features: usize,
    trees: Vec<Tree>,
}

pub fn save_model(model: &GbtModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        objective: model.objective,
        base_score: model.base_score,
        eta: model.eta,
        n_features: model.n_features,
        trees: model.trees.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|source| PclvError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| PclvError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GbtModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PclvError::io(path, e))?;
    model_from_json(&text).map_err(|e| match e {
        PclvError::Json { source, .. } => PclvError::Json {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub(crate) fn model_from_json(text: &str) -> Result<GbtModel> {
    let json_err = |source| PclvError::Json {
        path: Default::default(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    let version = value.get("version").cloned().unwrap_or(serde_json::Value::Null);
    if version.as_u64() != Some(MODEL_FORMAT_VERSION as u64) {
        return Err(PclvError::Version {
            found: version.to_string(),
            supported: MODEL_FORMAT_VERSION.to_string(),
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(json_err)?;
    for (t, tree) in file.trees.iter().enumerate() {
        validate_tree(tree, file.n_features)
            .map_err(|m| PclvError::input(format!("tree {t}: {m}")))?;
    }
    Ok(GbtModel {
        objective: file.objective,
        base_score: file.base_score,
        eta: file.eta,
        n_features: file.n_features,
        trees: file.trees,
    })
}

fn validate_tree(tree: &Tree, n_features: usize) -> Result<(), String> {
    use super::Node;
    if tree.nodes.is_empty() {
        return Err("no nodes".into());
    }
    for (i, node) in tree.nodes.iter().enumerate() {
        match node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if *feature >= n_features {
                    return Err(format!("node {i}: feature {feature} out of range"));
                }
                if !threshold.is_finite() {
                    return Err(format!("node {i}: non-finite threshold"));
                }
                // Children always follow their parent, so traversal terminates.
                if *left <= i || *right <= i || *left >= tree.nodes.len() || *right >= tree.nodes.len() {
                    return Err(format!("node {i}: bad child index"));
                }
            }
            Node::Leaf { weight, .. } => {
                if !weight.is_finite() {
                    return Err(format!("node {i}: non-finite leaf weight"));
                }
            }
        }
    }
    Ok(())
}

//! Model document serialization.
//!
//! A fitted model travels as one self-describing JSON document with an
//! explicit schema version. Numbers are rendered with shortest
//! round-trip decimals, so writing and re-reading a model reproduces
//! every numeric field bit for bit. Loading validates the document
//! structure: parameter counts, round shapes, tree topology and value
//! finiteness.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boosting::{BoostedModel, Node, Tree};
use crate::error::{Error, Result};

/// Version stamp written into every model document.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    #[serde(flatten)]
    model: BoostedModel,
}

/// Renders a model as its canonical document text.
pub fn model_to_string(model: &BoostedModel) -> String {
    let doc = ModelDocument {
        schema_version: MODEL_SCHEMA_VERSION,
        model: model.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("model documents are serializable")
}

/// Parses and validates a model document.
pub fn model_from_str(text: &str) -> Result<BoostedModel> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        row: e.line(),
        column: "model document".to_string(),
        message: e.to_string(),
    })?;
    if doc.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported model schema version {} (this build reads version {})",
            doc.schema_version, MODEL_SCHEMA_VERSION
        )));
    }
    validate_model(&doc.model)?;
    Ok(doc.model)
}

/// Writes a model document to a file.
pub fn save_model(model: &BoostedModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model))?;
    Ok(())
}

/// Reads and validates a model document from a file.
pub fn load_model(path: &Path) -> Result<BoostedModel> {
    let text = fs::read_to_string(path)?;
    model_from_str(&text)
}

fn validate_model(model: &BoostedModel) -> Result<()> {
    let fail = |message: String| Err(Error::InvalidConfig(message));
    model.config.validate()?;
    let k = model.spec.param_count();
    if model.offsets.len() != k {
        return fail(format!(
            "model document carries {} offsets for {} parameters",
            model.offsets.len(),
            k
        ));
    }
    if !model.offsets.iter().all(|v| v.is_finite()) {
        return fail("model document carries non-finite offsets".to_string());
    }
    if model.best_round > model.rounds.len() {
        return fail(format!(
            "best_round {} exceeds the {} stored rounds",
            model.best_round,
            model.rounds.len()
        ));
    }
    let p = model.feature_names.len();
    for (t, round) in model.rounds.iter().enumerate() {
        if round.len() != k {
            return fail(format!(
                "round {} holds {} trees for {} parameters",
                t,
                round.len(),
                k
            ));
        }
        for tree in round {
            validate_tree(tree, p)?;
        }
    }
    Ok(())
}

fn validate_tree(tree: &Tree, n_features: usize) -> Result<()> {
    let fail = |message: String| Err(Error::InvalidConfig(message));
    if tree.nodes.is_empty() {
        return fail("model document holds an empty tree".to_string());
    }
    for (idx, node) in tree.nodes.iter().enumerate() {
        match node {
            Node::Leaf { weight } => {
                if !weight.is_finite() {
                    return fail(format!("leaf {idx} carries a non-finite weight"));
                }
            }
            Node::Split {
                split_feature,
                threshold,
                left,
                right,
                ..
            } => {
                if *split_feature >= n_features {
                    return fail(format!(
                        "split {idx} references feature {split_feature} of {n_features}"
                    ));
                }
                if !threshold.is_finite() {
                    return fail(format!("split {idx} carries a non-finite threshold"));
                }
                // Children always follow their parent in the arena, so
                // forward-only indices rule out cycles.
                if *left <= idx || *right <= idx || *left >= tree.nodes.len()
                    || *right >= tree.nodes.len()
                {
                    return fail(format!("split {idx} has out-of-order child indices"));
                }
            }
        }
    }
    Ok(())
}

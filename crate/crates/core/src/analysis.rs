//! Fine-tuning weight-change study: per-layer relative update magnitudes
//! and per-category means, used to justify adapter placement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::optim::{TrainLog, TrainRunConfig};
use crate::storage::Checkpoint;
use crate::trainer::{train_parameters, TrainItem};
use crate::unet::{LayerCategory, LayerDomain, UNet};

/// Relative weight change of one layer: `||theta' - theta||_2 / ||theta||_2`.
pub fn weight_change_rate(theta: &[f64], theta_prime: &[f64]) -> Result<f64> {
    if theta.len() != theta_prime.len() {
        return Err(Error::ShapeMismatch {
            context: "weight_change_rate",
            expected: vec![theta.len()],
            got: vec![theta_prime.len()],
        });
    }
    let base_norm = l2(theta);
    if base_norm == 0.0 {
        return Err(Error::invalid("zero-norm baseline layer: delta undefined"));
    }
    let diff_norm = theta
        .iter()
        .zip(theta_prime)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    Ok(diff_norm / base_norm)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDelta {
    pub path: String,
    pub category: LayerCategory,
    pub delta: f64,
}

/// Per-layer deltas and unweighted per-category means for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub domain: LayerDomain,
    pub per_layer: Vec<LayerDelta>,
    pub per_category_mean: BTreeMap<String, f64>,
    pub excluded_zero_norm: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl AnalysisReport {
    /// Category with the largest mean delta.
    pub fn top_category(&self) -> Option<(&str, f64)> {
        self.per_category_mean
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite deltas"))
            .map(|(k, v)| (k.as_str(), *v))
    }

    /// Check the mean invariant: each category mean equals the arithmetic
    /// mean of its member layers to 1e-12.
    pub fn verify_means(&self) -> Result<()> {
        for (cat, mean) in &self.per_category_mean {
            let members: Vec<f64> = self
                .per_layer
                .iter()
                .filter(|l| l.category.name() == cat)
                .map(|l| l.delta)
                .collect();
            if members.is_empty() {
                return Err(Error::invalid(format!("category {cat} has a mean but no members")));
            }
            let want = members.iter().sum::<f64>() / members.len() as f64;
            if (want - mean).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "category {cat} mean {mean} != arithmetic mean {want}"
                )));
            }
        }
        Ok(())
    }

    /// Plain-text table: category means then per-layer rows.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("weight-change analysis ({} domain)\n", self.domain.name()));
        out.push_str("category means:\n");
        for (cat, mean) in &self.per_category_mean {
            out.push_str(&format!("  {cat:<16} {mean:.6}\n"));
        }
        out.push_str("per-layer:\n");
        for l in &self.per_layer {
            out.push_str(&format!("  {:<28} {:<16} {:.6}\n", l.path, l.category.name(), l.delta));
        }
        if !self.excluded_zero_norm.is_empty() {
            out.push_str(&format!("excluded zero-norm layers: {:?}\n", self.excluded_zero_norm));
        }
        for (k, v) in &self.metadata {
            out.push_str(&format!("{k}: {v}\n"));
        }
        out
    }
}

fn concat_layer(
    ckpt: &Checkpoint,
    names: &[String],
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for name in names {
        let (data, _) = ckpt.tensor(name)?;
        out.extend_from_slice(data);
    }
    Ok(out)
}

/// Compare two structurally identical checkpoints over one parameter domain.
/// Layers outside the domain must be bit-identical (the freeze contract),
/// otherwise this fails with `FrozenDrift`.
pub fn analyze(
    cfg: &RunConfig,
    before: &Checkpoint,
    after: &Checkpoint,
    domain: LayerDomain,
) -> Result<AnalysisReport> {
    // Structural identity.
    let names_b: Vec<&String> = before.tensors.keys().collect();
    let names_a: Vec<&String> = after.tensors.keys().collect();
    if names_b != names_a {
        return Err(Error::Integrity("checkpoints are structurally different".into()));
    }
    for name in &names_b {
        let (db, sb) = before.tensor(name)?;
        let (da, sa) = after.tensor(name)?;
        if sb != sa || db.len() != da.len() {
            return Err(Error::Integrity(format!("tensor {name} differs structurally")));
        }
    }

    let unet = UNet::new(&cfg.unet_config(), 0)?;
    let infos = unet.layer_infos();
    let mut in_domain_names: Vec<String> = Vec::new();
    let mut per_layer = Vec::new();
    let mut excluded = Vec::new();
    let mut by_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for info in infos {
        if info.address.domain != domain {
            continue;
        }
        in_domain_names.extend(info.param_names.iter().cloned());
        let theta = concat_layer(before, &info.param_names)?;
        let theta_prime = concat_layer(after, &info.param_names)?;
        match weight_change_rate(&theta, &theta_prime) {
            Ok(delta) => {
                by_category
                    .entry(info.address.category.name().to_string())
                    .or_default()
                    .push(delta);
                per_layer.push(LayerDelta {
                    path: info.address.path.clone(),
                    category: info.address.category,
                    delta,
                });
            }
            Err(_) => excluded.push(info.address.path.clone()),
        }
    }

    // Freeze contract on everything else in the checkpoints.
    for name in &names_b {
        if in_domain_names.iter().any(|n| n == *name) {
            continue;
        }
        let (db, _) = before.tensor(name)?;
        let (da, _) = after.tensor(name)?;
        let identical = db
            .iter()
            .zip(da)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !identical {
            return Err(Error::FrozenDrift(format!(
                "out-of-domain parameter {name} changed during a {} fine-tune",
                domain.name()
            )));
        }
    }

    let per_category_mean: BTreeMap<String, f64> = by_category
        .into_iter()
        .map(|(cat, deltas)| {
            let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
            (cat, mean)
        })
        .collect();

    let mut metadata = BTreeMap::new();
    metadata.insert("before".to_string(), before.content_hash().to_string());
    metadata.insert("after".to_string(), after.content_hash().to_string());
    metadata.insert("mean_weighting".to_string(), "unweighted arithmetic mean over layers".to_string());
    metadata.insert("excluded_zero_norm_count".to_string(), excluded.len().to_string());

    let report = AnalysisReport {
        domain,
        per_layer,
        per_category_mean,
        excluded_zero_norm: excluded,
        metadata,
    };
    report.verify_means()?;
    Ok(report)
}

/// Full fine-tune of the selected parameter domain (the complement stays
/// frozen) for the analysis study.
pub fn fine_tune_for_analysis(
    base: &BaseModel,
    items: &[TrainItem],
    domain: LayerDomain,
    run: &TrainRunConfig,
) -> Result<TrainLog> {
    base.freeze_all();
    let names = base.unet.param_names_in_domain(domain);
    let all = base.unet.named_params();
    let trainable: Vec<(String, crate::tensor::Tensor)> = all
        .into_iter()
        .filter(|(n, _)| names.contains(n))
        .collect();
    train_parameters(base, items, &trainable, run, 0.0)
}

/// Pretrain every UNet parameter on captioned clips, with condition dropout
/// so classifier-free guidance has a meaningful unconditional branch. The
/// encoders and vocabulary stay frozen.
pub fn pretrain_base(base: &BaseModel, items: &[TrainItem], run: &TrainRunConfig) -> Result<TrainLog> {
    base.freeze_all();
    let trainable = base.unet.named_params();
    train_parameters(base, items, &trainable, run, base.cfg.pretrain_cond_dropout)
}

//! Client-side plans: which rank-1 terms a client works on, given the
//! broadcast scores and its capability, plus the matching adapter slices and
//! upload payloads.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{HaflError, Result};
use crate::importance::ScoreList;
use crate::lora::{upload_size, LoraAdapter};
use crate::matrix::Matrix;

pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Truncation,
    Freezing,
    Homogeneous,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Truncation => "truncation",
            PlanMode::Freezing => "freezing",
            PlanMode::Homogeneous => "homogeneous",
        }
    }
}

/// Resource class of a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    /// Truncation: local LoRA rank `r_k`.
    Rank(usize),
    /// Freezing: fraction `α_k ∈ [0, 1)` of the global rank-1 terms kept frozen.
    FreezeRatio(f64),
    /// Same rank as the server; trains and uploads everything.
    Full,
}

impl Capability {
    pub fn mode(&self) -> PlanMode {
        match self {
            Capability::Rank(_) => PlanMode::Truncation,
            Capability::FreezeRatio(_) => PlanMode::Freezing,
            Capability::Full => PlanMode::Homogeneous,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Capability::Rank(r) => format!("rank={r}"),
            Capability::FreezeRatio(a) => format!("alpha={a}"),
            Capability::Full => "full".to_string(),
        }
    }

    /// Number of rank-1 terms this client trains against a rank-`r_g` server.
    pub fn selected_count(&self, r_g: usize) -> usize {
        match *self {
            Capability::Rank(r) => r,
            Capability::FreezeRatio(a) => trained_count(a, r_g),
            Capability::Full => r_g,
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientCapability {
    pub client_id: ClientId,
    pub capability: Capability,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPlan {
    pub client_id: ClientId,
    /// Trained / uploaded rank-1 indices, ascending.
    pub selected: Vec<usize>,
    /// Complement of `selected` in `0..r_g`, ascending.
    pub frozen: Vec<usize>,
    pub mode: PlanMode,
}

impl ClientPlan {
    pub fn rank(&self) -> usize {
        self.selected.len() + self.frozen.len()
    }

    /// Per-index trainable flags over `0..r_g`.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.rank()];
        for &i in &self.selected {
            mask[i] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadPayload {
    pub client_id: ClientId,
    pub selected: Vec<usize>,
    /// `d × |selected|`
    pub b_cols: Matrix,
    /// `|selected| × l`
    pub a_rows: Matrix,
    /// Frobenius norm of the scaled product of the uploaded slices.
    pub norm_z: f64,
}

impl UploadPayload {
    pub fn param_count(&self) -> usize {
        self.selected.len() * (self.b_cols.rows() + self.a_rows.cols())
    }

    pub fn byte_count(&self, bytes_per_param: usize) -> u64 {
        upload_size(
            self.selected.len(),
            self.b_cols.rows(),
            self.a_rows.cols(),
            bytes_per_param,
        )
    }
}

/// Indices of the `k` largest scores, ties to the lowest index, returned
/// ascending.
pub fn topk_indices(scores: &ScoreList, k: usize) -> Result<Vec<usize>> {
    let s = scores.as_slice();
    if k == 0 || k > s.len() {
        return Err(HaflError::InvalidArgument(format!(
            "top-k with k = {k} over {} scores",
            s.len()
        )));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| match s[j].total_cmp(&s[i]) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `round((1 − α) · r_max)`, at least 1.
pub fn trained_count(alpha: f64, r_max: usize) -> usize {
    let n = ((1.0 - alpha) * r_max as f64).round();
    (n as usize).clamp(1, r_max.max(1))
}

pub fn make_plan(cap: &ClientCapability, scores: &ScoreList, r_g: usize) -> Result<ClientPlan> {
    if scores.len() != r_g {
        return Err(HaflError::shape(
            "make_plan scores",
            format!("{r_g} scores"),
            format!("{} scores", scores.len()),
        ));
    }
    let k = match cap.capability {
        Capability::Rank(r) => {
            if r == 0 || r > r_g {
                return Err(HaflError::InvalidArgument(format!(
                    "client {} rank {r} outside [1, {r_g}]",
                    cap.client_id
                )));
            }
            r
        }
        Capability::FreezeRatio(a) => {
            if !(0.0..1.0).contains(&a) {
                return Err(HaflError::InvalidArgument(format!(
                    "client {} freeze ratio {a} outside [0, 1)",
                    cap.client_id
                )));
            }
            trained_count(a, r_g)
        }
        Capability::Full => r_g,
    };
    let selected = topk_indices(scores, k)?;
    let frozen = complement(&selected, r_g);
    Ok(ClientPlan {
        client_id: cap.client_id,
        selected,
        frozen,
        mode: cap.capability.mode(),
    })
}

fn complement(selected: &[usize], r_g: usize) -> Vec<usize> {
    let mut mask = vec![false; r_g];
    for &i in selected {
        mask[i] = true;
    }
    (0..r_g).filter(|&i| !mask[i]).collect()
}

fn check_plan_bounds(global: &LoraAdapter, plan: &ClientPlan) -> Result<()> {
    let r_g = global.rank();
    if let Some(&bad) = plan.selected.iter().find(|&&i| i >= r_g) {
        return Err(HaflError::IndexOutOfRange {
            what: "plan",
            index: bad,
            limit: r_g,
        });
    }
    if plan.rank() != r_g {
        return Err(HaflError::shape(
            "plan coverage",
            format!("{r_g} indices"),
            format!("{} indices", plan.rank()),
        ));
    }
    Ok(())
}

/// `B_k = B_g[:, I_k]`, `A_k = A_g[I_k, :]`.
pub fn apply_truncation(global: &LoraAdapter, plan: &ClientPlan) -> Result<LoraAdapter> {
    if plan.mode != PlanMode::Truncation {
        return Err(HaflError::ModeMismatch {
            expected: PlanMode::Truncation.as_str(),
            actual: plan.mode.as_str(),
        });
    }
    check_plan_bounds(global, plan)?;
    LoraAdapter::new(
        global.b().select_columns(&plan.selected),
        global.a().select_rows(&plan.selected),
        global.scale(),
    )
}

/// Full copy of the global adapter plus the per-index trainable mask.
pub fn apply_freezing(global: &LoraAdapter, plan: &ClientPlan) -> Result<(LoraAdapter, Vec<bool>)> {
    if plan.mode != PlanMode::Freezing {
        return Err(HaflError::ModeMismatch {
            expected: PlanMode::Freezing.as_str(),
            actual: plan.mode.as_str(),
        });
    }
    check_plan_bounds(global, plan)?;
    Ok((global.clone(), plan.mask()))
}

/// Payload for a trained local adapter. Truncation uploads the whole
/// (reduced-rank) adapter; freezing and homogeneous clients upload the
/// selected columns/rows of their full-rank adapter.
pub fn extract_upload(adapter: &LoraAdapter, plan: &ClientPlan) -> Result<UploadPayload> {
    match plan.mode {
        PlanMode::Truncation => {
            if adapter.rank() != plan.selected.len() {
                return Err(HaflError::shape(
                    "extract_upload (truncation)",
                    format!("rank {}", plan.selected.len()),
                    format!("rank {}", adapter.rank()),
                ));
            }
            let all: Vec<usize> = (0..adapter.rank()).collect();
            Ok(UploadPayload {
                client_id: plan.client_id,
                selected: plan.selected.clone(),
                b_cols: adapter.b().clone(),
                a_rows: adapter.a().clone(),
                norm_z: adapter.partial_product_norm(&all),
            })
        }
        PlanMode::Freezing | PlanMode::Homogeneous => {
            if adapter.rank() != plan.rank() {
                return Err(HaflError::shape(
                    "extract_upload (full rank)",
                    format!("rank {}", plan.rank()),
                    format!("rank {}", adapter.rank()),
                ));
            }
            check_plan_bounds(adapter, plan)?;
            Ok(UploadPayload {
                client_id: plan.client_id,
                selected: plan.selected.clone(),
                b_cols: adapter.b().select_columns(&plan.selected),
                a_rows: adapter.a().select_rows(&plan.selected),
                norm_z: adapter.partial_product_norm(&plan.selected),
            })
        }
    }
}

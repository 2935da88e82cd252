//! Unlearn-method registry.
//!
//! Each method sits behind [`UnlearnMethod`] and is selected at runtime by
//! its registry name (the `loss.method` config key). Both methods share the
//! KL retain term to the original model; they differ in the forget mechanism
//! and in RMU's extra representation-alignment retain term.

use super::{GraphBuilder, LossConfig, LossError, RefCache, ReferenceModels, Result};
use crate::corpus::Sample;
use crate::tensor::TensorId;

pub trait UnlearnMethod: Sync {
    /// Registry name.
    fn name(&self) -> &'static str;

    /// Precomputes the frozen-reference constants this method reads.
    fn prepare_refs(
        &self,
        cache: &mut RefCache,
        refs: &ReferenceModels,
        cfg: &LossConfig,
        forget: &[Sample],
        retain_pool: &[Sample],
    ) -> Result<()>;

    /// Forget-loss graph node, mean over the batch.
    fn forget_loss(&self, gb: &mut GraphBuilder<'_>, batch: &[Sample]) -> Result<TensorId>;

    /// Retain-loss graph node, mean over the batch.
    fn retain_loss(&self, gb: &mut GraphBuilder<'_>, batch: &[Sample]) -> Result<TensorId>;
}

/// Negative preference optimization: pushes the policy's answer likelihood
/// below the reference's via -(2/beta) log sigmoid(-beta (log pi - log ref)),
/// with a KL retain term to the original model.
pub struct NpoMethod;

impl UnlearnMethod for NpoMethod {
    fn name(&self) -> &'static str {
        "npo"
    }

    fn prepare_refs(
        &self,
        cache: &mut RefCache,
        refs: &ReferenceModels,
        _cfg: &LossConfig,
        forget: &[Sample],
        retain_pool: &[Sample],
    ) -> Result<()> {
        cache.prepare_npo(&refs.theta_o, forget)?;
        cache.prepare_kl(&refs.theta_o, retain_pool)
    }

    fn forget_loss(&self, gb: &mut GraphBuilder<'_>, batch: &[Sample]) -> Result<TensorId> {
        let beta = gb.loss_cfg.beta;
        let mut nodes = Vec::with_capacity(batch.len());
        for s in batch {
            let ref_lp = gb.ref_logprob(s)?;
            let lp = gb.seq_logprob_node(s)?;
            // -(2/b) log sigmoid(-b z) == (2/b) softplus(b z), z = lp - ref.
            let z = gb.tape.add_scalar(lp, -ref_lp);
            let bz = gb.tape.scale(z, beta);
            let sp = gb.tape.softplus(bz);
            nodes.push(gb.tape.scale(sp, 2.0 / beta));
        }
        gb.batch_mean(nodes)
    }

    fn retain_loss(&self, gb: &mut GraphBuilder<'_>, batch: &[Sample]) -> Result<TensorId> {
        let mut nodes = Vec::with_capacity(batch.len());
        for s in batch {
            nodes.push(gb.kl_node(s)?);
        }
        gb.batch_mean(nodes)
    }
}

/// Representation misdirection: drives the rmu-layer hidden states of forget
/// answers toward a fixed random direction `c * v`, and retains by KL plus
/// hidden-state alignment to the original model.
pub struct RmuMethod;

impl UnlearnMethod for RmuMethod {
    fn name(&self) -> &'static str {
        "rmu"
    }

    fn prepare_refs(
        &self,
        cache: &mut RefCache,
        refs: &ReferenceModels,
        cfg: &LossConfig,
        _forget: &[Sample],
        retain_pool: &[Sample],
    ) -> Result<()> {
        if cfg.rmu_layer >= refs.theta_o.cfg.n_layers {
            return Err(LossError::Config(format!(
                "rmu_layer {} out of range for {} layers",
                cfg.rmu_layer, refs.theta_o.cfg.n_layers
            )));
        }
        cache.prepare_kl(&refs.theta_o, retain_pool)?;
        cache.prepare_rmu_hidden(&refs.theta_o, retain_pool, cfg.rmu_layer)
    }

    fn forget_loss(&self, gb: &mut GraphBuilder<'_>, batch: &[Sample]) -> Result<TensorId> {
        let mut nodes = Vec::with_capacity(batch.len());
        for s in batch {
            nodes.push(gb.rmu_forget_node(s)?);
        }
        gb.batch_mean(nodes)
    }

    fn retain_loss(&self, gb: &mut GraphBuilder<'_>, batch: &[Sample]) -> Result<TensorId> {
        let mut nodes = Vec::with_capacity(batch.len());
        for s in batch {
            let kl = gb.kl_node(s)?;
            let rep = gb.rmu_retain_rep_node(s)?;
            nodes.push(gb.tape.add(kl, rep)?);
        }
        gb.batch_mean(nodes)
    }
}

static NPO: NpoMethod = NpoMethod;
static RMU: RmuMethod = RmuMethod;
static REGISTRY: [&dyn UnlearnMethod; 2] = [&NPO, &RMU];

/// Every registered method.
pub fn registry() -> &'static [&'static dyn UnlearnMethod] {
    &REGISTRY
}

pub fn lookup_method(name: &str) -> Option<&'static dyn UnlearnMethod> {
    registry().iter().copied().find(|m| m.name() == name)
}

pub fn method_names() -> Vec<&'static str> {
    registry().iter().map(|m| m.name()).collect()
}

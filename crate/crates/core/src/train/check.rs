use super::loss::{batch_loss, LossConfig};
use crate::corpus::{CorpusSpec, PairRecord, World};
use crate::error::Result;
use crate::model::{ModelConfig, UniMoCo};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

/// Two-layer toy model small enough for finite differences.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        mlp_ratio: 2,
        backbone_layers: 2,
        vision_layers: 1,
        t2i_layers: 2,
        aux_layers: 1,
        vocab_size: 24,
        visual_tokens: 6,
        patches: 4,
        patch_dim: 6,
        max_text_len: 8,
        pad_prompt_len: 1,
        ..ModelConfig::default()
    }
}

/// A batch covering all three combinations for [`toy_model_config`].
pub fn toy_batch(seed: u64) -> Result<Vec<PairRecord>> {
    let spec = CorpusSpec {
        seed,
        vocab_size: 24,
        patches: 4,
        patch_dim: 6,
        n_classes: 4,
        content_len: 2,
        ood_fraction: 0.0,
        ..CorpusSpec::default()
    }
    .with_counts(2, 1, 1);
    World::new(&spec)?.gen_corpus()
}

/// Finite-difference check of the composite loss with respect to every
/// parameter tensor of a freshly initialized toy model. The real-modality
/// branch is not detached here, so the analytic gradient is the true one.
pub fn pipeline_grad_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = UniMoCo::new(toy_model_config(), seed)?;
    let batch = toy_batch(seed)?;
    let refs: Vec<&PairRecord> = batch.iter().collect();
    let lc = LossConfig {
        stop_grad_target: false,
        ..LossConfig::default()
    };
    let ids: Vec<_> = model.params().ids().collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&id| model.params().get(id).clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        for (&id, &v) in ids.iter().zip(vars) {
            tape.bind_param(id.0, v);
        }
        Ok(batch_loss(tape, &model, &refs, &lc)?.total)
    };
    grad_check(&format!("pipeline seed {seed}"), &f, &inputs, opts)
}

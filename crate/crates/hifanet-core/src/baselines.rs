//! Deterministic image-aggregation voting and the learned variants used as
//! comparison points (full network, no-patch-attention, no-structural-prior,
//! average-pool + fully-connected).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    self, bind_attention, bind_classifier, bind_linear, bind_prior, classify_bound,
    init_attention_block, init_classifier, init_prior, instance_attention_bound,
    interpoint_attention_bound, patch_attention_bound, structural_prior_bound, AttentionVars,
    ClassifierVars, HiFANetConfig, LinearVars, PriorVars,
};
use crate::datagen::ObservationTensor;
use crate::numerics::{NumericsError, ParamStore, Tape, Var};
use crate::rng::Rng;

/// Hidden widths of the average-pool baseline's two fully-connected layers.
pub const AVGPOOL_HIDDEN: (usize, usize) = (256, 128);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full network: patch, instance and inter-point attention with the
    /// structural prior.
    HiFANet,
    /// Patch stage bypassed; the principal pixel feature passes straight
    /// through to instance attention.
    NoPatchAttention,
    /// Inter-point attention without the structural-prior key shift; the
    /// prior encoder is not instantiated.
    NoStructuralPrior,
    /// Average-pool all patch and instance features, then two FC layers.
    AvgPoolFc,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownVariant(pub String);

impl core::fmt::Display for UnknownVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "unknown variant {:?}", self.0)
    }
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant, UnknownVariant> {
        match name {
            "hifanet" => Ok(Variant::HiFANet),
            "hifanet_noPA" | "hifanet-no-pa" => Ok(Variant::NoPatchAttention),
            "hifanet_noSP" | "hifanet-no-sp" => Ok(Variant::NoStructuralPrior),
            "avgpool_fc" | "avgpool-fc" => Ok(Variant::AvgPoolFc),
            other => Err(UnknownVariant(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::HiFANet => "hifanet",
            Variant::NoPatchAttention => "hifanet_noPA",
            Variant::NoStructuralPrior => "hifanet_noSP",
            Variant::AvgPoolFc => "avgpool_fc",
        }
    }
}

/// A model handle: a variant plus its configuration. Parameters live in a
/// separate [`ParamStore`] so the handle stays cheap to copy and share.
#[derive(Clone, Copy, Debug)]
pub struct Model {
    pub variant: Variant,
    pub config: HiFANetConfig,
}

/// Builds a model handle for a named variant.
pub fn build_variant(name: &str, config: HiFANetConfig) -> Result<Model, UnknownVariant> {
    Ok(Model { variant: Variant::parse(name)?, config })
}

impl Model {
    pub fn new(variant: Variant, config: HiFANetConfig) -> Self {
        Model { variant, config }
    }

    /// Fresh parameters for this variant only.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.config;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        match self.variant {
            Variant::HiFANet => return attention::init_params(cfg, seed),
            Variant::NoPatchAttention => {
                init_attention_block(&mut store, &mut rng, "instance", cfg, cfg.d1);
                init_attention_block(&mut store, &mut rng, "inter", cfg, cfg.d2);
                init_prior(&mut store, &mut rng, cfg);
                init_classifier(&mut store, &mut rng, cfg);
            }
            Variant::NoStructuralPrior => {
                init_attention_block(&mut store, &mut rng, "patch", cfg, cfg.d1);
                init_attention_block(&mut store, &mut rng, "instance", cfg, cfg.d1);
                init_attention_block(&mut store, &mut rng, "inter", cfg, cfg.d2);
                init_classifier(&mut store, &mut rng, cfg);
            }
            Variant::AvgPoolFc => {
                let bound = |fan_in: usize, fan_out: usize| {
                    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
                };
                let (h1, h2) = AVGPOOL_HIDDEN;
                for (name, fan_in, fan_out) in [
                    ("avgpool.fc1", cfg.d, h1),
                    ("avgpool.fc2", h1, h2),
                    ("avgpool.out", h2, cfg.class_count),
                ] {
                    let b = bound(fan_in, fan_out);
                    let data: Vec<f64> =
                        (0..fan_in * fan_out).map(|_| rng.uniform(-b, b)).collect();
                    store
                        .insert(
                            &alloc::format!("{name}.w"),
                            crate::numerics::Tensor::new(vec![fan_in, fan_out], data).unwrap(),
                        )
                        .unwrap();
                    store
                        .insert(
                            &alloc::format!("{name}.b"),
                            crate::numerics::Tensor::zeros(vec![fan_out]),
                        )
                        .unwrap();
                }
            }
        }
        store
    }

    /// Binds this variant's parameters onto a tape once; the binding is then
    /// shared by every forward of the batch.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundModel, NumericsError> {
        Ok(match self.variant {
            Variant::HiFANet => BoundModel::HiFANet {
                patch: bind_attention(tape, store, "patch")?,
                instance: bind_attention(tape, store, "instance")?,
                inter: bind_attention(tape, store, "inter")?,
                prior: bind_prior(tape, store)?,
                head: bind_classifier(tape, store)?,
            },
            Variant::NoPatchAttention => BoundModel::NoPatchAttention {
                instance: bind_attention(tape, store, "instance")?,
                inter: bind_attention(tape, store, "inter")?,
                prior: bind_prior(tape, store)?,
                head: bind_classifier(tape, store)?,
            },
            Variant::NoStructuralPrior => BoundModel::NoStructuralPrior {
                patch: bind_attention(tape, store, "patch")?,
                instance: bind_attention(tape, store, "instance")?,
                inter: bind_attention(tape, store, "inter")?,
                head: bind_classifier(tape, store)?,
            },
            Variant::AvgPoolFc => BoundModel::AvgPoolFc {
                fc1: bind_linear(tape, store, "avgpool.fc1")?,
                fc2: bind_linear(tape, store, "avgpool.fc2")?,
                out: bind_linear(tape, store, "avgpool.out")?,
            },
        })
    }

    /// Forward pass of one observation group against an existing binding;
    /// returns `[m, class_count]` logits.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        obs: &ObservationTensor,
    ) -> Result<Var, NumericsError> {
        let cfg = &self.config;
        match bound {
            BoundModel::HiFANet { patch, instance, inter, prior, head } => {
                let (rows, cols, data) = obs.feature_matrix();
                let pixels = tape.leaf_matrix(rows, cols, data);
                let instances = patch_attention_bound(tape, patch, cfg, pixels, cfg.m * cfg.n)?;
                let points = instance_attention_bound(tape, instance, cfg, instances, cfg.m)?;
                let pe = structural_prior_bound(tape, prior, cfg, obs.coords())?;
                let refined = interpoint_attention_bound(tape, inter, cfg, points, Some(pe))?;
                classify_bound(tape, head, cfg, refined)
            }
            BoundModel::NoPatchAttention { instance, inter, prior, head } => {
                let (rows, cols, data) = obs.principal_matrix();
                let principal = tape.leaf_matrix(rows, cols, data);
                let points = instance_attention_bound(tape, instance, cfg, principal, cfg.m)?;
                let pe = structural_prior_bound(tape, prior, cfg, obs.coords())?;
                let refined = interpoint_attention_bound(tape, inter, cfg, points, Some(pe))?;
                classify_bound(tape, head, cfg, refined)
            }
            BoundModel::NoStructuralPrior { patch, instance, inter, head } => {
                let (rows, cols, data) = obs.feature_matrix();
                let pixels = tape.leaf_matrix(rows, cols, data);
                let instances = patch_attention_bound(tape, patch, cfg, pixels, cfg.m * cfg.n)?;
                let points = instance_attention_bound(tape, instance, cfg, instances, cfg.m)?;
                let refined = interpoint_attention_bound(tape, inter, cfg, points, None)?;
                classify_bound(tape, head, cfg, refined)
            }
            BoundModel::AvgPoolFc { fc1, fc2, out } => {
                avgpool_fc_forward_bound(tape, cfg, obs, fc1, fc2, out)
            }
        }
    }

    /// Convenience single-group forward: binds and runs in one call.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: &ObservationTensor,
    ) -> Result<Var, NumericsError> {
        let bound = self.bind(tape, store)?;
        self.forward_bound(tape, &bound, obs)
    }
}

/// A variant's parameters bound onto one tape.
pub enum BoundModel {
    HiFANet {
        patch: AttentionVars,
        instance: AttentionVars,
        inter: AttentionVars,
        prior: PriorVars,
        head: ClassifierVars,
    },
    NoPatchAttention {
        instance: AttentionVars,
        inter: AttentionVars,
        prior: PriorVars,
        head: ClassifierVars,
    },
    NoStructuralPrior {
        patch: AttentionVars,
        instance: AttentionVars,
        inter: AttentionVars,
        head: ClassifierVars,
    },
    AvgPoolFc {
        fc1: LinearVars,
        fc2: LinearVars,
        out: LinearVars,
    },
}

/// Average-pool baseline: mean over every frame and patch pixel per point,
/// then `d -> 256 -> 128 -> class_count` with ReLU between.
pub fn avgpool_fc_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    obs: &ObservationTensor,
) -> Result<Var, NumericsError> {
    let fc1 = bind_linear(tape, store, "avgpool.fc1")?;
    let fc2 = bind_linear(tape, store, "avgpool.fc2")?;
    let out = bind_linear(tape, store, "avgpool.out")?;
    avgpool_fc_forward_bound(tape, cfg, obs, &fc1, &fc2, &out)
}

fn avgpool_fc_forward_bound(
    tape: &mut Tape,
    cfg: &HiFANetConfig,
    obs: &ObservationTensor,
    fc1: &LinearVars,
    fc2: &LinearVars,
    out: &LinearVars,
) -> Result<Var, NumericsError> {
    let (rows, cols, data) = obs.feature_matrix();
    let pixels = tape.leaf_matrix(rows, cols, data);
    let per_point = cfg.n * cfg.k * cfg.k;
    let mut pooled = Vec::with_capacity(cfg.m);
    for p in 0..cfg.m {
        let block = tape.slice_rows(pixels, p * per_point, per_point)?;
        pooled.push(tape.mean_over_axis(block, 0)?);
    }
    let pooled = tape.concat(&pooled, 0)?;
    let h = tape.linear(pooled, fc1.w, fc1.b)?;
    let h = tape.relu(h);
    let h = tape.linear(h, fc2.w, fc2.b)?;
    let h = tape.relu(h);
    tape.linear(h, out.w, out.b)
}

/// Per-point plurality vote over the central `patch_size x patch_size`
/// window of the first `bof` frames' label patches. Ties break toward the
/// smallest label id.
pub fn majority_vote(obs: &ObservationTensor, patch_size: usize, bof: usize) -> Vec<u16> {
    assert!(patch_size % 2 == 1 && patch_size <= obs.k, "window must be odd and fit the patch");
    assert!(bof >= 1 && bof <= obs.n, "bag size must fit the stored frames");
    let k = obs.k;
    let k2 = k * k;
    let margin = (k - patch_size) / 2;
    let mut votes: Vec<u16> = Vec::with_capacity(obs.m);
    let mut counts: Vec<usize> = Vec::new();
    for p in 0..obs.m {
        counts.clear();
        for f in 0..bof {
            let base = (p * obs.n + f) * k2;
            for r in margin..margin + patch_size {
                for c in margin..margin + patch_size {
                    let label = obs.patch_labels[base + r * k + c] as usize;
                    if counts.len() <= label {
                        counts.resize(label + 1, 0);
                    }
                    counts[label] += 1;
                }
            }
        }
        let mut best = 0usize;
        for (label, &count) in counts.iter().enumerate() {
            if count > counts[best] {
                best = label;
            }
        }
        votes.push(best as u16);
    }
    votes
}

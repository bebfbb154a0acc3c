//! The three hierarchical attention blocks (patch, instance, inter-point),
//! the structural prior over pairwise 3D offsets, and the classifier head.
//!
//! Stage contracts (per group of `m` points with `n` frames each):
//!
//! * patch attention:      `[m*n, k*k, d]` pixels   -> `[m*n, d]` instances
//! * instance attention:   `[m, n, d]` instances    -> `[m, d]` point features
//! * inter-point attention: `[m, d]` + coordinates  -> `[m, d]`
//! * classifier:           `[m, d]`                 -> `[m, class_count]` logits
//!
//! All shapes are carried as 2-D tape matrices with the sequence structure
//! tracked by the caller.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::datagen::ObservationTensor;
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Hidden width of the two classifier layers.
pub const CLASSIFIER_HIDDEN: usize = 512;
/// Hidden width of the structural-prior encoder's first layer.
pub const PRIOR_HIDDEN: usize = 128;
/// Meters-to-input scale of the prior encoder: pairwise offsets are divided
/// by this so typical within-group distances land near unit scale and the
/// encoded keys do not saturate the attention softmax.
pub const PRIOR_INPUT_SCALE_M: f64 = 5.0;

/// Model dimensions. `d1`/`d2` are per-head key/query widths for the
/// patch+instance and inter-point blocks respectively; `d` is split evenly
/// across heads for values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiFANetConfig {
    /// Points per group.
    pub m: usize,
    /// Bag-of-frames size.
    pub n: usize,
    /// Patch side length (odd).
    pub k: usize,
    /// Feature width.
    pub d: usize,
    /// Per-head key/query width in patch and instance attention.
    pub d1: usize,
    /// Attention head count.
    pub heads: usize,
    /// Per-head key/query width in inter-point attention.
    pub d2: usize,
    pub class_count: usize,
    /// Hidden width of each block's feed-forward net.
    pub ffn_width: usize,
}

impl HiFANetConfig {
    /// Paper-scale defaults; desk-scale runs shrink `d` and the head widths.
    pub fn with_classes(class_count: usize) -> Self {
        HiFANetConfig {
            m: 10,
            n: 5,
            k: 5,
            d: 256,
            d1: 64,
            heads: 4,
            d2: 64,
            class_count,
            ffn_width: 256,
        }
    }

    /// Small configuration scaled for gradient checks and quick tests.
    pub fn tiny(m: usize, n: usize, k: usize, d: usize, heads: usize, class_count: usize) -> Self {
        let per_head = d / (2 * heads);
        HiFANetConfig {
            m,
            n,
            k,
            d,
            d1: per_head.max(1),
            heads,
            d2: per_head.max(1),
            class_count,
            ffn_width: d,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all_positive = self.m > 0
            && self.n > 0
            && self.k > 0
            && self.d > 0
            && self.d1 > 0
            && self.heads > 0
            && self.d2 > 0
            && self.class_count > 0
            && self.ffn_width > 0;
        if !all_positive {
            return Err("all config dimensions must be positive".into());
        }
        if self.k % 2 == 0 {
            return Err(format!("patch side k={} must be odd", self.k));
        }
        if self.heads * self.d1 > self.d {
            return Err(format!(
                "heads*d1 = {} exceeds feature width d = {}",
                self.heads * self.d1,
                self.d
            ));
        }
        if self.d % self.heads != 0 {
            return Err(format!("d={} must divide evenly across {} heads", self.d, self.heads));
        }
        Ok(())
    }

    /// Flat index of the principal (center) pixel within a k*k patch.
    pub fn principal_index(&self) -> usize {
        (self.k / 2) * self.k + self.k / 2
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k
    }
}

fn init_weight(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
    store
        .insert(&format!("{name}.w"), Tensor::new(alloc::vec![fan_in, fan_out], data).unwrap())
        .expect("parameter names are unique by construction");
}

fn init_linear(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    init_weight(store, rng, name, fan_in, fan_out);
    store
        .insert(&format!("{name}.b"), Tensor::zeros(alloc::vec![fan_out]))
        .expect("parameter names are unique by construction");
}

/// Adds one attention block's parameters (key/query/value projections plus
/// the feed-forward net) under `prefix`. Key projections carry no bias: a
/// shared offset on every key cancels inside the softmax.
pub fn init_attention_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    cfg: &HiFANetConfig,
    kq_width: usize,
) {
    init_weight(store, rng, &format!("{prefix}.key"), cfg.d, cfg.heads * kq_width);
    init_linear(store, rng, &format!("{prefix}.query"), cfg.d, cfg.heads * kq_width);
    init_linear(store, rng, &format!("{prefix}.value"), cfg.d, cfg.d);
    init_linear(store, rng, &format!("{prefix}.ffn1"), cfg.d, cfg.ffn_width);
    init_linear(store, rng, &format!("{prefix}.ffn2"), cfg.ffn_width, cfg.d);
}

/// The second prior layer is bias-free for the same reason as the key
/// projections: its bias would shift every key identically.
pub fn init_prior(store: &mut ParamStore, rng: &mut Rng, cfg: &HiFANetConfig) {
    init_linear(store, rng, "prior.fc1", 3, PRIOR_HIDDEN);
    init_weight(store, rng, "prior.fc2", PRIOR_HIDDEN, cfg.heads * cfg.d2);
}

pub fn init_classifier(store: &mut ParamStore, rng: &mut Rng, cfg: &HiFANetConfig) {
    init_linear(store, rng, "head.fc1", cfg.d, CLASSIFIER_HIDDEN);
    init_linear(store, rng, "head.fc2", CLASSIFIER_HIDDEN, CLASSIFIER_HIDDEN);
    init_linear(store, rng, "head.out", CLASSIFIER_HIDDEN, cfg.class_count);
}

/// Fresh parameters for the full network: three attention blocks, the
/// structural-prior encoder and the classifier head. Weights are uniform
/// `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(cfg: &HiFANetConfig, seed: u64) -> ParamStore {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    init_attention_block(&mut store, &mut rng, "patch", cfg, cfg.d1);
    init_attention_block(&mut store, &mut rng, "instance", cfg, cfg.d1);
    init_attention_block(&mut store, &mut rng, "inter", cfg, cfg.d2);
    init_prior(&mut store, &mut rng, cfg);
    init_classifier(&mut store, &mut rng, cfg);
    store
}

/// Total trainable element count.
pub fn count_parameters(params: &ParamStore) -> usize {
    params.param_count()
}

/// Per-module parameter counts, grouped by the prefix before the first dot.
pub fn parameter_breakdown(params: &ParamStore) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, tensor) in params.iter() {
        let module = name.split('.').next().unwrap_or(name);
        match out.iter_mut().find(|(m, _)| m == module) {
            Some((_, count)) => *count += tensor.numel(),
            None => out.push((module.into(), tensor.numel())),
        }
    }
    out
}

/// A weight/bias pair bound onto a tape.
#[derive(Clone, Copy)]
pub struct LinearVars {
    pub(crate) w: Var,
    pub(crate) b: Var,
}

pub(crate) fn bind_linear(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
) -> Result<LinearVars, NumericsError> {
    Ok(LinearVars {
        w: tape.param(store, &format!("{name}.w"))?,
        b: tape.param(store, &format!("{name}.b"))?,
    })
}

/// One attention block's parameters bound onto a tape. Binding copies the
/// parameter values once, so a batch of forwards shares one binding.
#[derive(Clone, Copy)]
pub struct AttentionVars {
    key_w: Var,
    query: LinearVars,
    value: LinearVars,
    ffn1: LinearVars,
    ffn2: LinearVars,
}

/// Binds the attention block stored under `prefix` onto the tape.
pub fn bind_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
) -> Result<AttentionVars, NumericsError> {
    Ok(AttentionVars {
        key_w: tape.param(store, &format!("{prefix}.key.w"))?,
        query: bind_linear(tape, store, &format!("{prefix}.query"))?,
        value: bind_linear(tape, store, &format!("{prefix}.value"))?,
        ffn1: bind_linear(tape, store, &format!("{prefix}.ffn1"))?,
        ffn2: bind_linear(tape, store, &format!("{prefix}.ffn2"))?,
    })
}

/// The structural-prior encoder bound onto a tape.
#[derive(Clone, Copy)]
pub struct PriorVars {
    fc1: LinearVars,
    fc2_w: Var,
}

pub fn bind_prior(tape: &mut Tape, store: &ParamStore) -> Result<PriorVars, NumericsError> {
    Ok(PriorVars {
        fc1: bind_linear(tape, store, "prior.fc1")?,
        fc2_w: tape.param(store, "prior.fc2.w")?,
    })
}

/// The classifier head bound onto a tape.
#[derive(Clone, Copy)]
pub struct ClassifierVars {
    fc1: LinearVars,
    fc2: LinearVars,
    out: LinearVars,
}

pub fn bind_classifier(tape: &mut Tape, store: &ParamStore) -> Result<ClassifierVars, NumericsError> {
    Ok(ClassifierVars {
        fc1: bind_linear(tape, store, "head.fc1")?,
        fc2: bind_linear(tape, store, "head.fc2")?,
        out: bind_linear(tape, store, "head.out")?,
    })
}

fn feed_forward(tape: &mut Tape, x: Var, block: &AttentionVars) -> Result<Var, NumericsError> {
    let h = tape.linear(x, block.ffn1.w, block.ffn1.b)?;
    let h = tape.relu(h);
    tape.linear(h, block.ffn2.w, block.ffn2.b)
}

/// Multi-head scaled dot-product attention for one sequence: queries
/// `[q_rows, heads*kq]`, keys `[s_rows, heads*kq]`, values `[s_rows, d]`.
/// Value columns are split evenly across heads and re-concatenated.
fn attend(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    kq_width: usize,
    d: usize,
) -> Result<Var, NumericsError> {
    let dv = d / heads;
    let scale = 1.0 / libm::sqrt(kq_width as f64);
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(queries, h * kq_width, kq_width)?;
        let kh = tape.slice_cols(keys, h * kq_width, kq_width)?;
        let vh = tape.slice_cols(values, h * dv, dv)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax(logits, 1)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    tape.concat(&head_outputs, 1)
}

/// Patch attention: aggregates each k*k patch into one instance feature.
///
/// `pixels` is `[seqs * k * k, d]` with patches stored contiguously; the
/// center pixel of each patch supplies the query and the shortcut feature.
/// Returns `[seqs, d]`.
pub fn patch_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    pixels: Var,
    seqs: usize,
) -> Result<Var, NumericsError> {
    let block = bind_attention(tape, store, "patch")?;
    patch_attention_bound(tape, &block, cfg, pixels, seqs)
}

/// [`patch_attention`] against an existing binding.
pub fn patch_attention_bound(
    tape: &mut Tape,
    block: &AttentionVars,
    cfg: &HiFANetConfig,
    pixels: Var,
    seqs: usize,
) -> Result<Var, NumericsError> {
    let k2 = cfg.patch_len();
    let principal: Vec<usize> =
        (0..seqs).map(|s| s * k2 + cfg.principal_index()).collect();

    let keys = tape.matmul(pixels, block.key_w)?;
    let values = tape.linear(pixels, block.value.w, block.value.b)?;
    // Only the principal pixel ever queries; project just those rows.
    let principal_pixels = tape.gather_rows(pixels, &principal)?;
    let queries = tape.linear(principal_pixels, block.query.w, block.query.b)?;

    let mut rows = Vec::with_capacity(seqs);
    for s in 0..seqs {
        let k_s = tape.slice_rows(keys, s * k2, k2)?;
        let v_s = tape.slice_rows(values, s * k2, k2)?;
        let q_s = tape.slice_rows(queries, s, 1)?;
        rows.push(attend(tape, q_s, k_s, v_s, cfg.heads, cfg.d1, cfg.d)?);
    }
    let attended = tape.concat(&rows, 0)?;
    let transformed = feed_forward(tape, attended, block)?;
    // Shortcut: the raw principal-pixel feature.
    tape.add(transformed, principal_pixels)
}

/// Instance attention: self-attention across the `n` frames of each point,
/// feed-forward, then average pooling over frames. Input `[points * n, d]`,
/// output `[points, d]`. Order-permutation invariant in the frame axis.
pub fn instance_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    instances: Var,
    points: usize,
) -> Result<Var, NumericsError> {
    let block = bind_attention(tape, store, "instance")?;
    instance_attention_bound(tape, &block, cfg, instances, points)
}

/// [`instance_attention`] against an existing binding.
pub fn instance_attention_bound(
    tape: &mut Tape,
    block: &AttentionVars,
    cfg: &HiFANetConfig,
    instances: Var,
    points: usize,
) -> Result<Var, NumericsError> {
    let n = cfg.n;
    let keys = tape.matmul(instances, block.key_w)?;
    let queries = tape.linear(instances, block.query.w, block.query.b)?;
    let values = tape.linear(instances, block.value.w, block.value.b)?;

    let mut rows = Vec::with_capacity(points);
    for p in 0..points {
        let k_p = tape.slice_rows(keys, p * n, n)?;
        let q_p = tape.slice_rows(queries, p * n, n)?;
        let v_p = tape.slice_rows(values, p * n, n)?;
        rows.push(attend(tape, q_p, k_p, v_p, cfg.heads, cfg.d1, cfg.d)?);
    }
    let attended = tape.concat(&rows, 0)?;
    let transformed = feed_forward(tape, attended, block)?;
    let mut pooled = Vec::with_capacity(points);
    for p in 0..points {
        let rows_p = tape.slice_rows(transformed, p * n, n)?;
        pooled.push(tape.mean_over_axis(rows_p, 0)?);
    }
    tape.concat(&pooled, 0)
}

/// Structural prior: every pairwise coordinate difference `p_i - p_j` runs
/// through a two-layer MLP; row `i` of the output is the mean over `j` of
/// the encoded differences. Output `[m, heads * d2]`, matching the
/// inter-point key width. Invariant to translating all coordinates.
pub fn structural_prior(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    coords: &[[f64; 3]],
) -> Result<Var, NumericsError> {
    let vars = bind_prior(tape, store)?;
    structural_prior_bound(tape, &vars, cfg, coords)
}

/// [`structural_prior`] against an existing binding.
pub fn structural_prior_bound(
    tape: &mut Tape,
    vars: &PriorVars,
    _cfg: &HiFANetConfig,
    coords: &[[f64; 3]],
) -> Result<Var, NumericsError> {
    let m = coords.len();
    let fc1 = vars.fc1;
    let fc2_w = vars.fc2_w;
    let mut diffs = Vec::with_capacity(m * m * 3);
    for a in coords {
        for b in coords {
            diffs.push((a[0] - b[0]) / PRIOR_INPUT_SCALE_M);
            diffs.push((a[1] - b[1]) / PRIOR_INPUT_SCALE_M);
            diffs.push((a[2] - b[2]) / PRIOR_INPUT_SCALE_M);
        }
    }
    let diffs = tape.leaf_matrix(m * m, 3, diffs);
    let hidden = tape.linear(diffs, fc1.w, fc1.b)?;
    let hidden = tape.relu(hidden);
    let encoded = tape.matmul(hidden, fc2_w)?;
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let block = tape.slice_rows(encoded, i * m, m)?;
        rows.push(tape.mean_over_axis(block, 0)?);
    }
    tape.concat(&rows, 0)
}

/// Inter-point attention over the `m` points of a group. Keys are shifted by
/// the structural prior when `prior` is given. Input `[m, d]`, output `[m, d]`.
pub fn interpoint_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    features: Var,
    prior: Option<Var>,
) -> Result<Var, NumericsError> {
    let block = bind_attention(tape, store, "inter")?;
    interpoint_attention_bound(tape, &block, cfg, features, prior)
}

/// [`interpoint_attention`] against an existing binding.
pub fn interpoint_attention_bound(
    tape: &mut Tape,
    block: &AttentionVars,
    cfg: &HiFANetConfig,
    features: Var,
    prior: Option<Var>,
) -> Result<Var, NumericsError> {
    let keys = tape.matmul(features, block.key_w)?;
    let keys = match prior {
        Some(pe) => tape.add(keys, pe)?,
        None => keys,
    };
    let queries = tape.linear(features, block.query.w, block.query.b)?;
    let values = tape.linear(features, block.value.w, block.value.b)?;
    let attended = attend(tape, queries, keys, values, cfg.heads, cfg.d2, cfg.d)?;
    feed_forward(tape, attended, block)
}

/// Classifier head: `d -> 512 -> 512 -> class_count` with ReLU between.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    features: Var,
) -> Result<Var, NumericsError> {
    let vars = bind_classifier(tape, store)?;
    classify_bound(tape, &vars, cfg, features)
}

/// [`classify`] against an existing binding.
pub fn classify_bound(
    tape: &mut Tape,
    vars: &ClassifierVars,
    _cfg: &HiFANetConfig,
    features: Var,
) -> Result<Var, NumericsError> {
    let h = tape.linear(features, vars.fc1.w, vars.fc1.b)?;
    let h = tape.relu(h);
    let h = tape.linear(h, vars.fc2.w, vars.fc2.b)?;
    let h = tape.relu(h);
    tape.linear(h, vars.out.w, vars.out.b)
}

/// Full forward pass: patch -> instance -> inter-point (+prior) -> classify.
/// Returns `[m, class_count]` logits for the group.
pub fn hifanet_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HiFANetConfig,
    obs: &ObservationTensor,
) -> Result<Var, NumericsError> {
    let (rows, cols, data) = obs.feature_matrix();
    let pixels = tape.leaf_matrix(rows, cols, data);
    let instances = patch_attention(tape, store, cfg, pixels, cfg.m * cfg.n)?;
    let point_features = instance_attention(tape, store, cfg, instances, cfg.m)?;
    let prior = structural_prior(tape, store, cfg, obs.coords())?;
    let refined = interpoint_attention(tape, store, cfg, point_features, Some(prior))?;
    classify(tape, store, cfg, refined)
}

//! Forward and reverse-mode evaluation.
//!
//! Two entry points exist at each arity:
//! * per-sample [`forward`]/[`backward`] — inference-style evaluation where
//!   mean-shift layers use their finalized running mean;
//! * batch [`forward_batch`]/[`backward_batch`] — training-style evaluation
//!   where mean-shift layers use batch statistics (with the exact batch-mean
//!   Jacobian in the backward pass) and per-sample gradient contributions are
//!   reduced deterministically in fixed-size chunks.
//!
//! SortNet layers evaluate in one of two modes:
//! * exact — per neuron wᵀ sort(σ(x + b_k)), optionally truncated to the
//!   top-k order statistics (geometric weights only), accumulating a sound
//!   bound on the truncation deficit;
//! * stochastic — the Bernoulli-max estimator: max over mask-kept indices of
//!   σ(x_j + b_kj), optionally smoothed by the ℓp relaxation at finite p.

use super::{ActKind, Layer, Network, SortWeights};
use crate::error::{Error, Result};
use crate::numeric::{dot, linf_norm, sort_desc, top_k};
use crate::parallel::{par_chunk_map, par_map_idx};
use crate::rng::{bernoulli_mask, RandomSource};

/// Sample chunk size used for deterministic parallel gradient reduction.
const GRAD_CHUNK: usize = 16;

/// Per-layer Bernoulli masks for one sample. `None` keeps every coordinate
/// (used for non-SortNet layers and for the first SortNet layer, whose input
/// is the raw sample and is not dropped).
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub masks: Vec<Option<Vec<bool>>>,
}

impl MaskPlan {
    /// Sample the plan for `(epoch, sample)` from the counter-based source.
    /// The stream for each SortNet layer is addressed by
    /// `(seed, epoch, sample, layer)`, so plans are pure functions of their
    /// address regardless of evaluation order.
    pub fn sample(
        net: &Network,
        src: &RandomSource,
        epoch: u64,
        sample: u64,
        mask_input: bool,
    ) -> Result<MaskPlan> {
        let mut masks = Vec::with_capacity(net.layers.len());
        let mut dim = net.input_dim;
        let mut first_sortnet = true;
        for (li, layer) in net.layers.iter().enumerate() {
            let m = match layer {
                Layer::SortNet {
                    weights: SortWeights::Geometric { rho },
                    ..
                } => {
                    if first_sortnet && !mask_input {
                        first_sortnet = false;
                        None
                    } else {
                        first_sortnet = false;
                        let mut stream = src.stream(&[epoch, sample, li as u64]);
                        Some(bernoulli_mask(&mut stream, dim, 1.0 - rho)?)
                    }
                }
                _ => None,
            };
            masks.push(m);
            dim = layer.out_dim(dim)?;
        }
        Ok(MaskPlan { masks })
    }

    /// A plan that keeps everything (stochastic mode degenerates to the
    /// plain max over all coordinates).
    pub fn keep_all(net: &Network) -> MaskPlan {
        MaskPlan {
            masks: vec![None; net.layers.len()],
        }
    }
}

/// Evaluation options for a single sample.
#[derive(Debug, Clone, Copy)]
pub struct EvalOpts<'a> {
    /// `Some` selects stochastic mode with these masks; `None` is exact.
    pub mask: Option<&'a MaskPlan>,
    /// ℓp-relaxation exponent for the stochastic max; `f64::INFINITY` is the
    /// hard max. Ignored in exact mode.
    pub p: f64,
    /// Exact-mode truncation: keep only the top-k order statistics in
    /// geometric SortNet neurons.
    pub k_trunc: Option<usize>,
}

impl Default for EvalOpts<'_> {
    fn default() -> Self {
        EvalOpts {
            mask: None,
            p: f64::INFINITY,
            k_trunc: None,
        }
    }
}

impl EvalOpts<'_> {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn exact_truncated(k: usize) -> Self {
        EvalOpts {
            k_trunc: Some(k),
            ..Self::default()
        }
    }
}

/// Per-layer routing information recorded by the forward pass.
#[derive(Debug, Clone)]
pub enum Aux {
    None,
    /// MaxMin: `perm[out] = in` within-group sort permutation.
    Perm(Vec<usize>),
    /// LinfDist: per-neuron (argmax coordinate, sign of x_j − w_kj).
    ArgSign(Vec<(usize, f64)>),
    /// Exact SortNet: per-neuron original indices of the (possibly
    /// truncated) descending order statistics.
    SortIdx(Vec<Vec<usize>>),
    /// Stochastic SortNet: kept coordinates, plus per-neuron argmax
    /// (usize::MAX when the kept set is empty) used at p = ∞.
    Stoch {
        kept: Vec<usize>,
        arg: Vec<usize>,
    },
}

/// Forward record for one sample: the input to every layer (plus the final
/// output at index `layers.len()`), per-layer routing, the mode fingerprint,
/// and a sound bound on the total truncation deficit per output coordinate.
#[derive(Debug, Clone)]
pub struct Cache {
    pub inputs: Vec<Vec<f64>>,
    pub aux: Vec<Aux>,
    pub p: f64,
    pub trunc_err: f64,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("cache has at least the input")
    }
}

/// Gradients mirroring the network's trainable parameters
/// (`layers[l][slot]`, aligned with [`Layer::param_lens`]), plus the
/// gradient with respect to each evaluated input sample.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub input: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros(net: &Network) -> Self {
        GradientBundle {
            layers: net
                .layers
                .iter()
                .map(|l| l.param_lens().iter().map(|&n| vec![0.0; n]).collect())
                .collect(),
            input: Vec::new(),
        }
    }

    /// Elementwise accumulate (`self += other`), ignoring input gradients.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
            }
        }
    }

    /// Scale all parameter gradients by `c`.
    pub fn scale(&mut self, c: f64) {
        for slot in self.layers.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Flat parameter-gradient views in the same order as
    /// [`Network::params`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for slot in layer {
                out.push(slot.as_slice());
            }
        }
        out
    }
}

/// ℓp smoothing threshold: terms with (z/max)^p below ~1e-16 are skipped.
/// Purely value-dependent, hence deterministic.
#[inline]
fn lp_cutoff(p: f64) -> f64 {
    (-36.8 / p).exp()
}

/// x^p for the relaxation exponent: integer p uses binary exponentiation.
#[inline]
fn pow_rel(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < 2_147_000_000.0 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

/// One layer's forward step. Returns the output, routing aux, and — for
/// truncated SortNet layers — (ρ^k, max‖z‖∞) used for deficit tracking.
fn layer_forward(
    layer: &Layer,
    li: usize,
    x: &[f64],
    mask: Option<&[bool]>,
    p: f64,
    k_trunc: Option<usize>,
    bn_mean: Option<&[f64]>,
) -> Result<(Vec<f64>, Aux, Option<(f64, f64)>)> {
    match layer {
        Layer::Affine { weight, bias, .. } => {
            let mut y = weight.matvec(x)?;
            for (v, b) in y.iter_mut().zip(bias) {
                *v += b;
            }
            Ok((y, Aux::None, None))
        }
        Layer::Activation { kind } => {
            Ok((x.iter().map(|&v| kind.apply(v)).collect(), Aux::None, None))
        }
        Layer::MaxMin { group } => {
            let mut y = vec![0.0; x.len()];
            let mut perm = vec![0usize; x.len()];
            for g0 in (0..x.len()).step_by(*group) {
                let (vals, idx) = sort_desc(&x[g0..g0 + group])?;
                for (off, (v, i)) in vals.iter().zip(&idx).enumerate() {
                    y[g0 + off] = *v;
                    perm[g0 + off] = g0 + i;
                }
            }
            Ok((y, Aux::Perm(perm), None))
        }
        Layer::LinfDist { weight, bias } => {
            if x.len() != weight.cols {
                return Err(Error::ShapeMismatch {
                    context: "linf-dist forward",
                    expected: weight.cols,
                    actual: x.len(),
                });
            }
            let mut y = vec![0.0; weight.rows];
            let mut arg = Vec::with_capacity(weight.rows);
            for k in 0..weight.rows {
                let w = weight.row(k);
                let (mut best, mut bj, mut bs) = (f64::NEG_INFINITY, 0usize, 0.0);
                for (j, (&xj, &wj)) in x.iter().zip(w).enumerate() {
                    let d = xj - wj;
                    let a = d.abs();
                    if a > best {
                        best = a;
                        bj = j;
                        bs = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
                y[k] = best + bias[k];
                arg.push((bj, bs));
            }
            Ok((y, Aux::ArgSign(arg), None))
        }
        Layer::SortNet { weights, bias, act } => {
            if x.len() != bias.cols {
                return Err(Error::ShapeMismatch {
                    context: "sortnet forward",
                    expected: bias.cols,
                    actual: x.len(),
                });
            }
            match mask {
                None => sortnet_exact(weights, bias, act, x, k_trunc),
                Some(m) => sortnet_stochastic(weights, bias, act, x, m, p, li),
            }
        }
        Layer::MeanShiftBn { dim, running_mean } => {
            if x.len() != *dim {
                return Err(Error::ShapeMismatch {
                    context: "mean-shift forward",
                    expected: *dim,
                    actual: x.len(),
                });
            }
            let mean = match bn_mean {
                Some(m) => m,
                None => running_mean
                    .as_deref()
                    .ok_or(Error::UnfinalizedRunningMean(li))?,
            };
            let y = x.iter().zip(mean).map(|(v, m)| v - m).collect();
            Ok((y, Aux::None, None))
        }
    }
}

/// Exact SortNet evaluation: wᵀ sort(σ(x + b_k)) per neuron, truncated to
/// the top-k statistics for geometric weights when requested.
fn sortnet_exact(
    weights: &SortWeights,
    bias: &crate::numeric::Tensor,
    act: &ActKind,
    x: &[f64],
    k_trunc: Option<usize>,
) -> Result<(Vec<f64>, Aux, Option<(f64, f64)>)> {
    let d = x.len();
    let width = bias.rows;
    let mut y = vec![0.0; width];
    let mut all_idx = Vec::with_capacity(width);
    let mut z = vec![0.0; d];
    let mut max_z_inf: f64 = 0.0;
    let mut truncating = false;
    for k in 0..width {
        let b = bias.row(k);
        for j in 0..d {
            z[j] = act.apply(x[j] + b[j]);
        }
        match weights {
            SortWeights::Geometric { rho } => {
                let keep = k_trunc.unwrap_or(d).min(d);
                truncating = keep < d;
                if truncating {
                    max_z_inf = max_z_inf.max(linf_norm(&z));
                }
                let (vals, idx) = top_k(&z, keep)?;
                let mut acc = 0.0;
                let mut w = 1.0 - rho;
                for v in &vals {
                    acc += w * v;
                    w *= rho;
                }
                y[k] = acc;
                all_idx.push(idx);
            }
            SortWeights::Explicit { weight } => {
                let (vals, idx) = sort_desc(&z)?;
                y[k] = dot(weight.row(k), &vals);
                all_idx.push(idx);
            }
        }
    }
    let trunc = if truncating {
        if let SortWeights::Geometric { rho } = weights {
            let keep = k_trunc.unwrap_or(d).min(d) as i32;
            Some((rho.powi(keep), max_z_inf))
        } else {
            None
        }
    } else {
        None
    };
    Ok((y, Aux::SortIdx(all_idx), trunc))
}

/// Stochastic SortNet evaluation: per neuron, the (possibly ℓp-relaxed) max
/// of σ(x_j + b_kj) over mask-kept coordinates; 0 when nothing is kept.
/// Requires nonnegative activation outputs (the estimator's precondition).
fn sortnet_stochastic(
    weights: &SortWeights,
    bias: &crate::numeric::Tensor,
    act: &ActKind,
    x: &[f64],
    mask: &[bool],
    p: f64,
    li: usize,
) -> Result<(Vec<f64>, Aux, Option<(f64, f64)>)> {
    if !matches!(weights, SortWeights::Geometric { .. }) {
        return Err(Error::UnsupportedLayer {
            operation: "stochastic forward",
            layer: "sortnet with explicit weights".into(),
        });
    }
    let kept: Vec<usize> = (0..x.len()).filter(|&j| mask[j]).collect();
    let width = bias.rows;
    let mut y = vec![0.0; width];
    let mut arg = vec![usize::MAX; width];
    let finite_p = p.is_finite();
    let cutoff = if finite_p { lp_cutoff(p) } else { 0.0 };
    for k in 0..width {
        let b = bias.row(k);
        // Hard max (and argmax) over kept coordinates.
        let (mut m, mut mj) = (0.0f64, usize::MAX);
        for &j in &kept {
            let z = act.apply(x[j] + b[j]);
            if z < 0.0 {
                return Err(Error::NegativeStochasticInput {
                    layer: li,
                    value: z,
                });
            }
            if z > m {
                m = z;
                mj = j;
            }
        }
        arg[k] = mj;
        if !finite_p || m == 0.0 {
            y[k] = m;
        } else {
            // ℓp relaxation normalized by the max: y = m · (Σ (z/m)^p)^{1/p}.
            let mut s = 0.0;
            for &j in &kept {
                let t = act.apply(x[j] + b[j]) / m;
                if t >= cutoff {
                    s += pow_rel(t, p);
                }
            }
            y[k] = m * s.powf(1.0 / p);
        }
    }
    Ok((y, Aux::Stoch { kept, arg }, None))
}

/// One layer's backward step. `x`/`out` are the recorded input/output,
/// `gout` the incoming adjoint. Accumulates parameter gradients into
/// `grads` when given and returns the input adjoint.
fn layer_backward(
    layer: &Layer,
    x: &[f64],
    aux: &Aux,
    out: &[f64],
    gout: &[f64],
    p: f64,
    mut grads: Option<&mut [Vec<f64>]>,
) -> Result<Vec<f64>> {
    match (layer, aux) {
        (Layer::Affine { weight, .. }, Aux::None) => {
            let gin = weight.matvec_t(gout)?;
            if let Some(gs) = grads.as_deref_mut() {
                let (gw, gb) = gs.split_at_mut(1);
                for k in 0..weight.rows {
                    let gk = gout[k];
                    if gk != 0.0 {
                        let row = &mut gw[0][k * weight.cols..(k + 1) * weight.cols];
                        for (g, &xv) in row.iter_mut().zip(x) {
                            *g += gk * xv;
                        }
                    }
                    gb[0][k] += gk;
                }
            }
            Ok(gin)
        }
        (Layer::Activation { kind }, Aux::None) => Ok(x
            .iter()
            .zip(gout)
            .map(|(&xv, &g)| g * kind.derivative(xv))
            .collect()),
        (Layer::MaxMin { .. }, Aux::Perm(perm)) => {
            let mut gin = vec![0.0; x.len()];
            for (o, &i) in perm.iter().enumerate() {
                gin[i] += gout[o];
            }
            Ok(gin)
        }
        (Layer::LinfDist { weight, .. }, Aux::ArgSign(arg)) => {
            let mut gin = vec![0.0; x.len()];
            if let Some(gs) = grads.as_deref_mut() {
                let (gw, gb) = gs.split_at_mut(1);
                for (k, &(j, s)) in arg.iter().enumerate() {
                    let gk = gout[k];
                    gin[j] += gk * s;
                    gw[0][k * weight.cols + j] -= gk * s;
                    gb[0][k] += gk;
                }
            } else {
                for (k, &(j, s)) in arg.iter().enumerate() {
                    gin[j] += gout[k] * s;
                }
            }
            Ok(gin)
        }
        (Layer::SortNet { weights, bias, act }, Aux::SortIdx(idx)) => {
            let mut gin = vec![0.0; x.len()];
            for k in 0..bias.rows {
                let gk = gout[k];
                if gk == 0.0 {
                    continue;
                }
                let b = bias.row(k);
                match weights {
                    SortWeights::Geometric { rho } => {
                        let mut w = 1.0 - rho;
                        for &j in &idx[k] {
                            let c = gk * w * act.derivative(x[j] + b[j]);
                            gin[j] += c;
                            if let Some(gs) = grads.as_deref_mut() {
                                gs[0][k * bias.cols + j] += c;
                            }
                            w *= rho;
                        }
                    }
                    SortWeights::Explicit { weight } => {
                        let wrow = weight.row(k);
                        for (rank, &j) in idx[k].iter().enumerate() {
                            let c = gk * wrow[rank] * act.derivative(x[j] + b[j]);
                            gin[j] += c;
                            if let Some(gs) = grads.as_deref_mut() {
                                gs[0][k * bias.cols + j] += c;
                            }
                        }
                    }
                }
            }
            Ok(gin)
        }
        (Layer::SortNet { bias, act, .. }, Aux::Stoch { kept, arg }) => {
            let mut gin = vec![0.0; x.len()];
            let finite_p = p.is_finite();
            let cutoff = if finite_p && p > 1.0 {
                lp_cutoff(p - 1.0)
            } else {
                0.0
            };
            for k in 0..bias.rows {
                let gk = gout[k];
                if gk == 0.0 {
                    continue;
                }
                let b = bias.row(k);
                if !finite_p {
                    let j = arg[k];
                    if j != usize::MAX {
                        let c = gk * act.derivative(x[j] + b[j]);
                        gin[j] += c;
                        if let Some(gs) = grads.as_deref_mut() {
                            gs[0][k * bias.cols + j] += c;
                        }
                    }
                } else {
                    let y = out[k];
                    if y <= 0.0 {
                        continue;
                    }
                    // dy/dz_j = (z_j / y)^{p−1}; recomputed rather than
                    // cached to keep batch memory flat.
                    for &j in kept {
                        let pre = x[j] + b[j];
                        let t = act.apply(pre) / y;
                        if t < cutoff {
                            continue;
                        }
                        let c = gk * pow_rel(t, p - 1.0) * act.derivative(pre);
                        gin[j] += c;
                        if let Some(gs) = grads.as_deref_mut() {
                            gs[0][k * bias.cols + j] += c;
                        }
                    }
                }
            }
            Ok(gin)
        }
        (Layer::MeanShiftBn { .. }, Aux::None) => {
            // Running-mean mode: the subtracted mean is a constant.
            // Batch mode is handled by backward_batch.
            Ok(gout.to_vec())
        }
        _ => Err(Error::InvalidArgument(
            "stale cache: aux record does not match layer kind".into(),
        )),
    }
}

/// Per-sample forward pass. Mean-shift layers use their finalized running
/// mean; use [`forward_batch`] for training-style batch statistics.
pub fn forward(net: &Network, x: &[f64], opts: &EvalOpts) -> Result<Cache> {
    if x.len() != net.input_dim {
        return Err(Error::ShapeMismatch {
            context: "network input",
            expected: net.input_dim,
            actual: x.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("network input"));
    }
    let mut inputs = Vec::with_capacity(net.layers.len() + 1);
    let mut auxes = Vec::with_capacity(net.layers.len());
    inputs.push(x.to_vec());
    let mut trunc_err = 0.0;
    for (li, layer) in net.layers.iter().enumerate() {
        let mask = opts
            .mask
            .and_then(|m| m.masks.get(li))
            .and_then(|m| m.as_deref());
        if opts.mask.is_some() && mask.is_none() {
            // Stochastic mode with a keep-all entry for this layer is fine —
            // but a plan that is too short is a caller bug.
            if opts.mask.map(|m| m.masks.len()) != Some(net.layers.len()) {
                return Err(Error::MissingMask(li));
            }
        }
        let stoch_mask = if opts.mask.is_some() {
            match layer {
                Layer::SortNet { .. } => Some(
                    mask.map(|m| m.to_vec())
                        .unwrap_or_else(|| vec![true; inputs[li].len()]),
                ),
                _ => None,
            }
        } else {
            None
        };
        let (y, aux, trunc) = layer_forward(
            layer,
            li,
            &inputs[li],
            stoch_mask.as_deref(),
            opts.p,
            opts.k_trunc,
            None,
        )?;
        if let Some((rho_k, max_z)) = trunc {
            trunc_err += rho_k * (max_z + trunc_err);
        }
        inputs.push(y);
        auxes.push(aux);
    }
    Ok(Cache {
        inputs,
        aux: auxes,
        p: opts.p,
        trunc_err,
    })
}

/// Per-sample reverse pass. `want_param_grads = false` computes only the
/// input gradient (used by PGD).
pub fn backward(
    net: &Network,
    cache: &Cache,
    dlogits: &[f64],
    want_param_grads: bool,
) -> Result<GradientBundle> {
    if cache.inputs.len() != net.layers.len() + 1 || cache.aux.len() != net.layers.len() {
        return Err(Error::InvalidArgument(
            "stale cache: layer count mismatch".into(),
        ));
    }
    let out_dim = cache.output().len();
    if dlogits.len() != out_dim {
        return Err(Error::ShapeMismatch {
            context: "backward dlogits",
            expected: out_dim,
            actual: dlogits.len(),
        });
    }
    let mut bundle = GradientBundle::zeros(net);
    let mut g = dlogits.to_vec();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        let grads = if want_param_grads {
            Some(bundle.layers[li].as_mut_slice())
        } else {
            None
        };
        g = layer_backward(
            layer,
            &cache.inputs[li],
            &cache.aux[li],
            &cache.inputs[li + 1],
            &g,
            cache.p,
            grads,
        )?;
    }
    bundle.input = vec![g];
    Ok(bundle)
}

/// Batch evaluation options.
#[derive(Debug, Clone, Copy)]
pub struct BatchOpts<'a> {
    /// Per-sample mask plans (stochastic mode) or `None` for exact.
    pub masks: Option<&'a [MaskPlan]>,
    pub p: f64,
    pub k_trunc: Option<usize>,
    /// Use batch statistics in mean-shift layers (training) instead of the
    /// finalized running mean (inference).
    pub bn_batch: bool,
}

impl Default for BatchOpts<'_> {
    fn default() -> Self {
        BatchOpts {
            masks: None,
            p: f64::INFINITY,
            k_trunc: None,
            bn_batch: false,
        }
    }
}

/// Forward record for a batch: `acts[l][s]` is sample `s`'s input to layer
/// `l` (index `layers.len()` holds the outputs); `bn_means[l]` the batch
/// mean subtracted at a batch-mode mean-shift layer.
#[derive(Debug)]
pub struct BatchForward {
    pub acts: Vec<Vec<Vec<f64>>>,
    pub aux: Vec<Vec<Aux>>,
    pub bn_means: Vec<Option<Vec<f64>>>,
    pub p: f64,
    pub trunc_err: f64,
}

impl BatchForward {
    pub fn outputs(&self) -> &[Vec<f64>] {
        self.acts.last().expect("batch cache has outputs")
    }
}

/// Batch forward pass; samples evaluate in parallel layer-by-layer, and
/// batch-mode mean-shift layers compute their means sequentially in sample
/// order (deterministic regardless of thread count).
pub fn forward_batch(net: &Network, xs: &[Vec<f64>], opts: &BatchOpts) -> Result<BatchForward> {
    let n = xs.len();
    if let Some(masks) = opts.masks {
        if masks.len() != n {
            return Err(Error::ShapeMismatch {
                context: "batch masks",
                expected: n,
                actual: masks.len(),
            });
        }
    }
    for x in xs {
        if x.len() != net.input_dim {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: net.input_dim,
                actual: x.len(),
            });
        }
    }
    let mut acts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(net.layers.len() + 1);
    acts.push(xs.to_vec());
    let mut aux: Vec<Vec<Aux>> = Vec::with_capacity(net.layers.len());
    let mut bn_means: Vec<Option<Vec<f64>>> = Vec::with_capacity(net.layers.len());
    let mut trunc_err = 0.0f64;
    for (li, layer) in net.layers.iter().enumerate() {
        let cur = &acts[li];
        if opts.bn_batch {
            if let Layer::MeanShiftBn { dim, .. } = layer {
                let mut mean = vec![0.0; *dim];
                for x in cur {
                    for (m, v) in mean.iter_mut().zip(x) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let outs = cur
                    .iter()
                    .map(|x| x.iter().zip(&mean).map(|(v, m)| v - m).collect())
                    .collect();
                acts.push(outs);
                aux.push(vec![Aux::None; n]);
                bn_means.push(Some(mean));
                continue;
            }
        }
        let results: Vec<Result<(Vec<f64>, Aux, Option<(f64, f64)>)>> = par_map_idx(n, |s| {
            let mask = opts.masks.and_then(|ms| {
                if matches!(layer, Layer::SortNet { .. }) {
                    Some(
                        ms[s].masks[li]
                            .clone()
                            .unwrap_or_else(|| vec![true; cur[s].len()]),
                    )
                } else {
                    None
                }
            });
            layer_forward(
                layer,
                li,
                &cur[s],
                mask.as_deref(),
                opts.p,
                opts.k_trunc,
                None,
            )
        });
        let mut outs = Vec::with_capacity(n);
        let mut auxs = Vec::with_capacity(n);
        let mut max_rho_k = 0.0f64;
        let mut max_z = 0.0f64;
        for r in results {
            let (y, a, t) = r?;
            if let Some((rho_k, mz)) = t {
                max_rho_k = max_rho_k.max(rho_k);
                max_z = max_z.max(mz);
            }
            outs.push(y);
            auxs.push(a);
        }
        if max_rho_k > 0.0 {
            trunc_err += max_rho_k * (max_z + trunc_err);
        }
        acts.push(outs);
        aux.push(auxs);
        bn_means.push(None);
    }
    Ok(BatchForward {
        acts,
        aux,
        bn_means,
        p: opts.p,
        trunc_err,
    })
}

/// Batch reverse pass. Parameter gradients are summed over the batch with
/// deterministic chunked reduction; `input` holds per-sample input
/// gradients in batch order.
pub fn backward_batch(
    net: &Network,
    fwd: &BatchForward,
    dlogits: &[Vec<f64>],
    want_param_grads: bool,
) -> Result<GradientBundle> {
    let n = dlogits.len();
    if fwd.outputs().len() != n {
        return Err(Error::ShapeMismatch {
            context: "backward_batch dlogits",
            expected: fwd.outputs().len(),
            actual: n,
        });
    }
    let mut bundle = GradientBundle::zeros(net);
    let mut g: Vec<Vec<f64>> = dlogits.to_vec();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        if let Some(mean_used) = &fwd.bn_means[li] {
            // Exact batch-mean Jacobian: gin_s = gout_s − mean_batch(gout).
            let mut gmean = vec![0.0; mean_used.len()];
            for gs in &g {
                for (m, v) in gmean.iter_mut().zip(gs) {
                    *m += v;
                }
            }
            for m in gmean.iter_mut() {
                *m /= n as f64;
            }
            for gs in g.iter_mut() {
                for (v, m) in gs.iter_mut().zip(&gmean) {
                    *v -= m;
                }
            }
            continue;
        }
        let indices: Vec<usize> = (0..n).collect();
        let chunk_results: Vec<Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> =
            par_chunk_map(&indices, GRAD_CHUNK, |chunk| {
                let mut partial: Vec<Vec<f64>> = layer
                    .param_lens()
                    .iter()
                    .map(|&len| vec![0.0; len])
                    .collect();
                let mut gins = Vec::with_capacity(chunk.len());
                for &s in chunk {
                    let grads = if want_param_grads && !partial.is_empty() {
                        Some(partial.as_mut_slice())
                    } else {
                        None
                    };
                    gins.push(layer_backward(
                        layer,
                        &fwd.acts[li][s],
                        &fwd.aux[li][s],
                        &fwd.acts[li + 1][s],
                        &g[s],
                        fwd.p,
                        grads,
                    )?);
                }
                Ok((gins, partial))
            });
        let mut new_g = Vec::with_capacity(n);
        for r in chunk_results {
            let (gins, partial) = r?;
            new_g.extend(gins);
            if want_param_grads {
                for (slot, part) in bundle.layers[li].iter_mut().zip(partial) {
                    for (a, b) in slot.iter_mut().zip(part) {
                        *a += b;
                    }
                }
            }
        }
        g = new_g;
    }
    bundle.input = g;
    Ok(bundle)
}

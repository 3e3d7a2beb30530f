//! Layer and network definitions for the four architecture families:
//! standard weight-constrained nets, MaxMin/GroupSort nets, ℓ∞-distance
//! nets, and SortNets (geometric or explicit order-statistic weights),
//! plus mean-shift normalization and a non-Lipschitz MLP head.

pub mod eval;
pub mod io;

pub use eval::{
    backward, backward_batch, forward, forward_batch, Aux, BatchForward, Cache, EvalOpts,
    GradientBundle, MaskPlan,
};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Elementwise activation kinds. All are 1-Lipschitz.
#[derive(Debug, Clone, PartialEq)]
pub enum ActKind {
    Identity,
    Relu,
    Abs,
    Tanh,
    /// Odd piecewise-linear activation parameterized by the level values
    /// (g₀,…,g_d) of a symmetric Boolean function; slope ±1 or ±1/2 per
    /// segment. Used by the tight symmetric construction.
    PiecewiseSym {
        g: Vec<u8>,
    },
}

impl ActKind {
    /// σ(x).
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ActKind::Identity => x,
            ActKind::Relu => x.max(0.0),
            ActKind::Abs => x.abs(),
            ActKind::Tanh => x.tanh(),
            ActKind::PiecewiseSym { g } => piecewise_sym(g, x),
        }
    }

    /// dσ/dx at `x`. Kink-point conventions: relu'(0) = 0, abs'(0) = 0.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ActKind::Identity => 1.0,
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ActKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActKind::PiecewiseSym { g } => piecewise_sym_slope(g, x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActKind::Identity => "identity",
            ActKind::Relu => "relu",
            ActKind::Abs => "abs",
            ActKind::Tanh => "tanh",
            ActKind::PiecewiseSym { .. } => "piecewise-sym",
        }
    }
}

/// The odd piecewise-linear activation from the tight symmetric construction.
/// With d = g.len()−1, on |x| ≤ 1/d the slope is ±1/2 depending on g₀; on
/// k/d < |x| ≤ (k+1)/d it interpolates linearly between the values
/// (2g_{k−1}−1)/(2d) and (2g_k−1)/(2d), mirrored oddly for negative x.
/// Outside [−(d+1)/d, (d+1)/d] the last value is held constant.
fn piecewise_sym(g: &[u8], x: f64) -> f64 {
    let d = g.len() - 1;
    let df = d as f64;
    let a = df * x.abs();
    let s = if x < 0.0 { -1.0 } else { 1.0 };
    if a <= 1.0 {
        let sign0 = if g[0] == 1 { 1.0 } else { -1.0 };
        return sign0 * 0.5 * x;
    }
    // Segment index k with k < a ≤ k+1, clamped to the defined range.
    let k = ((a.ceil() as usize) - 1).min(d);
    let gk1 = g[k - 1] as f64;
    let gk = g[k] as f64;
    let t = (a - k as f64).min(1.0);
    s / (2.0 * df) * (2.0 * gk1 - 1.0 + 2.0 * t * (gk - gk1))
}

fn piecewise_sym_slope(g: &[u8], x: f64) -> f64 {
    let d = g.len() - 1;
    let df = d as f64;
    let a = df * x.abs();
    if a <= 1.0 {
        return if g[0] == 1 { 0.5 } else { -0.5 };
    }
    if a > (d + 1) as f64 {
        return 0.0; // held constant outside the declared domain
    }
    let k = ((a.ceil() as usize) - 1).min(d);
    g[k] as f64 - g[k - 1] as f64
}

/// Weight scheme of a SortNet layer: either the geometric weights
/// w_i = (1−ρ)ρ^{i−1} (which admit the Bernoulli-max estimator) or an
/// explicit per-neuron weight matrix over the sorted order statistics
/// (rows = neurons, cols = ranks), as produced by the conversions.
#[derive(Debug, Clone, PartialEq)]
pub enum SortWeights {
    Geometric { rho: f64 },
    Explicit { weight: Tensor },
}

/// One network layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// y = Wx + b. When `constrained`, every row satisfies ‖W_{i,:}‖₁ ≤ 1
    /// (enforced by [`Network::project_weights`]) and the layer is
    /// 1-Lipschitz ℓ∞→ℓ∞.
    Affine {
        weight: Tensor,
        bias: Vec<f64>,
        constrained: bool,
    },
    /// Elementwise activation.
    Activation { kind: ActKind },
    /// Sorts each consecutive group of `group` coordinates in descending
    /// order (group = 2 is MaxMin; group = width is a full sort).
    MaxMin { group: usize },
    /// y_k = ‖x − w_k‖∞ + b_k (rows of `weight` are the anchors w_k).
    LinfDist { weight: Tensor, bias: Vec<f64> },
    /// y_k = wᵀ sort(σ(x + b_k)) with per-neuron bias rows b_k
    /// (`bias` is width × in_dim) and ‖w‖₁ ≤ 1.
    SortNet {
        weights: SortWeights,
        bias: Tensor,
        act: ActKind,
    },
    /// Subtracts the per-neuron mean: batch mean while training, the
    /// finalized running mean at inference. No scaling, so 1-Lipschitz.
    MeanShiftBn {
        dim: usize,
        running_mean: Option<Vec<f64>>,
    },
}

impl Layer {
    /// Output width given the input width, or an error on incompatibility.
    pub fn out_dim(&self, in_dim: usize) -> Result<usize> {
        let check = |need: usize, ctx: &'static str| -> Result<()> {
            if need != in_dim {
                Err(Error::ShapeMismatch {
                    context: ctx,
                    expected: need,
                    actual: in_dim,
                })
            } else {
                Ok(())
            }
        };
        match self {
            Layer::Affine { weight, bias, .. } => {
                check(weight.cols, "affine input")?;
                check_eq(weight.rows, bias.len(), "affine bias")?;
                Ok(weight.rows)
            }
            Layer::Activation { .. } => Ok(in_dim),
            Layer::MaxMin { group } => {
                if *group == 0 || in_dim % group != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "maxmin group {group} does not divide width {in_dim}"
                    )));
                }
                Ok(in_dim)
            }
            Layer::LinfDist { weight, bias } => {
                check(weight.cols, "linf-dist input")?;
                check_eq(weight.rows, bias.len(), "linf-dist bias")?;
                Ok(weight.rows)
            }
            Layer::SortNet { weights, bias, .. } => {
                check(bias.cols, "sortnet input")?;
                if let SortWeights::Explicit { weight } = weights {
                    check_eq(weight.rows, bias.rows, "sortnet explicit weight rows")?;
                    check_eq(weight.cols, bias.cols, "sortnet explicit weight cols")?;
                }
                Ok(bias.rows)
            }
            Layer::MeanShiftBn { dim, .. } => {
                check(*dim, "mean-shift input")?;
                Ok(in_dim)
            }
        }
    }

    /// Per-layer ℓ∞→ℓ∞ Lipschitz bound. 1 for everything except an
    /// unconstrained affine layer, which contributes its operator norm.
    pub fn lipschitz_factor(&self) -> f64 {
        match self {
            Layer::Affine {
                weight,
                constrained,
                ..
            } => {
                if *constrained {
                    1.0
                } else {
                    weight.max_row_l1()
                }
            }
            _ => 1.0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Affine { .. } => "affine",
            Layer::Activation { .. } => "activation",
            Layer::MaxMin { .. } => "maxmin",
            Layer::LinfDist { .. } => "linf-dist",
            Layer::SortNet { .. } => "sortnet",
            Layer::MeanShiftBn { .. } => "mean-shift-bn",
        }
    }

    /// Trainable parameter buffers, in a fixed order shared with
    /// [`GradientBundle`]. Explicit SortNet weights are construction
    /// artifacts and are not trainable.
    pub fn param_lens(&self) -> Vec<usize> {
        match self {
            Layer::Affine { weight, bias, .. } => vec![weight.len(), bias.len()],
            Layer::LinfDist { weight, bias } => vec![weight.len(), bias.len()],
            Layer::SortNet { bias, .. } => vec![bias.len()],
            _ => vec![],
        }
    }
}

fn check_eq(a: usize, b: usize, ctx: &'static str) -> Result<()> {
    if a != b {
        Err(Error::ShapeMismatch {
            context: ctx,
            expected: a,
            actual: b,
        })
    } else {
        Ok(())
    }
}

/// Metadata describing one trainable parameter buffer.
#[derive(Debug, Clone, Copy)]
pub struct ParamMeta {
    pub layer: usize,
    /// Index of the buffer within the layer (0 = weight, 1 = bias for
    /// affine/ℓ∞-dist; 0 = bias for SortNet).
    pub slot: usize,
    /// SortNet parameters are exempt from weight decay.
    pub sortnet: bool,
}

/// An ordered sequence of layers with an input width, an optional split
/// index separating the 1-Lipschitz backbone from a non-Lipschitz MLP head,
/// and an optional declared input box (used by PGD clipping, pass-through
/// sentinels, and the conversions).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    /// Layers `0..head_split` form the backbone; `head_split..` the head.
    pub head_split: Option<usize>,
    /// Declared per-coordinate input range (lo, hi), if any.
    pub input_range: Option<(f64, f64)>,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Self {
        Network {
            input_dim,
            layers,
            head_split: None,
            input_range: None,
        }
    }

    pub fn with_input_range(mut self, lo: f64, hi: f64) -> Self {
        self.input_range = Some((lo, hi));
        self
    }

    pub fn with_head_split(mut self, at: usize) -> Self {
        self.head_split = Some(at);
        self
    }

    /// Validate layer chaining and return the output width.
    pub fn out_dim(&self) -> Result<usize> {
        let mut d = self.input_dim;
        for layer in &self.layers {
            d = layer.out_dim(d)?;
        }
        Ok(d)
    }

    /// Width of the activation entering layer `l` (input for l = 0).
    pub fn dim_at(&self, l: usize) -> Result<usize> {
        let mut d = self.input_dim;
        for layer in &self.layers[..l] {
            d = layer.out_dim(d)?;
        }
        Ok(d)
    }

    /// Product of per-layer Lipschitz factors over the backbone
    /// (all layers when there is no head split).
    pub fn lipschitz_bound(&self) -> f64 {
        let end = self.head_split.unwrap_or(self.layers.len());
        self.layers[..end]
            .iter()
            .map(|l| l.lipschitz_factor())
            .product()
    }

    /// Lipschitz factor product over every layer including the head.
    pub fn lipschitz_bound_full(&self) -> f64 {
        self.layers.iter().map(|l| l.lipschitz_factor()).product()
    }

    /// Rescale every constrained affine row with ‖row‖₁ > 1 back onto the
    /// ℓ₁ ball; feasible rows are left untouched.
    pub fn project_weights(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Affine {
                weight,
                constrained: true,
                ..
            } = layer
            {
                for i in 0..weight.rows {
                    let norm = crate::numeric::l1_norm(weight.row(i));
                    if norm > 1.0 {
                        for v in weight.row_mut(i) {
                            *v /= norm;
                        }
                    }
                }
            }
        }
    }

    /// Immutable views of all trainable parameter buffers with metadata,
    /// in (layer, slot) order.
    pub fn params(&self) -> Vec<(&[f64], ParamMeta)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let meta = |slot| ParamMeta {
                layer: li,
                slot,
                sortnet: matches!(layer, Layer::SortNet { .. }),
            };
            match layer {
                Layer::Affine { weight, bias, .. } | Layer::LinfDist { weight, bias } => {
                    out.push((weight.data.as_slice(), meta(0)));
                    out.push((bias.as_slice(), meta(1)));
                }
                Layer::SortNet { bias, .. } => out.push((bias.data.as_slice(), meta(0))),
                _ => {}
            }
        }
        out
    }

    /// Mutable views of all trainable parameter buffers, same order as
    /// [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<(&mut [f64], ParamMeta)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let sortnet = matches!(layer, Layer::SortNet { .. });
            let meta = |slot| ParamMeta {
                layer: li,
                slot,
                sortnet,
            };
            match layer {
                Layer::Affine { weight, bias, .. } | Layer::LinfDist { weight, bias } => {
                    out.push((weight.data.as_mut_slice(), meta(0)));
                    out.push((bias.as_mut_slice(), meta(1)));
                }
                Layer::SortNet { bias, .. } => out.push((bias.data.as_mut_slice(), meta(0))),
                _ => {}
            }
        }
        out
    }

    /// True when the network is built solely from constrained affine layers
    /// and 1-Lipschitz elementwise activations (the "standard" family).
    pub fn is_standard_family(&self) -> bool {
        self.layers.iter().all(|l| {
            matches!(
                l,
                Layer::Affine {
                    constrained: true,
                    ..
                } | Layer::Activation { .. }
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dim_chains_layers() {
        let net = Network::new(
            3,
            vec![
                Layer::Affine {
                    weight: Tensor::zeros(4, 3),
                    bias: vec![0.0; 4],
                    constrained: true,
                },
                Layer::MaxMin { group: 2 },
                Layer::Activation {
                    kind: ActKind::Relu,
                },
            ],
        );
        assert_eq!(net.out_dim().unwrap(), 4);
    }

    #[test]
    fn maxmin_group_must_divide_width() {
        let net = Network::new(3, vec![Layer::MaxMin { group: 2 }]);
        assert!(net.out_dim().is_err());
    }

    #[test]
    fn lipschitz_bound_products() {
        let mut w = Tensor::zeros(1, 2);
        w.data = vec![3.0, -1.0];
        let net = Network::new(
            2,
            vec![Layer::Affine {
                weight: w,
                bias: vec![0.0],
                constrained: false,
            }],
        );
        assert_eq!(net.lipschitz_bound(), 4.0);
    }

    #[test]
    fn projection_rescales_only_infeasible_rows() {
        let mut net = Network::new(
            2,
            vec![Layer::Affine {
                weight: Tensor::from_rows(&[vec![0.5, 0.3], vec![2.0, 2.0]]),
                bias: vec![0.0, 0.0],
                constrained: true,
            }],
        );
        net.project_weights();
        if let Layer::Affine { weight, .. } = &net.layers[0] {
            assert_eq!(weight.row(0), &[0.5, 0.3]);
            assert_eq!(weight.row(1), &[0.5, 0.5]);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn piecewise_sym_matches_or_example() {
        // d=2 OR: g = (0,1,1). σ(0.5) = −0.25 and σ(−0.5) = 0.25.
        let act = ActKind::PiecewiseSym { g: vec![0, 1, 1] };
        assert!((act.apply(0.5) + 0.25).abs() < 1e-15);
        assert!((act.apply(-0.5) - 0.25).abs() < 1e-15);
        // σ(1): segment k=1 → (1/4)(2·0 − 1 + 2(2−1)(1−0)) = 0.25.
        assert!((act.apply(1.0) - 0.25).abs() < 1e-15);
        assert!((act.apply(-1.0) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn piecewise_sym_is_odd_and_1_lipschitz() {
        let act = ActKind::PiecewiseSym {
            g: vec![1, 0, 0, 1, 0],
        };
        let mut prev: Option<(f64, f64)> = None;
        for i in -1300..=1300 {
            let x = i as f64 / 1000.0;
            let y = act.apply(x);
            assert!((y + act.apply(-x)).abs() < 1e-14, "not odd at {x}");
            if let Some((px, py)) = prev {
                assert!(
                    (y - py).abs() <= (x - px).abs() + 1e-12,
                    "slope > 1 near {x}"
                );
            }
            prev = Some((x, y));
        }
    }
}

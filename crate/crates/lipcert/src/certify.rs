//! Robustness certification and empirical evaluation.
//!
//! * Margin-based certified radii for Lipschitz networks (radius =
//!   (2^{1/p}/2)/L · margin), with the exact-inference truncation deficit
//!   subtracted before certifying;
//! * interval bound propagation (IBP) through a non-Lipschitz MLP head,
//!   including the final-affine elision that bounds logit differences
//!   directly, plus a hand-rolled reverse pass so IBP margins can be trained
//!   against;
//! * 100-step PGD with random starts for empirical robust accuracy;
//! * the nearest-neighbor reference classifier (margin 1 on Boolean data);
//! * report assembly with the soundness ordering
//!   certified ≤ PGD ≤ clean accuracy.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::eval::{backward, forward, EvalOpts, GradientBundle};
use crate::network::{ActKind, Layer, Network};
use crate::numeric::linf_dist;
use crate::parallel::par_map_idx;
use crate::rng::RandomSource;

/// A coordinatewise interval [lower, upper].
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Interval {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch {
                context: "interval bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument(
                "interval needs lower ≤ upper coordinatewise".into(),
            ));
        }
        Ok(Interval { lower, upper })
    }

    /// The ball [x − ε, x + ε].
    pub fn ball(x: &[f64], eps: f64) -> Result<Self> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("bad radius {eps}")));
        }
        Interval::new(
            x.iter().map(|v| v - eps).collect(),
            x.iter().map(|v| v + eps).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }
}

/// Index of the largest entry, ties resolved to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 minus top-2 logit (the classification margin); 0 for ties.
pub fn logit_margin(logits: &[f64]) -> f64 {
    let top = argmax(logits);
    let mut second = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if j != top {
            second = second.max(v);
        }
    }
    logits[top] - second
}

/// Certified ℓp radius (2^{1/p}/2)/L · (top1 − top2). For p = ∞ the constant
/// is 1/2. The radius is 0 when the margin is 0.
pub fn certified_radius(logits: &[f64], lipschitz: f64, p: f64) -> Result<f64> {
    if !(lipschitz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz bound must be positive, got {lipschitz}"
        )));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(
            "certified radius needs at least two logits".into(),
        ));
    }
    let c = if p.is_finite() {
        0.5 * 2f64.powf(1.0 / p)
    } else {
        0.5
    };
    Ok(c / lipschitz * logit_margin(logits))
}

/// Can a layer appear in an IBP head? Affine layers propagate center/radius;
/// activations must be monotone nondecreasing (endpoint propagation).
fn ibp_supported(layer: &Layer) -> bool {
    matches!(
        layer,
        Layer::Affine { .. }
            | Layer::Activation {
                kind: ActKind::Identity | ActKind::Relu | ActKind::Tanh,
            }
    )
}

/// Propagate an interval through head layers: affine via c' = Wc + b,
/// r' = |W|r; monotone activations via endpoints. Sound: for any x in the
/// input interval, layer(x) lies in the output interval.
pub fn ibp_forward(layers: &[Layer], iv: &Interval) -> Result<Interval> {
    let mut cur = iv.clone();
    for layer in layers {
        if !ibp_supported(layer) {
            return Err(Error::UnsupportedLayer {
                operation: "interval propagation",
                layer: layer.kind_name().into(),
            });
        }
        cur = match layer {
            Layer::Affine { weight, bias, .. } => {
                let c = cur.center();
                let r = cur.radius();
                let mut lo = vec![0.0; weight.rows];
                let mut hi = vec![0.0; weight.rows];
                for k in 0..weight.rows {
                    let row = weight.row(k);
                    let (mut ck, mut rk) = (bias[k], 0.0);
                    for (w, (cv, rv)) in row.iter().zip(c.iter().zip(&r)) {
                        ck += w * cv;
                        rk += w.abs() * rv;
                    }
                    lo[k] = ck - rk;
                    hi[k] = ck + rk;
                }
                Interval::new(lo, hi)?
            }
            Layer::Activation { kind } => Interval::new(
                cur.lower.iter().map(|&v| kind.apply(v)).collect(),
                cur.upper.iter().map(|&v| kind.apply(v)).collect(),
            )?,
            _ => unreachable!(),
        };
    }
    Ok(cur)
}

/// Forward record of an elided IBP margin computation: the interval entering
/// every head layer, and the resulting margins m_j ≥ worst-case f_y − f_j
/// lower bound (m_y = 0).
#[derive(Debug, Clone)]
pub struct IbpTrace {
    pub head_start: usize,
    pub inputs: Vec<Interval>,
    pub margins: Vec<f64>,
    pub y: usize,
}

fn head_range(net: &Network) -> Result<(usize, usize)> {
    let start = net.head_split.ok_or_else(|| {
        Error::InvalidArgument("IBP margins need a network with a head split".into())
    })?;
    if start >= net.layers.len() {
        return Err(Error::InvalidArgument(
            "IBP margins need a non-empty head".into(),
        ));
    }
    Ok((start, net.layers.len()))
}

/// Elided IBP margins from the backbone output `z`: the interval
/// [z − ε, z + ε] (the backbone is 1-Lipschitz per coordinate) is pushed
/// through all head layers except the last affine, whose rows are combined
/// as (W_y − W_j) so the logit-difference bound never doubles the interval.
pub fn ibp_trace(net: &Network, z: &[f64], y: usize, eps: f64) -> Result<IbpTrace> {
    let (start, end) = head_range(net)?;
    let last = end - 1;
    let Layer::Affine {
        weight: w_out,
        bias: b_out,
        ..
    } = &net.layers[last]
    else {
        return Err(Error::UnsupportedLayer {
            operation: "elided IBP margin",
            layer: format!(
                "head must end with an affine layer, found {}",
                net.layers[last].kind_name()
            ),
        });
    };
    if y >= w_out.rows {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} outputs",
            w_out.rows
        )));
    }
    let mut inputs = Vec::with_capacity(end - start);
    let mut cur = Interval::ball(z, eps)?;
    for layer in &net.layers[start..last] {
        if !ibp_supported(layer) {
            return Err(Error::UnsupportedLayer {
                operation: "elided IBP margin",
                layer: layer.kind_name().into(),
            });
        }
        inputs.push(cur.clone());
        cur = ibp_forward(std::slice::from_ref(layer), &cur)?;
    }
    inputs.push(cur.clone());
    let c = cur.center();
    let r = cur.radius();
    let mut margins = vec![0.0; w_out.rows];
    for j in 0..w_out.rows {
        if j == y {
            continue;
        }
        let mut m = b_out[y] - b_out[j];
        for i in 0..w_out.cols {
            let d = w_out.get(y, i) - w_out.get(j, i);
            m += d * c[i] - d.abs() * r[i];
        }
        margins[j] = m;
    }
    Ok(IbpTrace {
        head_start: start,
        inputs,
        margins,
        y,
    })
}

/// Reverse pass of [`ibp_trace`]: given ∂loss/∂margins, accumulate head
/// parameter gradients into `grads` (when given) and return ∂loss/∂z.
pub fn ibp_backward(
    net: &Network,
    trace: &IbpTrace,
    dmargins: &[f64],
    mut grads: Option<&mut GradientBundle>,
) -> Result<Vec<f64>> {
    let (start, end) = head_range(net)?;
    if start != trace.head_start || trace.inputs.len() != end - start {
        return Err(Error::InvalidArgument(
            "stale IBP trace: head layout mismatch".into(),
        ));
    }
    let last = end - 1;
    let Layer::Affine { weight: w_out, .. } = &net.layers[last] else {
        return Err(Error::InvalidArgument(
            "stale IBP trace: head no longer ends in affine".into(),
        ));
    };
    if dmargins.len() != w_out.rows {
        return Err(Error::ShapeMismatch {
            context: "ibp backward dmargins",
            expected: w_out.rows,
            actual: dmargins.len(),
        });
    }
    let y = trace.y;
    let iv = &trace.inputs[last - start];
    let c = iv.center();
    let r = iv.radius();
    // Final affine elision adjoints.
    let mut dc = vec![0.0; w_out.cols];
    let mut dr = vec![0.0; w_out.cols];
    for j in 0..w_out.rows {
        if j == y || dmargins[j] == 0.0 {
            continue;
        }
        let dm = dmargins[j];
        for i in 0..w_out.cols {
            let d = w_out.get(y, i) - w_out.get(j, i);
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            dc[i] += dm * d;
            dr[i] -= dm * d.abs();
            if let Some(g) = grads.as_deref_mut() {
                let gw = &mut g.layers[last][0];
                gw[y * w_out.cols + i] += dm * (c[i] - s * r[i]);
                gw[j * w_out.cols + i] -= dm * (c[i] - s * r[i]);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let gb = &mut g.layers[last][1];
            gb[y] += dm;
            gb[j] -= dm;
        }
    }
    let mut dl: Vec<f64> = dc.iter().zip(&dr).map(|(c, r)| 0.5 * (c - r)).collect();
    let mut du: Vec<f64> = dc.iter().zip(&dr).map(|(c, r)| 0.5 * (c + r)).collect();
    // Walk the remaining head layers in reverse.
    for li in (start..last).rev() {
        let iv = &trace.inputs[li - start];
        match &net.layers[li] {
            Layer::Affine { weight, .. } => {
                let mut ndl = vec![0.0; weight.cols];
                let mut ndu = vec![0.0; weight.cols];
                for k in 0..weight.rows {
                    let row = weight.row(k);
                    let (glk, guk) = (dl[k], du[k]);
                    if glk == 0.0 && guk == 0.0 {
                        continue;
                    }
                    for (j, &w) in row.iter().enumerate() {
                        if w >= 0.0 {
                            ndl[j] += w * glk;
                            ndu[j] += w * guk;
                        } else {
                            ndl[j] += w * guk;
                            ndu[j] += w * glk;
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        let gw = &mut g.layers[li][0];
                        for j in 0..weight.cols {
                            let (lsrc, usrc) = if row[j] >= 0.0 {
                                (iv.lower[j], iv.upper[j])
                            } else {
                                (iv.upper[j], iv.lower[j])
                            };
                            gw[k * weight.cols + j] += glk * lsrc + guk * usrc;
                        }
                        g.layers[li][1][k] += glk + guk;
                    }
                }
                dl = ndl;
                du = ndu;
            }
            Layer::Activation { kind } => {
                for (g, &x) in dl.iter_mut().zip(&iv.lower) {
                    *g *= kind.derivative(x);
                }
                for (g, &x) in du.iter_mut().zip(&iv.upper) {
                    *g *= kind.derivative(x);
                }
            }
            other => {
                return Err(Error::UnsupportedLayer {
                    operation: "ibp backward",
                    layer: other.kind_name().into(),
                })
            }
        }
    }
    // Entry: l = z − ε and u = z + ε, so dz = dl + du.
    Ok(dl.iter().zip(&du).map(|(a, b)| a + b).collect())
}

/// Inference-time IBP margins at perturbation ε: runs the exact backbone,
/// widens the interval by the truncation deficit, and returns the elided
/// margins (m_y = 0; all others are sound lower bounds on f_y − f_j).
pub fn ibp_margin(
    net: &Network,
    x: &[f64],
    y: usize,
    eps: f64,
    k_trunc: Option<usize>,
) -> Result<Vec<f64>> {
    let (start, _) = head_range(net)?;
    let opts = EvalOpts {
        k_trunc,
        ..EvalOpts::exact()
    };
    let cache = forward_backbone(net, x, start, &opts)?;
    let trace = ibp_trace(net, &cache.0, y, eps + cache.1)?;
    Ok(trace.margins)
}

/// Run only the backbone layers, returning (z, truncation deficit).
fn forward_backbone(
    net: &Network,
    x: &[f64],
    head_start: usize,
    opts: &EvalOpts,
) -> Result<(Vec<f64>, f64)> {
    let backbone = Network {
        input_dim: net.input_dim,
        layers: net.layers[..head_start].to_vec(),
        head_split: None,
        input_range: net.input_range,
    };
    let cache = forward(&backbone, x, opts)?;
    Ok((cache.output().to_vec(), cache.trunc_err))
}

/// PGD attack parameters. The paper fixes only "100-step PGD"; step size and
/// restart count are exposed here (defaults: ε/25 and a single restart).
#[derive(Debug, Clone)]
pub struct PgdConfig {
    pub steps: usize,
    /// Step size; `None` means ε/25.
    pub step_size: Option<f64>,
    pub restarts: usize,
    /// Truncation order for the exact SortNet forwards inside the attack.
    pub k_trunc: Option<usize>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            steps: 100,
            step_size: None,
            restarts: 1,
            k_trunc: None,
        }
    }
}

/// Signed projected gradient ascent on the margin loss within the ε-ball
/// intersected with the declared input box. Returns (x_adv, success) with
/// success iff argmax f(x_adv) ≠ y. Deterministic given (source, tag).
pub fn pgd_attack(
    net: &Network,
    x: &[f64],
    y: usize,
    eps: f64,
    cfg: &PgdConfig,
    src: &RandomSource,
    tag: u64,
) -> Result<(Vec<f64>, bool)> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("bad attack radius {eps}")));
    }
    let opts = EvalOpts {
        k_trunc: cfg.k_trunc,
        ..EvalOpts::exact()
    };
    let misclassified = |xa: &[f64]| -> Result<bool> {
        let out = forward(net, xa, &opts)?;
        Ok(argmax(out.output()) != y)
    };
    if eps == 0.0 {
        let success = misclassified(x)?;
        return Ok((x.to_vec(), success));
    }
    let clip = |v: f64, orig: f64| -> f64 {
        let mut c = v.clamp(orig - eps, orig + eps);
        if let Some((lo, hi)) = net.input_range {
            c = c.clamp(lo, hi);
        }
        c
    };
    let step = cfg.step_size.unwrap_or(eps / 25.0);
    for restart in 0..cfg.restarts.max(1) {
        // Address tag: (pgd marker, sample tag, restart).
        let mut rng = src.stream(&[0x9D6Au64, tag, restart as u64]);
        let mut xa: Vec<f64> = x
            .iter()
            .map(|&v| clip(v + rng.uniform(-eps, eps), v))
            .collect();
        for _ in 0..cfg.steps {
            let cache = forward(net, &xa, &opts)?;
            let logits = cache.output();
            if argmax(logits) != y {
                return Ok((xa, true));
            }
            // Ascend logit_{j*} − logit_y for the strongest wrong class.
            let mut dlogits = vec![0.0; logits.len()];
            let mut jstar = usize::MAX;
            for (j, &v) in logits.iter().enumerate() {
                if j != y && (jstar == usize::MAX || v > logits[jstar]) {
                    jstar = j;
                }
            }
            if jstar == usize::MAX {
                break; // single-logit network: nothing to attack
            }
            dlogits[jstar] = 1.0;
            dlogits[y] = -1.0;
            let bundle = backward(net, &cache, &dlogits, false)?;
            let g = &bundle.input[0];
            for (v, (&gv, &orig)) in xa.iter_mut().zip(g.iter().zip(x)) {
                let s = if gv > 0.0 {
                    1.0
                } else if gv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *v = clip(*v + step * s, orig);
            }
        }
        if misclassified(&xa)? {
            return Ok((xa, true));
        }
        if restart + 1 == cfg.restarts.max(1) {
            return Ok((xa, false));
        }
    }
    unreachable!("loop always returns on its last restart")
}

/// Nearest-neighbor reference logits: f_k(x) = −min ℓ∞ distance to class-k
/// points. 1-Lipschitz per output; margin 1 on the points of any Boolean
/// dataset.
pub fn nn_classifier(ds: &LabeledDataset, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ds.dim {
        return Err(Error::ShapeMismatch {
            context: "nearest-neighbor input",
            expected: ds.dim,
            actual: x.len(),
        });
    }
    let mut best = vec![f64::INFINITY; ds.num_classes];
    for (p, &l) in ds.inputs.iter().zip(&ds.labels) {
        let d = linf_dist(p, x);
        if d < best[l] {
            best[l] = d;
        }
    }
    for (k, b) in best.iter().enumerate() {
        if !b.is_finite() {
            return Err(Error::EmptyClass(k));
        }
    }
    Ok(best.into_iter().map(|d| -d).collect())
}

/// Per-sample certification record.
#[derive(Debug, Clone)]
pub struct SampleReport {
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub margin: f64,
    pub certified_radius: f64,
    pub certified_at_eps: bool,
    pub pgd_robust: Option<bool>,
}

/// Dataset-level certification report.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub eps: f64,
    pub samples: Vec<SampleReport>,
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    pub pgd_accuracy: Option<f64>,
}

impl CertificationReport {
    /// CSV export: one row per sample plus a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "index,label,predicted,correct,margin,certified_radius,certified,pgd_robust\n",
        );
        for (i, r) in self.samples.iter().enumerate() {
            let pgd = match r.pgd_robust {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            s.push_str(&format!(
                "{i},{},{},{},{},{},{},{pgd}\n",
                r.label,
                r.predicted,
                u8::from(r.correct),
                r.margin,
                r.certified_radius,
                u8::from(r.certified_at_eps),
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        let pgd = self
            .pgd_accuracy
            .map_or(String::from("n/a"), |a| format!("{:.4}", a));
        format!(
            "eps={} clean={:.4} pgd={} certified={:.4} n={}",
            self.eps,
            self.clean_accuracy,
            pgd,
            self.certified_accuracy,
            self.samples.len()
        )
    }
}

/// Evaluate clean/PGD/certified accuracy at perturbation ε.
///
/// Fully Lipschitz networks certify by margin: radius =
/// (margin − 2·truncation deficit) / 2L, certified iff radius > ε (strict).
/// Networks with an MLP head certify via elided IBP margins; their reported
/// radius is the largest ε′ (up to bisection tolerance) still certified.
pub fn evaluate(
    net: &Network,
    ds: &LabeledDataset,
    eps: f64,
    pgd: Option<&PgdConfig>,
    src: &RandomSource,
    k_trunc: Option<usize>,
) -> Result<CertificationReport> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let opts = EvalOpts {
        k_trunc,
        ..EvalOpts::exact()
    };
    let has_head = net.head_split.is_some_and(|s| s < net.layers.len());
    let lipschitz = net.lipschitz_bound_full();
    let results: Vec<Result<SampleReport>> = par_map_idx(ds.len(), |i| {
        let x = &ds.inputs[i];
        let y = ds.labels[i];
        let cache = forward(net, x, &opts)?;
        let logits = cache.output();
        let predicted = argmax(logits);
        let correct = predicted == y;
        let margin = logit_margin(logits);
        let (radius, certified) = if !correct {
            (0.0, false)
        } else if has_head {
            let (start, _) = head_range(net)?;
            let (z, trunc) = forward_backbone(net, x, start, &opts)?;
            let cert_at = |e: f64| -> Result<bool> {
                let t = ibp_trace(net, &z, y, e + trunc)?;
                Ok(t.margins
                    .iter()
                    .enumerate()
                    .all(|(j, &m)| j == y || m > 0.0))
            };
            if !cert_at(eps)? {
                // Not certified at ε; still bisect below ε for the radius.
                let (mut lo, mut hi) = (0.0f64, eps.max(1e-12));
                if !cert_at(0.0)? {
                    (lo, hi) = (0.0, 0.0);
                }
                for _ in 0..40 {
                    if hi - lo <= 1e-12 {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    if cert_at(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (lo, false)
            } else {
                // Certified at ε: grow by doubling, then bisect.
                let mut lo = eps.max(1e-12);
                let mut hi = lo * 2.0;
                let mut doubled = 0;
                while cert_at(hi)? && doubled < 60 {
                    lo = hi;
                    hi *= 2.0;
                    doubled += 1;
                }
                for _ in 0..40 {
                    if hi - lo <= 1e-12 * hi.max(1.0) {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    if cert_at(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (lo, true)
            }
        } else {
            let adj = (margin - 2.0 * cache.trunc_err).max(0.0);
            let radius = certified_radius(&[adj, 0.0], lipschitz, f64::INFINITY)?;
            (radius, radius > eps)
        };
        let pgd_robust = match pgd {
            None => None,
            Some(cfg) => {
                if !correct {
                    Some(false)
                } else {
                    let (_, success) = pgd_attack(net, x, y, eps, cfg, src, i as u64)?;
                    Some(!success)
                }
            }
        };
        Ok(SampleReport {
            label: y,
            predicted,
            correct,
            margin,
            certified_radius: radius,
            certified_at_eps: certified,
            pgd_robust,
        })
    });
    let mut samples = Vec::with_capacity(ds.len());
    for r in results {
        samples.push(r?);
    }
    let n = samples.len() as f64;
    let clean = samples.iter().filter(|s| s.correct).count() as f64 / n;
    let certified = samples.iter().filter(|s| s.certified_at_eps).count() as f64 / n;
    let pgd_accuracy = pgd.map(|_| {
        samples
            .iter()
            .filter(|s| s.pgd_robust == Some(true))
            .count() as f64
            / n
    });
    Ok(CertificationReport {
        eps,
        samples,
        clean_accuracy: clean,
        certified_accuracy: certified,
        pgd_accuracy,
    })
}

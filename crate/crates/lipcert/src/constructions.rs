//! Constructive results as executable code, plus empirical verifiers for the
//! matching impossibility bounds.
//!
//! Expressivity constructions:
//! * any Boolean function as a two-layer ℓ∞-distance net (canonical DNF, each
//!   minterm realized through a negated literal disjunction);
//! * any order statistic as a two-layer ℓ∞-distance net (nested max-min);
//! * full sorting / order statistics as MaxMin networks via Batcher's
//!   odd-even mergesort comparator schedule;
//! * Boolean functions as deep MaxMin networks (literal layer + min-trees +
//!   max-tree);
//! * the tight symmetric classifier (margin exactly 1/d) and the tight linear
//!   order-statistic approximator (error exactly 1/2 − 1/2d).
//!
//! Impossibility machinery:
//! * adjacent-level pair sets 𝒯 with one-hot difference vectors;
//! * the sum inequality ‖Σ|f(u)−f(v)|‖∞ ≤ ‖Σ|u−v|‖∞ for standard nets;
//! * exhaustive witness search for the approximation/robustness gaps.
//!
//! Conversions (exact on a compact domain):
//! * GroupSort network → SortNet with explicit weights and identity
//!   activation;
//! * ℓ∞-distance net → SortNet with w = e₁ and absolute-value activation.

use crate::data::{gen_boolean_dataset, BooleanDataset, BooleanMode};
use crate::error::{Error, Result};
use crate::network::eval::{forward, EvalOpts};
use crate::network::{ActKind, Layer, Network, SortWeights};
use crate::numeric::{linf_norm, Tensor};

// ---------------------------------------------------------------------------
// Boolean functions
// ---------------------------------------------------------------------------

/// A Boolean function of `d` inputs given by its full truth table.
/// `table[bits]` is the output on the input whose i-th coordinate is bit i of
/// `bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BooleanFunction {
    d: usize,
    table: Vec<u8>,
}

impl BooleanFunction {
    /// Build from an explicit truth table of length 2^d with entries in {0,1}.
    pub fn from_table(d: usize, table: Vec<u8>) -> Result<Self> {
        if d == 0 || d >= usize::BITS as usize {
            return Err(Error::InvalidArgument(format!(
                "boolean function arity {d} out of range"
            )));
        }
        if table.len() != 1 << d {
            return Err(Error::InvalidArgument(format!(
                "truth table length {} != 2^{d}",
                table.len()
            )));
        }
        if table.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "truth table entries must be 0 or 1".into(),
            ));
        }
        Ok(BooleanFunction { d, table })
    }

    /// Parse a truth-table text: one '0'/'1' character per row index, in row
    /// order; whitespace is ignored. The length must be a power of two.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut table = Vec::new();
        for c in text.chars() {
            match c {
                '0' => table.push(0),
                '1' => table.push(1),
                c if c.is_whitespace() => {}
                c => {
                    return Err(Error::InvalidArgument(format!(
                        "unexpected character {c:?} in truth table"
                    )))
                }
            }
        }
        if table.is_empty() || !table.len().is_power_of_two() || table.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "truth table length {} is not a power of two ≥ 2",
                table.len()
            )));
        }
        let d = table.len().trailing_zeros() as usize;
        Self::from_table(d, table)
    }

    /// Builtin families: `and`, `or`, `xor`/`parity`, `majority`, and
    /// `threshold-k` (1 iff at least k inputs are 1).
    pub fn builtin(name: &str, d: usize) -> Result<Self> {
        if d == 0 || d >= usize::BITS as usize {
            return Err(Error::InvalidArgument(format!(
                "boolean function arity {d} out of range"
            )));
        }
        let by_ones: Box<dyn Fn(usize) -> u8> = match name {
            "and" => Box::new(move |k| u8::from(k == d)),
            "or" => Box::new(|k| u8::from(k >= 1)),
            "xor" | "parity" => Box::new(|k| (k % 2) as u8),
            "majority" => Box::new(move |k| u8::from(2 * k > d)),
            _ => {
                if let Some(ks) = name.strip_prefix("threshold-") {
                    let t: usize = ks.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad threshold in {name:?}"))
                    })?;
                    Box::new(move |k| u8::from(k >= t))
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "unknown builtin boolean function {name:?}"
                    )));
                }
            }
        };
        let table = (0..1usize << d)
            .map(|bits| by_ones(bits.count_ones() as usize))
            .collect();
        Self::from_table(d, table)
    }

    pub fn arity(&self) -> usize {
        self.d
    }

    pub fn table(&self) -> &[u8] {
        &self.table
    }

    /// Evaluate on the input encoded as a bit pattern.
    pub fn eval_bits(&self, bits: usize) -> u8 {
        self.table[bits]
    }

    /// Evaluate on a real vector whose entries are (within rounding) 0 or 1.
    pub fn eval(&self, x: &[f64]) -> Result<u8> {
        if x.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: "boolean eval",
                expected: self.d,
                actual: x.len(),
            });
        }
        let mut bits = 0usize;
        for (i, &v) in x.iter().enumerate() {
            if (v - 1.0).abs() < 0.5 {
                bits |= 1 << i;
            }
        }
        Ok(self.table[bits])
    }

    pub fn is_constant(&self) -> bool {
        self.table.iter().all(|&v| v == self.table[0])
    }

    /// If the function is symmetric (output depends only on the number of
    /// ones), return its level-value representation.
    pub fn to_symmetric(&self) -> Result<SymmetricBooleanFunction> {
        let mut g = vec![None::<u8>; self.d + 1];
        for (bits, &v) in self.table.iter().enumerate() {
            let k = bits.count_ones() as usize;
            match g[k] {
                None => g[k] = Some(v),
                Some(prev) if prev == v => {}
                Some(_) => {
                    return Err(Error::InvalidArgument(
                        "boolean function is not symmetric".into(),
                    ))
                }
            }
        }
        SymmetricBooleanFunction::new(g.into_iter().map(|v| v.unwrap()).collect())
    }

    /// Adjacent levels (p, q) = (q+1, q) whose (uniform) labels differ.
    /// Requires a non-constant symmetric function.
    pub fn adjacent_separating_levels(&self) -> Result<(usize, usize)> {
        self.to_symmetric()?.adjacent_separating_levels()
    }
}

/// A symmetric Boolean function given by its level values (g₀,…,g_d):
/// the output is g_k whenever the input has exactly k ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetricBooleanFunction {
    g: Vec<u8>,
}

impl SymmetricBooleanFunction {
    pub fn new(g: Vec<u8>) -> Result<Self> {
        if g.len() < 2 {
            return Err(Error::InvalidArgument(
                "symmetric boolean function needs d ≥ 1 (g of length d+1)".into(),
            ));
        }
        if g.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("level values must be 0 or 1".into()));
        }
        Ok(SymmetricBooleanFunction { g })
    }

    pub fn builtin(name: &str, d: usize) -> Result<Self> {
        BooleanFunction::builtin(name, d)?.to_symmetric()
    }

    pub fn arity(&self) -> usize {
        self.g.len() - 1
    }

    pub fn levels(&self) -> &[u8] {
        &self.g
    }

    /// Output on any input with exactly `k` ones.
    pub fn eval_ones(&self, k: usize) -> u8 {
        self.g[k]
    }

    pub fn is_constant(&self) -> bool {
        self.g.iter().all(|&v| v == self.g[0])
    }

    pub fn to_boolean(&self) -> BooleanFunction {
        let d = self.arity();
        let table = (0..1usize << d)
            .map(|bits| self.g[bits.count_ones() as usize])
            .collect();
        BooleanFunction { d, table }
    }

    /// Smallest q with g_q ≠ g_{q+1}, returned as (p, q) = (q+1, q).
    pub fn adjacent_separating_levels(&self) -> Result<(usize, usize)> {
        for q in 0..self.g.len() - 1 {
            if self.g[q] != self.g[q + 1] {
                return Ok((q + 1, q));
            }
        }
        Err(Error::InvalidArgument(
            "constant function has no separating levels".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Pair sets for the impossibility bounds
// ---------------------------------------------------------------------------

/// The pair set 𝒯 of the impossibility proofs: Boolean-vector pairs (u, v)
/// whose difference vectors are one-hot when built by [`build_pair_set`].
#[derive(Debug, Clone)]
pub struct PairSet {
    pub d: usize,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Σ |u − v| over the pairs, per coordinate.
    pub fn diff_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for (u, v) in &self.pairs {
            for i in 0..self.d {
                s[i] += (u[i] - v[i]).abs();
            }
        }
        s
    }

    /// The adjacent-level construction satisfies ‖Σ|u−v|‖∞ · d == |𝒯|.
    pub fn check_invariant(&self) -> bool {
        (linf_norm(&self.diff_sum()) * self.d as f64 - self.len() as f64).abs() < 1e-9
    }
}

/// All pairs (u, v) with u ∈ S_p, v ∈ S_q and ‖u − v‖₁ = 1, for adjacent
/// levels p = q + 1. Every difference vector is one-hot, |𝒯| = C(d,p)·p, and
/// ‖Σ|u−v|‖∞ = |𝒯|/d by symmetry.
pub fn build_pair_set(d: usize, p: usize, q: usize) -> Result<PairSet> {
    if d == 0 || d >= usize::BITS as usize {
        return Err(Error::InvalidArgument(format!(
            "dimension {d} out of range"
        )));
    }
    if p != q + 1 || p > d {
        return Err(Error::InvalidArgument(format!(
            "pair set needs adjacent levels p = q + 1 within 0..=d, got ({p}, {q})"
        )));
    }
    let to_vec = |bits: usize| -> Vec<f64> { (0..d).map(|i| ((bits >> i) & 1) as f64).collect() };
    let mut pairs = Vec::new();
    for u in 0..1usize << d {
        if u.count_ones() as usize != p {
            continue;
        }
        for i in 0..d {
            if (u >> i) & 1 == 1 {
                pairs.push((to_vec(u), to_vec(u & !(1 << i))));
            }
        }
    }
    Ok(PairSet { d, pairs })
}

/// The Boolean dataset on which the robust-radius cap applies: the full
/// adjacent-level dataset S_p ∪ S_q (radius cap 1/2d), or the ≤ d+1-point
/// compact variant (radius cap 1/d).
pub fn impossibility_dataset(
    g: &SymmetricBooleanFunction,
    compact: bool,
) -> Result<BooleanDataset> {
    if g.is_constant() {
        return Err(Error::InvalidArgument(
            "impossibility dataset requires a non-constant function".into(),
        ));
    }
    let f = g.to_boolean();
    let mode = if compact {
        BooleanMode::Compact
    } else {
        let (p, q) = g.adjacent_separating_levels()?;
        BooleanMode::Levels { p, q }
    };
    gen_boolean_dataset(&f, mode)
}

// ---------------------------------------------------------------------------
// Two-layer ℓ∞-distance net constructions
// ---------------------------------------------------------------------------

/// Parameters of a single ℓ∞-distance neuron computing the literal
/// disjunction (∨_{i∈pos} x_i) ∨ (∨_{j∈neg} ¬x_j) on {0,1}^d:
/// positive literal → w = −1, negated literal → w = 2, unused → w = 1/2,
/// bias −1.
pub fn literal_disjunction_neuron(
    d: usize,
    pos: &[usize],
    neg: &[usize],
) -> Result<(Vec<f64>, f64)> {
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::InvalidArgument(
            "a literal disjunction needs at least one literal".into(),
        ));
    }
    let mut w = vec![0.5; d];
    for &i in pos {
        if i >= d {
            return Err(Error::InvalidArgument(format!("literal index {i} ≥ d")));
        }
        w[i] = -1.0;
    }
    for &j in neg {
        if j >= d || w[j] == -1.0 {
            return Err(Error::InvalidArgument(format!(
                "literal index {j} out of range or repeated"
            )));
        }
        w[j] = 2.0;
    }
    Ok((w, -1.0))
}

/// Represent `f` exactly on {0,1}^d by a two-layer ℓ∞-distance net.
///
/// Canonical-DNF construction: each true row a becomes a first-layer neuron
/// computing the negation of its minterm — the literal disjunction with
/// x_i negated where a_i = 1 and plain where a_i = 0 — and the second layer
/// ORs the negations (all anchors 2, bias −1). The identically-zero function
/// uses the special net ‖(‖x‖∞, ‖x−1‖∞)‖∞ − 1.
pub fn boolean_to_linf_net(f: &BooleanFunction) -> Result<Network> {
    let d = f.arity();
    let minterms: Vec<usize> = (0..1usize << d).filter(|&b| f.eval_bits(b) == 1).collect();
    if minterms.is_empty() {
        // ‖(‖x‖∞, ‖x − 1‖∞)‖∞ − 1 is 0 on every Boolean input.
        let layer1 = Layer::LinfDist {
            weight: Tensor::from_rows(&[vec![0.0; d], vec![1.0; d]]),
            bias: vec![0.0, 0.0],
        };
        let layer2 = Layer::LinfDist {
            weight: Tensor::zeros(1, 2),
            bias: vec![-1.0],
        };
        return Ok(Network::new(d, vec![layer1, layer2]).with_input_range(0.0, 1.0));
    }
    let mut rows = Vec::with_capacity(minterms.len());
    for &a in &minterms {
        // Negated minterm: ∨ (¬x_i where a_i = 1; x_i where a_i = 0).
        let pos: Vec<usize> = (0..d).filter(|i| (a >> i) & 1 == 0).collect();
        let neg: Vec<usize> = (0..d).filter(|i| (a >> i) & 1 == 1).collect();
        let (w, _) = literal_disjunction_neuron(d, &pos, &neg)?;
        rows.push(w);
    }
    let m = rows.len();
    let layer1 = Layer::LinfDist {
        weight: Tensor::from_rows(&rows),
        bias: vec![-1.0; m],
    };
    // OR of the negations: every input treated as a negated literal.
    let layer2 = Layer::LinfDist {
        weight: Tensor::from_data(1, m, vec![2.0; m]),
        bias: vec![-1.0],
    };
    Ok(Network::new(d, vec![layer1, layer2]).with_input_range(0.0, 1.0))
}

/// Enumerate the k-subsets of {0,…,d−1} as bit masks, in ascending mask
/// order.
fn k_subsets(d: usize, k: usize) -> Vec<usize> {
    (0..1usize << d)
        .filter(|b| b.count_ones() as usize == k)
        .collect()
}

/// Represent the k-th order statistic (k-th largest coordinate) exactly on
/// [−B, B]^d by a two-layer ℓ∞-distance net of first-layer width C(d,k),
/// using x_(k) = max_{|S|=k} min_{i∈S} x_i.
///
/// With C = 2B + 1, the first layer's neuron for a subset S (anchors C on S,
/// 0 elsewhere, bias −C) outputs −min_{i∈S} x_i, and the second layer
/// (anchors C, bias −C) outputs −min_S of those, i.e. the nested max-min.
pub fn order_statistic_linf_net(d: usize, k: usize, b_bound: f64) -> Result<Network> {
    if d == 0 || d >= usize::BITS as usize || k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "order statistic needs 1 ≤ k ≤ d, got k={k}, d={d}"
        )));
    }
    if !(b_bound > 0.0) || !b_bound.is_finite() {
        return Err(Error::InvalidArgument(
            "domain bound must be positive and finite".into(),
        ));
    }
    let c = 2.0 * b_bound + 1.0;
    let subsets = k_subsets(d, k);
    let mut rows = Vec::with_capacity(subsets.len());
    for &s in &subsets {
        rows.push(
            (0..d)
                .map(|i| if (s >> i) & 1 == 1 { c } else { 0.0 })
                .collect(),
        );
    }
    let m = rows.len();
    let layer1 = Layer::LinfDist {
        weight: Tensor::from_rows(&rows),
        bias: vec![-c; m],
    };
    let layer2 = Layer::LinfDist {
        weight: Tensor::from_data(1, m, vec![c; m]),
        bias: vec![-c],
    };
    Ok(Network::new(d, vec![layer1, layer2]).with_input_range(-b_bound, b_bound))
}

// ---------------------------------------------------------------------------
// MaxMin networks: Batcher sorting and deep Boolean representation
// ---------------------------------------------------------------------------

/// Batcher odd-even mergesort comparator schedule for `d` wires. Each stage
/// is a set of disjoint comparators (lo, hi), lo < hi, that place the larger
/// value on the `lo` wire (descending sort). Built on the next power of two
/// with comparators touching out-of-range wires dropped — the dropped wires
/// behave as −∞ padding, which never moves under a max-at-lo comparator.
pub fn batcher_schedule(d: usize) -> Vec<Vec<(usize, usize)>> {
    let n = d.next_power_of_two();
    let mut stages = Vec::new();
    let mut p = 1;
    while p < n {
        let mut k = p;
        while k >= 1 {
            let mut stage = Vec::new();
            let mut j = k % p;
            while j + k < n {
                for i in 0..k.min(n - j - k) {
                    if (i + j) / (2 * p) == (i + j + k) / (2 * p) {
                        let (lo, hi) = (i + j, i + j + k);
                        if hi < d {
                            stage.push((lo, hi));
                        }
                    }
                }
                j += 2 * k;
            }
            if !stage.is_empty() {
                stages.push(stage);
            }
            k /= 2;
        }
        p *= 2;
    }
    stages
}

/// One-hot constrained affine layer helper: rows given as (index, bias) with
/// `index = None` meaning a pure-bias constant output.
fn one_hot_affine(in_dim: usize, rows: &[(Option<usize>, f64)]) -> Layer {
    let mut weight = Tensor::zeros(rows.len(), in_dim);
    let mut bias = vec![0.0; rows.len()];
    for (r, &(idx, b)) in rows.iter().enumerate() {
        if let Some(i) = idx {
            weight.set(r, i, 1.0);
        }
        bias[r] = b;
    }
    Layer::Affine {
        weight,
        bias,
        constrained: true,
    }
}

/// Realize one comparator stage as [Affine pairing, MaxMin(2), Affine select]
/// over `d` wires. Wires not touched by a comparator pass through a MaxMin
/// pair against a sentinel constant strictly below the wire's value range, so
/// the max slot carries the wire unchanged ("waste the neuron that always
/// outputs b").
fn comparator_stage_layers(d: usize, stage: &[(usize, usize)], sentinel: f64) -> Vec<Layer> {
    let in_comparator: Vec<bool> = {
        let mut used = vec![false; d];
        for &(lo, hi) in stage {
            used[lo] = true;
            used[hi] = true;
        }
        used
    };
    let mut pair_rows: Vec<(Option<usize>, f64)> = Vec::new();
    // out_slot_of[w] = slot holding wire w after the MaxMin (its max/min slot).
    let mut out_slot = vec![0usize; d];
    for &(lo, hi) in stage {
        out_slot[lo] = pair_rows.len(); // max slot
        out_slot[hi] = pair_rows.len() + 1; // min slot
        pair_rows.push((Some(lo), 0.0));
        pair_rows.push((Some(hi), 0.0));
    }
    for (w, used) in in_comparator.iter().enumerate() {
        if !used {
            out_slot[w] = pair_rows.len(); // max slot beats the sentinel
            pair_rows.push((Some(w), 0.0));
            pair_rows.push((None, sentinel));
        }
    }
    let pairing = one_hot_affine(d, &pair_rows);
    let select_rows: Vec<(Option<usize>, f64)> = (0..d).map(|w| (Some(out_slot[w]), 0.0)).collect();
    let select = one_hot_affine(pair_rows.len(), &select_rows);
    vec![pairing, Layer::MaxMin { group: 2 }, select]
}

/// A MaxMin network sorting its input descending on the declared box
/// [lo, hi]^d, together with the output permutation (identity here: output
/// wire r carries the (r+1)-th largest value). Verified by the 0-1 principle.
pub fn maxmin_sorting_net(d: usize, lo: f64, hi: f64) -> Result<(Network, Vec<usize>)> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "sorting network needs d ≥ 2, got {d}"
        )));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(
            "sorting network needs a finite declared box lo < hi".into(),
        ));
    }
    let sentinel = lo - 1.0;
    let mut layers = Vec::new();
    for stage in batcher_schedule(d) {
        layers.extend(comparator_stage_layers(d, &stage, sentinel));
    }
    let net = Network::new(d, layers).with_input_range(lo, hi);
    Ok((net, (0..d).collect()))
}

/// The sorting net plus a final selection layer extracting the k-th largest
/// coordinate.
pub fn maxmin_order_statistic_net(d: usize, k: usize, lo: f64, hi: f64) -> Result<Network> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "order statistic needs 1 ≤ k ≤ d, got k={k}, d={d}"
        )));
    }
    let (mut net, perm) = maxmin_sorting_net(d, lo, hi)?;
    net.layers
        .push(one_hot_affine(d, &[(Some(perm[k - 1]), 0.0)]));
    Ok(net)
}

/// Reduce each group of wires to one value (its min or max) by a tree of
/// MaxMin pairs; odd leftovers pair against a constant that never wins.
/// Returns the layers plus the number of surviving wires (one per group).
fn maxmin_tree_layers(
    mut groups: Vec<Vec<usize>>,
    mut width: usize,
    take_min: bool,
    pad_const: f64,
) -> Vec<Layer> {
    let mut layers = Vec::new();
    while groups.iter().any(|g| g.len() > 1) {
        let mut pair_rows: Vec<(Option<usize>, f64)> = Vec::new();
        let mut next_groups = Vec::with_capacity(groups.len());
        let keep_off = usize::from(take_min); // min slot = 1, max slot = 0
        for g in &groups {
            let mut next = Vec::with_capacity(g.len().div_ceil(2));
            for chunk in g.chunks(2) {
                let slot = pair_rows.len();
                pair_rows.push((Some(chunk[0]), 0.0));
                match chunk.get(1) {
                    Some(&b) => pair_rows.push((Some(b), 0.0)),
                    // For a min-tree pad with a large constant (never the
                    // min); for a max-tree with a small one (never the max).
                    None => pair_rows.push((None, pad_const)),
                }
                next.push(slot + keep_off);
            }
            next_groups.push(next);
        }
        layers.push(one_hot_affine(width, &pair_rows));
        layers.push(Layer::MaxMin { group: 2 });
        let select_rows: Vec<(Option<usize>, f64)> = next_groups
            .iter()
            .flatten()
            .map(|&s| (Some(s), 0.0))
            .collect();
        let select_width = pair_rows.len();
        layers.push(one_hot_affine(select_width, &select_rows));
        width = select_rows.len();
        let mut next_idx = 0usize;
        groups = next_groups
            .iter()
            .map(|g| {
                let out: Vec<usize> = (next_idx..next_idx + g.len()).collect();
                next_idx += g.len();
                out
            })
            .collect();
    }
    layers
}

/// Represent `f` exactly on {0,1}^d by a deep MaxMin network: a literal
/// affine layer (x_i or 1 − x_i per minterm variable), a min-tree per
/// minterm (the conjunction), and a max-tree across minterms (the
/// disjunction). The identically-zero function degenerates to a constant
/// affine output.
pub fn boolean_to_maxmin_net(f: &BooleanFunction) -> Result<Network> {
    let d = f.arity();
    let minterms: Vec<usize> = (0..1usize << d).filter(|&b| f.eval_bits(b) == 1).collect();
    if minterms.is_empty() {
        return Ok(
            Network::new(d, vec![one_hot_affine(d, &[(None, 0.0)])]).with_input_range(0.0, 1.0)
        );
    }
    // Literal layer: for minterm a and variable i, output x_i (a_i = 1) or
    // 1 − x_i (a_i = 0); either way the minterm is the AND of its d literals.
    let m = minterms.len();
    let mut weight = Tensor::zeros(m * d, d);
    let mut bias = vec![0.0; m * d];
    for (t, &a) in minterms.iter().enumerate() {
        for i in 0..d {
            let r = t * d + i;
            if (a >> i) & 1 == 1 {
                weight.set(r, i, 1.0);
            } else {
                weight.set(r, i, -1.0);
                bias[r] = 1.0;
            }
        }
    }
    let mut layers = vec![Layer::Affine {
        weight,
        bias,
        constrained: true,
    }];
    // Min-tree inside each minterm; literal values live in [0,1], so a pad
    // constant of 2 never wins a min.
    let groups: Vec<Vec<usize>> = (0..m).map(|t| (t * d..(t + 1) * d).collect()).collect();
    layers.extend(maxmin_tree_layers(groups, m * d, true, 2.0));
    // Max-tree across minterms; a pad constant of −1 never wins a max.
    layers.extend(maxmin_tree_layers(vec![(0..m).collect()], m, false, -1.0));
    Ok(Network::new(d, layers).with_input_range(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Tight constructions
// ---------------------------------------------------------------------------

/// The standard-family classifier attaining margin exactly 1/d on every
/// Boolean input of a symmetric dataset: one constrained affine layer with
/// rows ∓(1/d,…,1/d) and biases ∓1/d, then the odd piecewise-linear σ
/// parameterized by the level values. Class = argmax of the two outputs.
pub fn tight_symmetric_net(g: &SymmetricBooleanFunction) -> Result<Network> {
    if g.is_constant() {
        return Err(Error::InvalidArgument(
            "tight symmetric net needs a non-constant function".into(),
        ));
    }
    let d = g.arity();
    let inv = 1.0 / d as f64;
    let layer1 = Layer::Affine {
        weight: Tensor::from_rows(&[vec![-inv; d], vec![inv; d]]),
        bias: vec![-inv, inv],
        constrained: true,
    };
    let layer2 = Layer::Activation {
        kind: ActKind::PiecewiseSym {
            g: g.levels().to_vec(),
        },
    };
    Ok(Network::new(d, vec![layer1, layer2]).with_input_range(0.0, 1.0))
}

/// The single affine layer f(x) = 1/2 + (Σx_i − k + 1/2)/d, which attains
/// the best possible uniform order-statistic error 1/2 − 1/2d on [0,1]^d
/// for the standard family.
pub fn tight_linear_orderstat(d: usize, k: usize) -> Result<Network> {
    if d == 0 || k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "tight linear approximator needs 1 ≤ k ≤ d, got k={k}, d={d}"
        )));
    }
    let df = d as f64;
    let layer = Layer::Affine {
        weight: Tensor::from_data(1, d, vec![1.0 / df; d]),
        bias: vec![0.5 + (0.5 - k as f64) / df],
        constrained: true,
    };
    Ok(Network::new(d, vec![layer]).with_input_range(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Impossibility verifiers
// ---------------------------------------------------------------------------

/// Check the sum inequality ‖Σ|f(u)−f(v)|‖∞ ≤ ‖Σ|u−v|‖∞ for a network in
/// the standard family. A `false` return signals an implementation bug —
/// the inequality is a theorem for this family.
pub fn verify_sum_inequality(net: &Network, pairs: &PairSet) -> Result<bool> {
    if !net.is_standard_family() {
        return Err(Error::UnsupportedLayer {
            operation: "sum inequality",
            layer: "network outside the constrained affine + activation family".into(),
        });
    }
    if net.input_dim != pairs.d {
        return Err(Error::ShapeMismatch {
            context: "sum inequality input",
            expected: net.input_dim,
            actual: pairs.d,
        });
    }
    let opts = EvalOpts::exact();
    let mut out_sum: Option<Vec<f64>> = None;
    for (u, v) in &pairs.pairs {
        let fu = forward(net, u, &opts)?;
        let fv = forward(net, v, &opts)?;
        let s = out_sum.get_or_insert_with(|| vec![0.0; fu.output().len()]);
        for (acc, (a, b)) in s.iter_mut().zip(fu.output().iter().zip(fv.output())) {
            *acc += (a - b).abs();
        }
    }
    let lhs = out_sum.map_or(0.0, |s| linf_norm(&s));
    let rhs = linf_norm(&pairs.diff_sum());
    Ok(lhs <= rhs + 1e-9)
}

/// What an impossibility witness is sought against.
#[derive(Debug, Clone)]
pub enum WitnessKind<'a> {
    /// Order-statistic approximation: find x̂ ∈ {0,1}^d maximizing
    /// |f(x̂) − x̂_(k)| (for scalar-output nets).
    OrderStat { k: usize },
    /// Symmetric-Boolean classification: find the adjacent-level point with
    /// the smallest margin f_y − f_{1−y} (for two-output nets).
    Boolean { g: &'a SymmetricBooleanFunction },
}

/// Number of affine layers M when the network is in the MaxMin family
/// (alternating constrained affine and group-2 MaxMin layers); `None`
/// otherwise. The matching depth bound applies when M ≤ ⌊log₂ d⌋.
pub fn maxmin_depth(net: &Network) -> Option<usize> {
    let mut affine = 0usize;
    for layer in &net.layers {
        match layer {
            Layer::Affine {
                constrained: true, ..
            } => affine += 1,
            Layer::MaxMin { group: 2 } => {}
            _ => return None,
        }
    }
    (affine > 0).then_some(affine)
}

/// Exhaustive witness search over {0,1}^d.
///
/// For [`WitnessKind::OrderStat`] the return is (x̂, max gap); the theorems
/// guarantee gap ≥ 1/2 − 1/2d for the standard family and ≥ 1/2 − 2^{M−2}/d
/// for M-layer MaxMin nets with M ≤ ⌊log₂ d⌋. For [`WitnessKind::Boolean`]
/// the return is (x̂, min margin over S_p ∪ S_q), guaranteed ≤ 1/d for
/// standard nets.
pub fn impossibility_witness(net: &Network, kind: &WitnessKind) -> Result<(Vec<f64>, f64)> {
    let d = net.input_dim;
    if d < 2 {
        return Err(Error::InvalidArgument(
            "impossibility witnesses need d ≥ 2".into(),
        ));
    }
    if d >= usize::BITS as usize - 1 {
        return Err(Error::InvalidArgument(format!(
            "dimension {d} too large for exhaustive search"
        )));
    }
    let opts = EvalOpts::exact();
    let point = |bits: usize| -> Vec<f64> { (0..d).map(|i| ((bits >> i) & 1) as f64).collect() };
    match kind {
        WitnessKind::OrderStat { k } => {
            if *k == 0 || *k > d {
                return Err(Error::InvalidArgument(format!(
                    "order statistic index k={k} out of 1..=d"
                )));
            }
            let mut best: Option<(Vec<f64>, f64)> = None;
            for bits in 0..1usize << d {
                let x = point(bits);
                let out = forward(net, &x, &opts)?;
                if out.output().len() != 1 {
                    return Err(Error::ShapeMismatch {
                        context: "order-statistic witness output",
                        expected: 1,
                        actual: out.output().len(),
                    });
                }
                // On Boolean inputs the k-th largest value is 1 iff at least
                // k coordinates are 1.
                let target = f64::from(u8::from(bits.count_ones() as usize >= *k));
                let gap = (out.output()[0] - target).abs();
                if best.as_ref().is_none_or(|(_, g)| gap > *g) {
                    best = Some((x, gap));
                }
            }
            Ok(best.expect("d ≥ 2 gives a nonempty search"))
        }
        WitnessKind::Boolean { g } => {
            if g.arity() != d {
                return Err(Error::ShapeMismatch {
                    context: "boolean witness arity",
                    expected: d,
                    actual: g.arity(),
                });
            }
            let (p, q) = g.adjacent_separating_levels()?;
            let mut best: Option<(Vec<f64>, f64)> = None;
            for bits in 0..1usize << d {
                let ones = bits.count_ones() as usize;
                if ones != p && ones != q {
                    continue;
                }
                let x = point(bits);
                let out = forward(net, &x, &opts)?;
                if out.output().len() != 2 {
                    return Err(Error::ShapeMismatch {
                        context: "boolean witness output",
                        expected: 2,
                        actual: out.output().len(),
                    });
                }
                let y = g.eval_ones(ones) as usize;
                let margin = out.output()[y] - out.output()[1 - y];
                if best.as_ref().is_none_or(|(_, m)| margin < *m) {
                    best = Some((x, margin));
                }
            }
            Ok(best.expect("non-constant g gives nonempty levels"))
        }
    }
}

// ---------------------------------------------------------------------------
// Conversions to SortNet
// ---------------------------------------------------------------------------

/// Convert a GroupSort/MaxMin network — alternating constrained affine and
/// group-sort layers, ending in an affine — into an exactly equivalent
/// SortNet with explicit weights and identity activation, valid on the
/// declared box [−B, B]^d.
///
/// Each affine W̃^(l) becomes a SortNet layer whose neuron weights are the
/// rows of W̃^(l); a shared per-layer bias vector staggers the sort input by
/// group offsets −iC so the full descending sort reproduces the group-wise
/// sort, with C large enough to dominate every activation spread. The first
/// layer uses strictly decreasing per-coordinate offsets −jC, making its
/// sort the identity permutation. A final identity affine restores the
/// output bias.
pub fn groupsort_to_sortnet(net: &Network, b_bound: f64) -> Result<Network> {
    if !(b_bound > 0.0) || !b_bound.is_finite() {
        return Err(Error::InvalidArgument(
            "conversion needs a positive finite domain bound".into(),
        ));
    }
    // Parse the alternating affine / group-sort structure.
    let mut affines: Vec<(&Tensor, &Vec<f64>)> = Vec::new();
    let mut groups: Vec<usize> = Vec::new();
    let mut expect_affine = true;
    for layer in &net.layers {
        match (layer, expect_affine) {
            (
                Layer::Affine {
                    weight,
                    bias,
                    constrained: true,
                },
                true,
            ) => {
                affines.push((weight, bias));
                expect_affine = false;
            }
            (Layer::MaxMin { group }, false) => {
                groups.push(*group);
                expect_affine = true;
            }
            _ => {
                return Err(Error::UnsupportedLayer {
                    operation: "groupsort conversion",
                    layer: layer.kind_name().into(),
                });
            }
        }
    }
    if expect_affine || affines.len() != groups.len() + 1 {
        return Err(Error::UnsupportedLayer {
            operation: "groupsort conversion",
            layer: "network must end with an affine layer".into(),
        });
    }
    let m = affines.len();
    // Activation magnitudes grow by at most max|bias| per affine layer
    // (rows have ℓ₁ norm ≤ 1); C must exceed the largest value spread, and
    // 4×(bound) + 1 is a safe over-estimate.
    let bias_growth: f64 = affines[..m - 1]
        .iter()
        .map(|(_, b)| b.iter().fold(0.0f64, |a, &v| a.max(v.abs())))
        .sum();
    let c = 4.0 * (b_bound + bias_growth) + 1.0;
    // Group offsets for each hidden width: o_{iG+j} = −iC.
    let offset_vec = |width: usize, group: usize| -> Vec<f64> {
        (0..width).map(|t| -((t / group) as f64) * c).collect()
    };
    let mut layers: Vec<Layer> = Vec::with_capacity(m + 1);
    // `consumed` is the additive offset inside the sorted vector that the
    // current affine multiplies: the strictly decreasing −jC for layer 1,
    // the group offsets o^{(l−1)} afterwards.
    let mut consumed: Vec<f64> = (1..=net.input_dim).map(|j| -(j as f64) * c).collect();
    for (l, (weight, _)) in affines.iter().enumerate() {
        let beta: Vec<f64> = if l == 0 {
            consumed.clone()
        } else {
            // β^{(l)} = o^{(l−1)} + b̃^{(l−1)} − W̃^{(l−1)}·(offset consumed
            // by the previous affine).
            let (w_prev, b_prev) = affines[l - 1];
            let shift = w_prev.matvec(&consumed)?;
            let o = offset_vec(w_prev.rows, groups[l - 1]);
            consumed = o.clone();
            (0..w_prev.rows)
                .map(|i| o[i] + b_prev[i] - shift[i])
                .collect()
        };
        if weight.cols != beta.len() {
            return Err(Error::ShapeMismatch {
                context: "groupsort conversion chain",
                expected: beta.len(),
                actual: weight.cols,
            });
        }
        let width = weight.rows;
        let mut bias_rows = Tensor::zeros(width, beta.len());
        for k in 0..width {
            bias_rows.row_mut(k).copy_from_slice(&beta);
        }
        layers.push(Layer::SortNet {
            weights: SortWeights::Explicit {
                weight: (*weight).clone(),
            },
            bias: bias_rows,
            act: ActKind::Identity,
        });
    }
    // Output correction: b^out = b̃^(M) − W̃^(M)·(offset the last affine
    // consumed) — just b̃ − W̃·a when there is no sort layer.
    let (w_last, b_last) = affines[m - 1];
    let shift = w_last.matvec(&consumed)?;
    let b_out: Vec<f64> = b_last.iter().zip(&shift).map(|(b, s)| b - s).collect();
    let out_dim = w_last.rows;
    layers.push(Layer::Affine {
        weight: Tensor::identity(out_dim),
        bias: b_out,
        constrained: true,
    });
    Ok(Network::new(net.input_dim, layers).with_input_range(-b_bound, b_bound))
}

/// Convert an ℓ∞-distance net (a stack of LinfDist layers) into an exactly
/// equivalent SortNet: geometric weights with ρ = 0 (i.e. w = e₁, picking
/// the largest order statistic), absolute-value activation, per-neuron bias
/// rows −w̃^{(l,k)} shifted by the previous layer's biases, and a final
/// identity affine restoring b̃^(M). The identity is algebraic — exact on
/// all of ℝ^d.
pub fn linfnet_to_sortnet(net: &Network) -> Result<Network> {
    let mut dists: Vec<(&Tensor, &Vec<f64>)> = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::LinfDist { weight, bias } => dists.push((weight, bias)),
            _ => {
                return Err(Error::UnsupportedLayer {
                    operation: "linf-net conversion",
                    layer: layer.kind_name().into(),
                })
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::UnsupportedLayer {
            operation: "linf-net conversion",
            layer: "empty network".into(),
        });
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(dists.len() + 1);
    for (l, (weight, _)) in dists.iter().enumerate() {
        let mut bias_rows = Tensor::zeros(weight.rows, weight.cols);
        for k in 0..weight.rows {
            let row = bias_rows.row_mut(k);
            for j in 0..weight.cols {
                row[j] = -weight.get(k, j) + if l > 0 { dists[l - 1].1[j] } else { 0.0 };
            }
        }
        layers.push(Layer::SortNet {
            weights: SortWeights::Geometric { rho: 0.0 },
            bias: bias_rows,
            act: ActKind::Abs,
        });
    }
    let (w_last, b_last) = dists[dists.len() - 1];
    layers.push(Layer::Affine {
        weight: Tensor::identity(w_last.rows),
        bias: (*b_last).clone(),
        constrained: true,
    });
    let mut out = Network::new(net.input_dim, layers);
    out.input_range = net.input_range;
    Ok(out)
}

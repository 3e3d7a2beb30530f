//! Model file format.
//!
//! Little-endian binary: magic `LIPN`, format version (u32), network header
//! (input dim, head split, input range), then a layer-descriptor table where
//! each layer is a kind tag followed by its shape fields and row-major f64
//! parameter blobs. A sidecar plain-text manifest (`<path>.manifest.txt`)
//! lists the architecture for human inspection; it is advisory only and
//! never read back.

use super::{ActKind, Layer, Network, SortWeights};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"LIPN";
const VERSION: u32 = 1;

const TAG_AFFINE: u8 = 1;
const TAG_ACTIVATION: u8 = 2;
const TAG_MAXMIN: u8 = 3;
const TAG_LINFDIST: u8 = 4;
const TAG_SORTNET: u8 = 5;
const TAG_MEANSHIFT: u8 = 6;

const ACT_IDENTITY: u8 = 0;
const ACT_RELU: u8 = 1;
const ACT_ABS: u8 = 2;
const ACT_TANH: u8 = 3;
const ACT_PIECEWISE: u8 = 4;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn blob(&mut self, data: &[f64]) {
        self.buf.reserve(data.len() * 8);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn act(&mut self, kind: &ActKind) {
        match kind {
            ActKind::Identity => self.u8(ACT_IDENTITY),
            ActKind::Relu => self.u8(ACT_RELU),
            ActKind::Abs => self.u8(ACT_ABS),
            ActKind::Tanh => self.u8(ACT_TANH),
            ActKind::PiecewiseSym { g } => {
                self.u8(ACT_PIECEWISE);
                self.u64(g.len() as u64);
                self.buf.extend_from_slice(g);
            }
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.rows as u64);
        self.u64(t.cols as u64);
        self.blob(&t.data);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated {
                context: ctx,
                needed: self.pos + n - self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, ctx: &'static str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }
    fn u32(&mut self, ctx: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }
    fn u64(&mut self, ctx: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
    fn i64(&mut self, ctx: &'static str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
    fn f64(&mut self, ctx: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
    fn blob(&mut self, n: usize, ctx: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, ctx)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn act(&mut self) -> Result<ActKind> {
        Ok(match self.u8("activation tag")? {
            ACT_IDENTITY => ActKind::Identity,
            ACT_RELU => ActKind::Relu,
            ACT_ABS => ActKind::Abs,
            ACT_TANH => ActKind::Tanh,
            ACT_PIECEWISE => {
                let n = self.u64("piecewise len")? as usize;
                ActKind::PiecewiseSym {
                    g: self.take(n, "piecewise table")?.to_vec(),
                }
            }
            t => {
                return Err(Error::InvalidArgument(format!(
                    "unknown activation tag {t}"
                )))
            }
        })
    }
    fn tensor(&mut self, ctx: &'static str) -> Result<Tensor> {
        let rows = self.u64(ctx)? as usize;
        let cols = self.u64(ctx)? as usize;
        let data = self.blob(rows * cols, ctx)?;
        Ok(Tensor { rows, cols, data })
    }
}

/// Serialize `net` to `path` and write the sidecar manifest next to it.
pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(net.input_dim as u64);
    w.i64(net.head_split.map(|h| h as i64).unwrap_or(-1));
    match net.input_range {
        Some((lo, hi)) => {
            w.u8(1);
            w.f64(lo);
            w.f64(hi);
        }
        None => {
            w.u8(0);
            w.f64(0.0);
            w.f64(0.0);
        }
    }
    w.u64(net.layers.len() as u64);
    for layer in &net.layers {
        match layer {
            Layer::Affine {
                weight,
                bias,
                constrained,
            } => {
                w.u8(TAG_AFFINE);
                w.u8(u8::from(*constrained));
                w.tensor(weight);
                w.blob(bias);
            }
            Layer::Activation { kind } => {
                w.u8(TAG_ACTIVATION);
                w.act(kind);
            }
            Layer::MaxMin { group } => {
                w.u8(TAG_MAXMIN);
                w.u64(*group as u64);
            }
            Layer::LinfDist { weight, bias } => {
                w.u8(TAG_LINFDIST);
                w.tensor(weight);
                w.blob(bias);
            }
            Layer::SortNet { weights, bias, act } => {
                w.u8(TAG_SORTNET);
                match weights {
                    SortWeights::Geometric { rho } => {
                        w.u8(0);
                        w.f64(*rho);
                    }
                    SortWeights::Explicit { weight } => {
                        w.u8(1);
                        w.tensor(weight);
                    }
                }
                w.tensor(bias);
                w.act(act);
            }
            Layer::MeanShiftBn { dim, running_mean } => {
                w.u8(TAG_MEANSHIFT);
                w.u64(*dim as u64);
                match running_mean {
                    Some(m) => {
                        w.u8(1);
                        w.blob(m);
                    }
                    None => w.u8(0),
                }
            }
        }
    }
    std::fs::write(path, &w.buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest = manifest_text(net);
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(())
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    std::path::PathBuf::from(s)
}

fn manifest_text(net: &Network) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "lipcert model, format v{VERSION}");
    let _ = writeln!(s, "input_dim: {}", net.input_dim);
    if let Some((lo, hi)) = net.input_range {
        let _ = writeln!(s, "input_range: [{lo}, {hi}]");
    }
    if let Some(h) = net.head_split {
        let _ = writeln!(s, "head_split: {h}");
    }
    let _ = writeln!(s, "lipschitz_bound: {}", net.lipschitz_bound());
    let mut dim = net.input_dim;
    for (i, layer) in net.layers.iter().enumerate() {
        let out = layer.out_dim(dim).unwrap_or(0);
        let desc = match layer {
            Layer::Affine { constrained, .. } => {
                format!("affine{}", if *constrained { " (constrained)" } else { "" })
            }
            Layer::Activation { kind } => format!("activation {}", kind.name()),
            Layer::MaxMin { group } => format!("maxmin group={group}"),
            Layer::LinfDist { .. } => "linf-dist".to_string(),
            Layer::SortNet { weights, act, .. } => match weights {
                SortWeights::Geometric { rho } => {
                    format!("sortnet rho={rho} act={}", act.name())
                }
                SortWeights::Explicit { .. } => {
                    format!("sortnet explicit-weights act={}", act.name())
                }
            },
            Layer::MeanShiftBn { running_mean, .. } => format!(
                "mean-shift-bn ({})",
                if running_mean.is_some() {
                    "finalized"
                } else {
                    "unfinalized"
                }
            ),
        };
        let _ = writeln!(s, "layer {i}: {desc} [{dim} -> {out}]");
        dim = out;
    }
    s
}

/// Read a model file written by [`save`]. Bad magic, unsupported version,
/// and truncated payloads are reported as distinct error kinds.
pub fn load(path: &Path) -> Result<Network> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic.try_into().unwrap()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version, VERSION));
    }
    let input_dim = r.u64("input_dim")? as usize;
    let head_split = match r.i64("head_split")? {
        -1 => None,
        h => Some(h as usize),
    };
    let has_range = r.u8("input_range flag")? == 1;
    let lo = r.f64("input_range lo")?;
    let hi = r.f64("input_range hi")?;
    let n_layers = r.u64("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = match r.u8("layer tag")? {
            TAG_AFFINE => {
                let constrained = r.u8("affine constrained")? == 1;
                let weight = r.tensor("affine weight")?;
                let rows = weight.rows;
                Layer::Affine {
                    weight,
                    bias: r.blob(rows, "affine bias")?,
                    constrained,
                }
            }
            TAG_ACTIVATION => Layer::Activation { kind: r.act()? },
            TAG_MAXMIN => Layer::MaxMin {
                group: r.u64("maxmin group")? as usize,
            },
            TAG_LINFDIST => {
                let weight = r.tensor("linf-dist weight")?;
                let rows = weight.rows;
                Layer::LinfDist {
                    weight,
                    bias: r.blob(rows, "linf-dist bias")?,
                }
            }
            TAG_SORTNET => {
                let weights = match r.u8("sortnet weight tag")? {
                    0 => SortWeights::Geometric {
                        rho: r.f64("sortnet rho")?,
                    },
                    1 => SortWeights::Explicit {
                        weight: r.tensor("sortnet weights")?,
                    },
                    t => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown sortnet weight tag {t}"
                        )))
                    }
                };
                Layer::SortNet {
                    weights,
                    bias: r.tensor("sortnet bias")?,
                    act: r.act()?,
                }
            }
            TAG_MEANSHIFT => {
                let dim = r.u64("mean-shift dim")? as usize;
                let running_mean = if r.u8("mean-shift flag")? == 1 {
                    Some(r.blob(dim, "mean-shift mean")?)
                } else {
                    None
                };
                Layer::MeanShiftBn { dim, running_mean }
            }
            t => return Err(Error::InvalidArgument(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let mut net = Network::new(input_dim, layers);
    net.head_split = head_split;
    if has_range {
        net.input_range = Some((lo, hi));
    }
    net.out_dim()?; // validate chaining
    Ok(net)
}

//! Define-by-run reverse-mode differentiation over signal-valued nodes.
//!
//! Each node holds a multi-channel real or complex waveform (polarizations,
//! subbands, intensity channels, or a flat parameter vector as a single
//! channel). Operations compute their value eagerly when recorded and carry a
//! reverse rule that maps the output gradient to input gradients.
//!
//! Gradient convention: for a real loss `L` and complex entry `z = a + jb` the
//! stored gradient is `∂L/∂a + j·∂L/∂b`. Complex parameters live in real
//! vectors as interleaved `(re, im)` pairs, so their gradients are exactly the
//! real partial derivatives.

use crate::error::{Error, Result};
use crate::kernels;
use crate::pmd::{rotation_from_angles, rotation_partials};
use crate::training::{fake_quantize_value, FakeQuantConfig};
use num_complex::Complex64;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(Vec<Vec<f64>>),
    Complex(Vec<Vec<Complex64>>),
}

impl Value {
    pub fn scalar(v: f64) -> Self {
        Value::Real(vec![vec![v]])
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Value::Real(vec![v])
    }

    pub fn as_real(&self) -> Result<&Vec<Vec<f64>>> {
        match self {
            Value::Real(v) => Ok(v),
            Value::Complex(_) => Err(Error::Contract("expected a real node".into())),
        }
    }

    pub fn as_complex(&self) -> Result<&Vec<Vec<Complex64>>> {
        match self {
            Value::Complex(v) => Ok(v),
            Value::Real(_) => Err(Error::Contract("expected a complex node".into())),
        }
    }

    /// The single entry of a scalar node.
    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Value::Real(v) if v.len() == 1 && v[0].len() == 1 => Ok(v[0][0]),
            _ => Err(Error::Contract("expected a scalar node".into())),
        }
    }

    /// Flat real parameter vector (single channel).
    pub fn as_vector(&self) -> Result<&[f64]> {
        match self {
            Value::Real(v) if v.len() == 1 => Ok(&v[0]),
            _ => Err(Error::Contract("expected a single-channel real vector".into())),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Value::Real(v) => Value::Real(v.iter().map(|c| vec![0.0; c.len()]).collect()),
            Value::Complex(v) => Value::Complex(v.iter().map(|c| vec![ZERO; c.len()]).collect()),
        }
    }

    fn accumulate(&mut self, other: &Value) -> Result<()> {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) if shape_eq(a, b) => {
                for (x, y) in a.iter_mut().zip(b) {
                    for (u, v) in x.iter_mut().zip(y) {
                        *u += v;
                    }
                }
                Ok(())
            }
            (Value::Complex(a), Value::Complex(b)) if shape_eq(a, b) => {
                for (x, y) in a.iter_mut().zip(b) {
                    for (u, v) in x.iter_mut().zip(y) {
                        *u += v;
                    }
                }
                Ok(())
            }
            _ => Err(Error::Contract("gradient shape mismatch".into())),
        }
    }
}

fn shape_eq<T, U>(a: &[Vec<T>], b: &[Vec<U>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
}

/// Reverse rule of a user-defined operation.
pub trait ReverseRule {
    /// Returns one gradient per input, shaped like that input's value.
    fn backward(&self, inputs: &[&Value], output: &Value, grad: &Value) -> Result<Vec<Value>>;
}

/// How the tap sequence of a filter parameter is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapLayout {
    /// `⌈K/2⌉` complex half taps of a symmetric filter.
    Folded,
    /// All `K` complex taps.
    Full,
}

enum Op {
    Leaf,
    Fir {
        x: NodeId,
        taps: NodeId,
        layout: TapLayout,
    },
    FirBank {
        x: NodeId,
        taps: NodeId,
        len: usize,
    },
    Kerr {
        x: NodeId,
        scale: NodeId,
    },
    Intensity {
        x: NodeId,
    },
    MimoConv {
        x: NodeId,
        w: NodeId,
        s_out: usize,
        len: usize,
    },
    PhaseRotate {
        x: NodeId,
        phase: NodeId,
    },
    FdFilter {
        x: NodeId,
        taps: NodeId,
    },
    Rotation {
        x: NodeId,
        angles: NodeId,
    },
    Mimo4 {
        x: NodeId,
        w: NodeId,
        len: usize,
    },
    FirDecimate {
        x: NodeId,
        taps: Vec<f64>,
        offset: usize,
        step: usize,
    },
    FakeQuant {
        x: NodeId,
        scales: Vec<f64>,
        group: usize,
    },
    Mse {
        x: NodeId,
        target: Vec<Vec<Complex64>>,
    },
    Cma {
        x: NodeId,
        radius: f64,
    },
    L1 {
        x: NodeId,
        weight: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Custom {
        name: String,
        inputs: Vec<NodeId>,
        rule: Option<Box<dyn ReverseRule>>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient with respect to `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Value> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a flat real vector node, zeros when it did not contribute.
    pub fn vector(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(Value::Real(v)) if v.len() == 1 => v[0].clone(),
            _ => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn complex_pairs(v: &[f64]) -> Vec<Complex64> {
    v.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

fn pairs_from_complex(v: &[Complex64]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.re, c.im]).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    fn complex(&self, id: NodeId) -> Result<&Vec<Vec<Complex64>>> {
        self.value(id).as_complex()
    }

    fn real(&self, id: NodeId) -> Result<&Vec<Vec<f64>>> {
        self.value(id).as_real()
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Value) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// FIR filter applied to every channel of `x`; `taps` is a real vector of
    /// interleaved `(re, im)` pairs in the given layout.
    pub fn fir(&mut self, x: NodeId, taps: NodeId, layout: TapLayout) -> Result<NodeId> {
        let h = complex_pairs(self.value(taps).as_vector()?);
        if h.is_empty() {
            return Err(Error::Contract("empty filter".into()));
        }
        let out = self
            .complex(x)?
            .iter()
            .map(|ch| match layout {
                TapLayout::Folded => kernels::conv_folded(ch, &h),
                TapLayout::Full => kernels::conv_same(ch, &h),
            })
            .collect();
        Ok(self.push(Value::Complex(out), Op::Fir { x, taps, layout }))
    }

    /// Channel `i` of `x` filtered by its own `len` full complex taps, stored
    /// channel after channel as `(re, im)` pairs.
    pub fn fir_bank(&mut self, x: NodeId, taps: NodeId, len: usize) -> Result<NodeId> {
        let h = complex_pairs(self.value(taps).as_vector()?);
        let u = self.complex(x)?;
        if len == 0 || h.len() != len * u.len() {
            return Err(Error::Contract(format!(
                "filter bank of {} taps does not match {} channels of {len}",
                h.len(),
                u.len()
            )));
        }
        let out = u
            .iter()
            .zip(h.chunks_exact(len))
            .map(|(ch, hc)| kernels::conv_same(ch, hc))
            .collect();
        Ok(self.push(Value::Complex(out), Op::FirBank { x, taps, len }))
    }

    /// `u ← u·exp(−j·s·P)` with `s` the scalar node `scale` and `P` the
    /// single-polarization intensity or the Manakov-weighted dual-polarization sum.
    pub fn kerr(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let s = self.value(scale).as_scalar()?;
        let u = self.complex(x)?;
        let p = nl_power(u)?;
        let out = u
            .iter()
            .map(|ch| {
                ch.iter()
                    .zip(&p)
                    .map(|(v, pw)| v * Complex64::from_polar(1.0, -s * pw))
                    .collect()
            })
            .collect();
        Ok(self.push(Value::Complex(out), Op::Kerr { x, scale }))
    }

    /// Per-channel intensity `|u|²` as real channels.
    pub fn intensity(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self
            .complex(x)?
            .iter()
            .map(|ch| ch.iter().map(|v| v.norm_sqr()).collect())
            .collect();
        Ok(self.push(Value::Real(out), Op::Intensity { x }))
    }

    /// Real MIMO convolution of the channels of `x` with tensor `w`
    /// (`[s_out][s_in][len]`, row-major).
    pub fn mimo_conv(&mut self, x: NodeId, w: NodeId, s_out: usize, len: usize) -> Result<NodeId> {
        let xv = self.real(x)?;
        let wv = self.value(w).as_vector()?;
        if len % 2 == 0 || wv.len() != s_out * xv.len() * len {
            return Err(Error::Contract(format!(
                "tensor of {} coefficients does not match {}x{}x{}",
                wv.len(),
                s_out,
                xv.len(),
                len
            )));
        }
        let out = kernels::mimo_conv(xv, wv, s_out, len);
        Ok(self.push(Value::Real(out), Op::MimoConv { x, w, s_out, len }))
    }

    /// `u_i ← u_i·exp(−j·φ_i)` channel by channel.
    pub fn phase_rotate(&mut self, x: NodeId, phase: NodeId) -> Result<NodeId> {
        let u = self.complex(x)?;
        let ph = self.real(phase)?;
        if !shape_eq(u, ph) {
            return Err(Error::Contract("phase and signal shapes differ".into()));
        }
        let out = u
            .iter()
            .zip(ph)
            .map(|(ch, p)| {
                ch.iter()
                    .zip(p)
                    .map(|(v, f)| v * Complex64::from_polar(1.0, -f))
                    .collect()
            })
            .collect();
        Ok(self.push(Value::Complex(out), Op::PhaseRotate { x, phase }))
    }

    /// Fractional-delay pair: pol x uses real taps `h`, pol y the reversed taps.
    pub fn fd_filter(&mut self, x: NodeId, taps: NodeId) -> Result<NodeId> {
        let u = self.complex(x)?;
        if u.len() != 2 {
            return Err(Error::Argument("fractional-delay stage needs two polarizations".into()));
        }
        let h = self.value(taps).as_vector()?.to_vec();
        let hr: Vec<f64> = h.iter().rev().copied().collect();
        let out = vec![
            kernels::conv_same_real_taps(&u[0], &h),
            kernels::conv_same_real_taps(&u[1], &hr),
        ];
        Ok(self.push(Value::Complex(out), Op::FdFilter { x, taps }))
    }

    /// Memoryless 2×2 unitary rotation parameterized by three angles.
    pub fn rotation(&mut self, x: NodeId, angles: NodeId) -> Result<NodeId> {
        let u = self.complex(x)?;
        if u.len() != 2 {
            return Err(Error::Argument("rotation needs two polarizations".into()));
        }
        let a = self.value(angles).as_vector()?;
        if a.len() != 3 {
            return Err(Error::Contract("rotation takes three angles".into()));
        }
        let m = rotation_from_angles([a[0], a[1], a[2]]);
        let (mut ox, mut oy) = (Vec::with_capacity(u[0].len()), Vec::with_capacity(u[0].len()));
        for (x0, y0) in u[0].iter().zip(&u[1]) {
            let (p, q) = m.apply(*x0, *y0);
            ox.push(p);
            oy.push(q);
        }
        Ok(self.push(Value::Complex(vec![ox, oy]), Op::Rotation { x, angles }))
    }

    /// Real 4×4×L MIMO filter on `(Re x, Im x, Re y, Im y)`.
    pub fn mimo4(&mut self, x: NodeId, w: NodeId, len: usize) -> Result<NodeId> {
        let u = self.complex(x)?;
        if u.len() != 2 {
            return Err(Error::Argument("4x4 MIMO filter needs two polarizations".into()));
        }
        let wv = self.value(w).as_vector()?;
        if len % 2 == 0 || wv.len() != 16 * len {
            return Err(Error::Contract("4x4 tensor shape mismatch".into()));
        }
        let out = from_quad(&kernels::mimo_conv(&to_quad(u), wv, 4, len));
        Ok(self.push(Value::Complex(out), Op::Mimo4 { x, w, len }))
    }

    /// Fixed real FIR ("same" alignment) sampled at `offset + m·step`, `count` outputs.
    pub fn fir_decimate(
        &mut self,
        x: NodeId,
        taps: &[f64],
        offset: usize,
        step: usize,
        count: usize,
    ) -> Result<NodeId> {
        let u = self.complex(x)?;
        if let Some(ch) = u.first() {
            if count > 0 && offset + (count - 1) * step >= ch.len() {
                return Err(Error::Bounds("decimation grid runs past the signal".into()));
            }
        }
        let out = u
            .iter()
            .map(|ch| kernels::fir_decimate(ch, taps, offset, step, count))
            .collect();
        Ok(self.push(
            Value::Complex(out),
            Op::FirDecimate {
                x,
                taps: taps.to_vec(),
                offset,
                step,
            },
        ))
    }

    /// Fake quantization of a parameter vector. The vector is split into
    /// consecutive groups of `group` entries (one filter each); `scales` holds
    /// the clipping scale of every group.
    pub fn fake_quant(
        &mut self,
        x: NodeId,
        cfg: &FakeQuantConfig,
        scales: Vec<f64>,
        group: usize,
    ) -> Result<NodeId> {
        let v = self.value(x).as_vector()?;
        if group == 0 || v.len() != scales.len() * group {
            return Err(Error::Contract("quantization groups do not tile the vector".into()));
        }
        let q = v
            .iter()
            .enumerate()
            .map(|(i, x)| fake_quantize_value(*x, cfg.bits, scales[i / group]))
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.push(Value::vector(q), Op::FakeQuant { x, scales, group }))
    }

    /// Mean of `|x − target|²` over all channels and samples.
    pub fn mse(&mut self, x: NodeId, target: Vec<Vec<Complex64>>) -> Result<NodeId> {
        let u = self.complex(x)?;
        if !shape_eq(u, &target) || target.iter().all(|c| c.is_empty()) {
            return Err(Error::Argument("MSE needs equal, non-empty shapes".into()));
        }
        let l = crate::training::mse_raw(u, &target);
        Ok(self.push(Value::scalar(l), Op::Mse { x, target }))
    }

    /// Sum over channels of the mean of `(|u|² − R)²`.
    pub fn cma(&mut self, x: NodeId, radius: f64) -> Result<NodeId> {
        let l = crate::training::cma_raw(self.complex(x)?, radius)?;
        Ok(self.push(Value::scalar(l), Op::Cma { x, radius }))
    }

    /// `λ·Σ|θ|` over a real vector.
    pub fn l1(&mut self, x: NodeId, weight: f64) -> Result<NodeId> {
        let v = self.value(x).as_vector()?;
        let p = weight * v.iter().map(|t| t.abs()).sum::<f64>();
        Ok(self.push(Value::scalar(p), Op::L1 { x, weight }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).as_scalar()? + self.value(b).as_scalar()?;
        Ok(self.push(Value::scalar(v), Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).as_scalar()? * c;
        Ok(self.push(Value::scalar(v), Op::Scale { a, c }))
    }

    /// Records an operation computed outside the tape. Without a reverse rule
    /// the node can be evaluated but any backward pass through it fails.
    pub fn custom(
        &mut self,
        name: &str,
        inputs: &[NodeId],
        value: Value,
        rule: Option<Box<dyn ReverseRule>>,
    ) -> NodeId {
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.value(loss).as_scalar()?;
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.reverse(i, &g)?;
            grads[i] = Some(g);
            for (id, gv) in contributions {
                match &mut grads[id.0] {
                    Some(acc) => acc.accumulate(&gv)?,
                    slot @ None => {
                        let mut z = self.nodes[id.0].value.zeros_like();
                        z.accumulate(&gv)?;
                        *slot = Some(z);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn reverse(&self, i: usize, g: &Value) -> Result<Vec<(NodeId, Value)>> {
        let node = &self.nodes[i];
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Fir { x, taps, layout } => {
                let u = self.complex(*x)?;
                let h = complex_pairs(self.value(*taps).as_vector()?);
                let gy = g.as_complex()?;
                let mut gx = Vec::with_capacity(u.len());
                let mut gh = vec![ZERO; h.len()];
                for (ch, gch) in u.iter().zip(gy) {
                    let (a, b) = match layout {
                        TapLayout::Folded => kernels::conv_folded_backward(ch, &h, gch),
                        TapLayout::Full => kernels::conv_same_backward(ch, &h, gch),
                    };
                    gx.push(a);
                    for (acc, v) in gh.iter_mut().zip(b) {
                        *acc += v;
                    }
                }
                vec![
                    (*x, Value::Complex(gx)),
                    (*taps, Value::vector(pairs_from_complex(&gh))),
                ]
            }
            Op::FirBank { x, taps, len } => {
                let u = self.complex(*x)?;
                let h = complex_pairs(self.value(*taps).as_vector()?);
                let gy = g.as_complex()?;
                let mut gx = Vec::with_capacity(u.len());
                let mut gh = Vec::with_capacity(h.len());
                for ((ch, hc), gch) in u.iter().zip(h.chunks_exact(*len)).zip(gy) {
                    let (a, b) = kernels::conv_same_backward(ch, hc, gch);
                    gx.push(a);
                    gh.extend(b);
                }
                vec![
                    (*x, Value::Complex(gx)),
                    (*taps, Value::vector(pairs_from_complex(&gh))),
                ]
            }
            Op::Kerr { x, scale } => {
                let s = self.value(*scale).as_scalar()?;
                let u = self.complex(*x)?;
                let y = node.value.as_complex()?;
                let gy = g.as_complex()?;
                let p = nl_power(u)?;
                let weight = if u.len() == 2 { crate::channel::MANAKOV } else { 1.0 };
                // r[n] = ∂L/∂φ[n] with φ = −s·P
                let n = p.len();
                let mut r = vec![0.0; n];
                for (yc, gc) in y.iter().zip(gy) {
                    for t in 0..n {
                        r[t] += (gc[t].conj() * Complex64::new(0.0, 1.0) * yc[t]).re;
                    }
                }
                let gs: f64 = -r.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
                let gx = u
                    .iter()
                    .zip(gy)
                    .map(|(uc, gc)| {
                        (0..n)
                            .map(|t| {
                                let rot = Complex64::from_polar(1.0, s * p[t]);
                                gc[t] * rot - 2.0 * s * weight * r[t] * uc[t]
                            })
                            .collect()
                    })
                    .collect();
                vec![(*x, Value::Complex(gx)), (*scale, Value::scalar(gs))]
            }
            Op::Intensity { x } => {
                let u = self.complex(*x)?;
                let gy = g.as_real()?;
                let gx = u
                    .iter()
                    .zip(gy)
                    .map(|(uc, gc)| uc.iter().zip(gc).map(|(v, gv)| 2.0 * gv * v).collect())
                    .collect();
                vec![(*x, Value::Complex(gx))]
            }
            Op::MimoConv { x, w, s_out, len } => {
                let (gx, gw) = kernels::mimo_conv_backward(
                    self.real(*x)?,
                    self.value(*w).as_vector()?,
                    *s_out,
                    *len,
                    g.as_real()?,
                );
                vec![(*x, Value::Real(gx)), (*w, Value::vector(gw))]
            }
            Op::PhaseRotate { x, phase } => {
                let y = node.value.as_complex()?;
                let ph = self.real(*phase)?;
                let gy = g.as_complex()?;
                let mut gx = Vec::with_capacity(y.len());
                let mut gp = Vec::with_capacity(y.len());
                for ((yc, pc), gc) in y.iter().zip(ph).zip(gy) {
                    gx.push(
                        gc.iter()
                            .zip(pc)
                            .map(|(gv, f)| gv * Complex64::from_polar(1.0, *f))
                            .collect(),
                    );
                    // ∂y/∂φ = −j·y
                    gp.push(
                        gc.iter()
                            .zip(yc)
                            .map(|(gv, yv)| (gv.conj() * Complex64::new(0.0, -1.0) * yv).re)
                            .collect(),
                    );
                }
                vec![(*x, Value::Complex(gx)), (*phase, Value::Real(gp))]
            }
            Op::FdFilter { x, taps } => {
                let u = self.complex(*x)?;
                let h = self.value(*taps).as_vector()?;
                let hr: Vec<f64> = h.iter().rev().copied().collect();
                let gy = g.as_complex()?;
                let (gx0, gh0) = kernels::conv_same_real_taps_backward(&u[0], h, &gy[0]);
                let (gx1, gh1) = kernels::conv_same_real_taps_backward(&u[1], &hr, &gy[1]);
                let l = h.len();
                let gh: Vec<f64> = (0..l).map(|k| gh0[k] + gh1[l - 1 - k]).collect();
                vec![(*x, Value::Complex(vec![gx0, gx1])), (*taps, Value::vector(gh))]
            }
            Op::Rotation { x, angles } => {
                let u = self.complex(*x)?;
                let a = self.value(*angles).as_vector()?;
                let a = [a[0], a[1], a[2]];
                let m = rotation_from_angles(a);
                let mh = m.adjoint();
                let dm = rotation_partials(a);
                let gy = g.as_complex()?;
                let mut ga = [0.0; 3];
                let (mut gx0, mut gx1) = (Vec::with_capacity(u[0].len()), Vec::with_capacity(u[0].len()));
                for t in 0..u[0].len() {
                    let (g0, g1) = (gy[0][t], gy[1][t]);
                    let (p, q) = mh.apply(g0, g1);
                    gx0.push(p);
                    gx1.push(q);
                    for (k, d) in dm.iter().enumerate() {
                        let (dx, dy) = d.apply(u[0][t], u[1][t]);
                        ga[k] += (g0.conj() * dx + g1.conj() * dy).re;
                    }
                }
                vec![
                    (*x, Value::Complex(vec![gx0, gx1])),
                    (*angles, Value::vector(ga.to_vec())),
                ]
            }
            Op::Mimo4 { x, w, len } => {
                let u = self.complex(*x)?;
                let gq = to_quad_grad(g.as_complex()?);
                let (gx, gw) =
                    kernels::mimo_conv_backward(&to_quad(u), self.value(*w).as_vector()?, 4, *len, &gq);
                vec![(*x, Value::Complex(from_quad(&gx))), (*w, Value::vector(gw))]
            }
            Op::FirDecimate {
                x,
                taps,
                offset,
                step,
            } => {
                let u = self.complex(*x)?;
                let gy = g.as_complex()?;
                let gx = u
                    .iter()
                    .zip(gy)
                    .map(|(ch, gc)| kernels::fir_decimate_backward(ch.len(), taps, *offset, *step, gc))
                    .collect();
                vec![(*x, Value::Complex(gx))]
            }
            Op::FakeQuant { x, scales, group } => {
                // straight-through inside the clipping range
                let v = self.value(*x).as_vector()?;
                let gy = g.as_vector()?;
                let gx = v
                    .iter()
                    .zip(gy)
                    .enumerate()
                    .map(|(i, (xv, gv))| if xv.abs() <= scales[i / group] { *gv } else { 0.0 })
                    .collect();
                vec![(*x, Value::vector(gx))]
            }
            Op::Mse { x, target } => {
                let gl = g.as_scalar()?;
                let u = self.complex(*x)?;
                let count: usize = target.iter().map(|c| c.len()).sum();
                let k = 2.0 * gl / count as f64;
                let gx = u
                    .iter()
                    .zip(target)
                    .map(|(uc, tc)| uc.iter().zip(tc).map(|(a, b)| (a - b) * k).collect())
                    .collect();
                vec![(*x, Value::Complex(gx))]
            }
            Op::Cma { x, radius } => {
                let gl = g.as_scalar()?;
                let u = self.complex(*x)?;
                let gx = u
                    .iter()
                    .map(|uc| {
                        let k = 4.0 * gl / uc.len() as f64;
                        uc.iter().map(|v| v * (k * (v.norm_sqr() - radius))).collect()
                    })
                    .collect();
                vec![(*x, Value::Complex(gx))]
            }
            Op::L1 { x, weight } => {
                let gl = g.as_scalar()?;
                let v = self.value(*x).as_vector()?;
                let (_, sub) = crate::training::l1_penalty(v, *weight);
                vec![(*x, Value::vector(sub.into_iter().map(|s| s * gl).collect()))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { a, c } => vec![(*a, Value::scalar(g.as_scalar()? * c))],
            Op::Custom { name, inputs, rule } => {
                let Some(rule) = rule else {
                    return Err(Error::Contract(format!(
                        "operation '{name}' has no registered reverse rule"
                    )));
                };
                let vals: Vec<&Value> = inputs.iter().map(|id| self.value(*id)).collect();
                let gs = rule.backward(&vals, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "reverse rule of '{name}' returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

fn nl_power(u: &[Vec<Complex64>]) -> Result<Vec<f64>> {
    match u {
        [x] => Ok(x.iter().map(|v| v.norm_sqr()).collect()),
        [x, y] => Ok(x
            .iter()
            .zip(y)
            .map(|(a, b)| crate::channel::MANAKOV * (a.norm_sqr() + b.norm_sqr()))
            .collect()),
        _ => Err(Error::Argument(
            "Kerr rotation needs one or two polarizations".into(),
        )),
    }
}

fn to_quad(u: &[Vec<Complex64>]) -> Vec<Vec<f64>> {
    vec![
        u[0].iter().map(|v| v.re).collect(),
        u[0].iter().map(|v| v.im).collect(),
        u[1].iter().map(|v| v.re).collect(),
        u[1].iter().map(|v| v.im).collect(),
    ]
}

// complex gradient g = ∂/∂re + j∂/∂im splits into the two real channels
fn to_quad_grad(g: &[Vec<Complex64>]) -> Vec<Vec<f64>> {
    to_quad(g)
}

fn from_quad(q: &[Vec<f64>]) -> Vec<Vec<Complex64>> {
    vec![
        q[0].iter().zip(&q[1]).map(|(a, b)| Complex64::new(*a, *b)).collect(),
        q[2].iter().zip(&q[3]).map(|(a, b)| Complex64::new(*a, *b)).collect(),
    ]
}

//! State-space kernels: zero-order-hold discretization, the discrete
//! recurrence, its convolutional-kernel form, and the input-dependent
//! (selective) scan.
//!
//! The recurrence is
//! `h_t = A_bar ⊙ h_{t-1} + B_bar · x_t`, `y_t = C · h_t`
//! with `A_bar = exp(Δ·A)` and `B_bar = (Δ·A)^{-1}(exp(Δ·A) - 1)·Δ·B`
//! evaluated elementwise over a diagonal A.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Tensor, Var};

/// Below this |Δ·A| the closed-form B_bar cancels catastrophically; the
/// second-order series is exact to f64 there.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// Time-invariant scan parameters for one head: diagonal state matrix stored
/// as `A = -exp(a_log)` (strictly negative), input/output projections, and a
/// positive timescale.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub a_log: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

impl SsmParams {
    pub fn new(a_log: Vec<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self> {
        let n = a_log.len();
        if b.len() != n || c.len() != n {
            return Err(Error::Shape(format!(
                "ssm projections must match state dim {n}: B has {}, C has {}",
                b.len(),
                c.len()
            )));
        }
        if delta <= 0.0 {
            return Err(Error::Param(format!("timescale delta must be positive, got {delta}")));
        }
        Ok(SsmParams { a_log, b, c, delta })
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.len()
    }

    /// Diagonal of A; strictly negative by construction.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }
}

/// Discretized diagonal system. With negative A and positive Δ every
/// `a_bar` entry lies strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// One diagonal entry of the ZOH map. Shared by the time-invariant and the
/// per-token (selective) paths so the token-constant case reduces exactly.
pub fn zoh_scalar(a: f64, delta: f64, b: f64) -> (f64, f64) {
    let z = delta * a;
    let a_bar = z.exp();
    // exp_m1 keeps (exp(z) - 1) exact to the ulp; the series covers the
    // removable singularity at z = 0.
    let b_bar = if z.abs() < ZOH_SERIES_THRESHOLD {
        delta * b * (1.0 + 0.5 * z)
    } else {
        z.exp_m1() / a * b
    };
    (a_bar, b_bar)
}

/// Discretize explicit diagonal (a, Δ, b) vectors.
pub fn zoh_discretize_parts(a: &[f64], delta: f64, b: &[f64]) -> Result<DiscreteSsm> {
    if delta <= 0.0 {
        return Err(Error::Param(format!("zoh requires delta > 0, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "zoh dimension mismatch: A has {}, B has {}",
            a.len(),
            b.len()
        )));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&av, &bv) in a.iter().zip(b) {
        let (am, bm) = zoh_scalar(av, delta, bv);
        a_bar.push(am);
        b_bar.push(bm);
    }
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// Discretize a parameter set through its negative-diagonal A.
pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    zoh_discretize_parts(&p.a(), p.delta, &p.b)
}

/// Iterate the discrete recurrence over a scalar input sequence.
pub fn scan_recurrent(
    d: &DiscreteSsm,
    c: &[f64],
    x: &[f64],
    h0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = d.a_bar.len();
    if d.b_bar.len() != n || c.len() != n {
        return Err(Error::Shape(format!(
            "scan dimension mismatch: A_bar {}, B_bar {}, C {}",
            n,
            d.b_bar.len(),
            c.len()
        )));
    }
    let mut h = match h0 {
        Some(h0) => {
            if h0.len() != n {
                return Err(Error::Shape(format!(
                    "initial state has {} entries, expected {n}",
                    h0.len()
                )));
            }
            h0.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut y = Vec::with_capacity(x.len());
    for &xv in x {
        let mut acc = 0.0;
        for i in 0..n {
            h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * xv;
            acc += c[i] * h[i];
        }
        y.push(acc);
    }
    Ok(y)
}

/// Structured convolutional kernel of the time-invariant scan:
/// `K = (C·B_bar, C·A_bar·B_bar, ..., C·A_bar^{M-1}·B_bar)`.
pub fn kernel_convolutional(d: &DiscreteSsm, c: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = d.a_bar.len();
    if d.b_bar.len() != n || c.len() != n {
        return Err(Error::Shape("kernel dimension mismatch".into()));
    }
    if m < 1 {
        return Err(Error::Param("kernel length must be >= 1".into()));
    }
    let mut pow: Vec<f64> = d.b_bar.clone();
    let mut k = Vec::with_capacity(m);
    for step in 0..m {
        if step > 0 {
            for (p, a) in pow.iter_mut().zip(&d.a_bar) {
                *p *= a;
            }
        }
        k.push(c.iter().zip(&pow).map(|(cv, pv)| cv * pv).sum());
    }
    Ok(k)
}

/// Causal convolution of an input sequence with a kernel:
/// `y_t = sum_{j=0..t} K[j] · x_{t-j}`.
pub fn apply_kernel(x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (t, yv) in y.iter_mut().enumerate() {
        let jmax = t.min(k.len().saturating_sub(1));
        let mut acc = 0.0;
        for j in 0..=jmax {
            acc += k[j] * x[t - j];
        }
        *yv = acc;
    }
    y
}

/// Initial `a_log` values so that `-A` spans [1, N] log-uniformly across the
/// state dimension, identically for every channel.
pub fn init_a_log(channels: usize, state_dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * state_dim);
    for _ in 0..channels {
        for n in 0..state_dim {
            let t = if state_dim > 1 {
                n as f64 / (state_dim - 1) as f64
            } else {
                0.0
            };
            data.push((t * (state_dim as f64).ln()) as f32 as f64);
        }
    }
    Tensor::from_vec(vec![channels, state_dim], data).expect("static shape")
}

/// Multiply-accumulate count per token of the selective scan, per the cost
/// model used by the bench command: per (channel, state) pair one multiply
/// for Δ·A, two for B_bar, two for the state update, and one for the output
/// projection.
pub fn selective_scan_macs_per_token(channels: usize, state_dim: usize) -> u64 {
    6 * channels as u64 * state_dim as u64
}

// ------------------------------------------------------------- graph ops

/// Differentiable time-invariant scan over a scalar sequence.
/// Inputs: `x [M]`, `a_bar [N]`, `b_bar [N]`, `c [N]`.
#[derive(Debug)]
pub struct ScanTimeInvariant {
    pub h0: Vec<f64>,
}

impl Op for ScanTimeInvariant {
    fn name(&self) -> &'static str {
        "scan_recurrent"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, a_bar, b_bar, c) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let n = a_bar.len();
        if b_bar.len() != n || c.len() != n {
            return Err(Error::Shape("scan parameter lengths differ".into()));
        }
        if x.rank() != 1 {
            return Err(Error::Shape(format!("scan input must be rank 1, got {:?}", x.shape())));
        }
        let h0 = if self.h0.is_empty() { vec![0.0; n] } else { self.h0.clone() };
        if h0.len() != n {
            return Err(Error::Shape(format!("h0 has {} entries, expected {n}", h0.len())));
        }
        let d = DiscreteSsm {
            a_bar: a_bar.data().to_vec(),
            b_bar: b_bar.data().to_vec(),
        };
        let y = scan_recurrent(&d, c.data(), x.data(), Some(&h0))?;
        Ok(Tensor::from_vec(vec![x.len()], y)?.with_dtype_tag(x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, a_bar, b_bar, c) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let m = x.len();
        let n = a_bar.len();
        let h0 = if self.h0.is_empty() { vec![0.0; n] } else { self.h0.clone() };

        // Recompute the state trajectory.
        let mut states = vec![0.0; m * n];
        {
            let mut h = h0.clone();
            for t in 0..m {
                for i in 0..n {
                    h[i] = a_bar.data()[i] * h[i] + b_bar.data()[i] * x.data()[t];
                    states[t * n + i] = h[i];
                }
            }
        }

        let mut dx = needs[0].then(|| vec![0.0; m]);
        let mut da = needs[1].then(|| vec![0.0; n]);
        let mut db = needs[2].then(|| vec![0.0; n]);
        let mut dc = needs[3].then(|| vec![0.0; n]);
        let mut hhat = vec![0.0; n];
        for t in (0..m).rev() {
            let g = grad[t];
            for i in 0..n {
                if let Some(dc) = dc.as_mut() {
                    dc[i] += g * states[t * n + i];
                }
                hhat[i] += g * c.data()[i];
            }
            let mut xh = 0.0;
            for i in 0..n {
                let h_prev = if t == 0 { h0[i] } else { states[(t - 1) * n + i] };
                if let Some(da) = da.as_mut() {
                    da[i] += hhat[i] * h_prev;
                }
                if let Some(db) = db.as_mut() {
                    db[i] += hhat[i] * x.data()[t];
                }
                xh += hhat[i] * b_bar.data()[i];
                hhat[i] *= a_bar.data()[i];
            }
            if let Some(dx) = dx.as_mut() {
                dx[t] = xh;
            }
        }
        vec![dx, da, db, dc]
    }

    fn macs(&self, inputs: &[&Tensor], _output: &Tensor) -> u64 {
        (3 * inputs[0].len() * inputs[1].len()) as u64
    }
}

/// Differentiable selective scan: per-token ZOH discretization of a shared
/// diagonal A against token-dependent Δ, B, C.
/// Inputs: `x [L x D]`, `a [D x N]`, `delta [L x D]`, `b [L x N]`, `c [L x N]`.
#[derive(Debug)]
pub struct SelectiveScan;

struct SelectiveDims {
    l: usize,
    d: usize,
    n: usize,
}

impl SelectiveScan {
    fn dims(inputs: &[&Tensor]) -> Result<SelectiveDims> {
        let (x, a, delta, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        if x.rank() != 2 || a.rank() != 2 || delta.rank() != 2 || b.rank() != 2 || c.rank() != 2 {
            return Err(Error::Shape("selective_scan expects rank-2 inputs".into()));
        }
        let (l, d) = (x.dim(0), x.dim(1));
        let n = a.dim(1);
        if a.dim(0) != d {
            return Err(Error::Shape(format!(
                "A is {:?}, expected [{d}, N]",
                a.shape()
            )));
        }
        if delta.shape() != [l, d] {
            return Err(Error::Shape(format!(
                "delta is {:?}, expected [{l}, {d}]",
                delta.shape()
            )));
        }
        if b.shape() != [l, n] || c.shape() != [l, n] {
            return Err(Error::Shape(format!(
                "B/C are {:?}/{:?}, expected [{l}, {n}]",
                b.shape(),
                c.shape()
            )));
        }
        Ok(SelectiveDims { l, d, n })
    }
}

impl Op for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let dims = Self::dims(inputs)?;
        let (x, a, delta, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        if let Some(bad) = delta.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Contract(format!(
                "selective_scan requires strictly positive delta, got {bad}"
            )));
        }
        let (l, dch, n) = (dims.l, dims.d, dims.n);
        let mut y = vec![0.0; l * dch];
        let mut h = vec![0.0; n];
        for ch in 0..dch {
            h.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..l {
                let dt = delta.data()[t * dch + ch];
                let xv = x.data()[t * dch + ch];
                let mut acc = 0.0;
                for i in 0..n {
                    let (a_bar, b_bar) = zoh_scalar(a.data()[ch * n + i], dt, b.data()[t * n + i]);
                    h[i] = a_bar * h[i] + b_bar * xv;
                    acc += c.data()[t * n + i] * h[i];
                }
                y[t * dch + ch] = acc;
            }
        }
        Ok(Tensor::from_vec(vec![l, dch], y)?.with_dtype_tag(x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let dims = Self::dims(inputs).expect("validated in forward");
        let (x, a, delta, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (l, dch, n) = (dims.l, dims.d, dims.n);

        let mut dx = needs[0].then(|| vec![0.0; l * dch]);
        let mut da = needs[1].then(|| vec![0.0; dch * n]);
        let mut ddelta = needs[2].then(|| vec![0.0; l * dch]);
        let mut db = needs[3].then(|| vec![0.0; l * n]);
        let mut dc = needs[4].then(|| vec![0.0; l * n]);

        // Per-channel replay buffers.
        let mut states = vec![0.0; l * n];
        let mut a_bars = vec![0.0; l * n];
        let mut b_bars = vec![0.0; l * n];
        let mut hhat = vec![0.0; n];

        for ch in 0..dch {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let dt = delta.data()[t * dch + ch];
                let xv = x.data()[t * dch + ch];
                for i in 0..n {
                    let (a_bar, b_bar) = zoh_scalar(a.data()[ch * n + i], dt, b.data()[t * n + i]);
                    h[i] = a_bar * h[i] + b_bar * xv;
                    states[t * n + i] = h[i];
                    a_bars[t * n + i] = a_bar;
                    b_bars[t * n + i] = b_bar;
                }
            }

            hhat.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..l).rev() {
                let g = grad[t * dch + ch];
                for i in 0..n {
                    if let Some(dc) = dc.as_mut() {
                        dc[t * n + i] += g * states[t * n + i];
                    }
                    hhat[i] += g * c.data()[t * n + i];
                }
                let dt = delta.data()[t * dch + ch];
                let xv = x.data()[t * dch + ch];
                let mut xh = 0.0;
                let mut dth = 0.0;
                for i in 0..n {
                    let av = a.data()[ch * n + i];
                    let bv = b.data()[t * n + i];
                    let a_bar = a_bars[t * n + i];
                    let b_bar = b_bars[t * n + i];
                    let h_prev = if t == 0 { 0.0 } else { states[(t - 1) * n + i] };

                    let abar_hat = hhat[i] * h_prev;
                    let bbar_hat = hhat[i] * xv;
                    xh += hhat[i] * b_bar;

                    let z = dt * av;
                    let (dbbar_ddt, dbbar_da, dbbar_db) = if z.abs() < ZOH_SERIES_THRESHOLD {
                        (bv * (1.0 + z), bv * dt * dt * 0.5, dt * (1.0 + 0.5 * z))
                    } else {
                        let em1 = z.exp_m1();
                        (
                            bv * a_bar,
                            bv * (dt * a_bar * av - em1) / (av * av),
                            em1 / av,
                        )
                    };
                    dth += abar_hat * av * a_bar + bbar_hat * dbbar_ddt;
                    if let Some(da) = da.as_mut() {
                        da[ch * n + i] += abar_hat * dt * a_bar + bbar_hat * dbbar_da;
                    }
                    if let Some(db) = db.as_mut() {
                        db[t * n + i] += bbar_hat * dbbar_db;
                    }
                    hhat[i] *= a_bar;
                }
                if let Some(dx) = dx.as_mut() {
                    dx[t * dch + ch] = xh;
                }
                if let Some(ddelta) = ddelta.as_mut() {
                    ddelta[t * dch + ch] = dth;
                }
            }
        }
        vec![dx, da, ddelta, db, dc]
    }

    fn macs(&self, inputs: &[&Tensor], _output: &Tensor) -> u64 {
        let (l, d) = (inputs[0].dim(0), inputs[0].dim(1));
        let n = inputs[1].dim(1);
        l as u64 * selective_scan_macs_per_token(d, n)
    }
}

/// Apply the time-invariant scan inside a graph.
pub fn scan_recurrent_op(
    g: &mut Graph,
    x: Var,
    a_bar: Var,
    b_bar: Var,
    c: Var,
    h0: Option<Vec<f64>>,
) -> Result<Var> {
    g.apply(
        Box::new(ScanTimeInvariant { h0: h0.unwrap_or_default() }),
        &[x, a_bar, b_bar, c],
    )
}

/// Apply the selective scan inside a graph.
pub fn selective_scan_op(
    g: &mut Graph,
    x: Var,
    a: Var,
    delta: Var,
    b: Var,
    c: Var,
) -> Result<Var> {
    g.apply(Box::new(SelectiveScan), &[x, a, delta, b, c])
}

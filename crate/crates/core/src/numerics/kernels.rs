//! Raw row-major kernels shared by the graph's forward and backward passes.

/// `c = a' * b' + beta * c` where `a'` is `[m x k]` and `b'` is `[k x n]`.
///
/// With `a_t` set, `a` is stored as `[k x m]` and read transposed; likewise
/// `b_t` means `b` is stored as `[n x k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices have exactly the extents implied by (m, k, n) and
    // the strides above, which the debug assertions check.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a' * b'` into a fresh `[m x n]` buffer (same conventions as [`gemm`]).
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let mut c = Vec::with_capacity(m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: extents match the strides (asserted above) and `c` has
    // capacity for `m * n` values. With beta = 0 dgemm never reads C and
    // writes every element, so the buffer is fully initialized afterwards.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
/// `e^x` by Cody-Waite reduction to `|r| <= ln2/2` and a degree-13 Taylor
/// polynomial (truncation error below 1e-17 relative). Branch-free and
/// built from integer bit arithmetic, so loops over it auto-vectorize; it
/// is several times cheaper than libm's `exp` in the GELU hot loop.
#[inline(always)]
pub(crate) fn exp_poly(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    // ln 2 split into a high part with a short mantissa and the remainder.
    const LN2_HI: f64 = f64::from_bits(0x3fe6_2e42_fee0_0000);
    const LN2_LO: f64 = f64::from_bits(0x3dea_39ef_3579_3c76);
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let x = x.clamp(-708.0, 709.0);
    // `m = ROUND + n` exactly, so its low mantissa bits hold the integer `n`.
    let m = x * LOG2E + ROUND;
    let n = m - ROUND;
    let n_bits = (m.to_bits() as i64).wrapping_sub(ROUND.to_bits() as i64);
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = INV_FACTORIAL[13];
    for k in (0..13).rev() {
        p = p * r + INV_FACTORIAL[k];
    }
    // Multiply by 2^n by adding n to the exponent field; the result stays normal.
    f64::from_bits((p.to_bits() as i64).wrapping_add(n_bits << 52) as u64)
}

const INV_FACTORIAL: [f64; 14] = {
    let mut t = [1.0; 14];
    let mut k = 1;
    while k < 14 {
        t[k] = t[k - 1] / k as f64;
        k += 1;
    }
    t
};

/// `0.5 (1 + tanh(u)) = sigmoid(2u)`.
#[inline(always)]
fn half_one_plus_tanh(u: f64) -> f64 {
    1.0 / (1.0 + exp_poly(-2.0 * u))
}

/// The sigmoid factor `s(x)` with `gelu(x) = x s(x)`.
#[inline(always)]
pub(crate) fn gelu_gate(x: f64) -> f64 {
    half_one_plus_tanh(GELU_C * (x + GELU_A * x * x * x))
}

/// Derivative of `x * gelu_gate(x)` given the gate `s = gelu_gate(x)`.
#[inline(always)]
pub(crate) fn gelu_grad_from_gate(x: f64, s: f64) -> f64 {
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    // d/du [0.5 (1 + tanh u)] = 0.5 (1 - tanh^2 u) = 2 s (1 - s).
    s + x * 2.0 * s * (1.0 - s) * dinner
}

#[inline(always)]
fn gelu_forward_body(x: &[f64], gate: &mut [f64], out: &mut [f64]) {
    for ((&v, s), o) in x.iter().zip(gate.iter_mut()).zip(out.iter_mut()) {
        *s = gelu_gate(v);
        *o = v * *s;
    }
}

#[inline(always)]
fn gelu_backward_body(g: &[f64], x: &[f64], gate: &[f64], out: &mut [f64]) {
    for (((&gv, &xv), &s), o) in g.iter().zip(x).zip(gate).zip(out.iter_mut()) {
        *o = gv * gelu_grad_from_gate(xv, s);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gelu_forward_avx2(x: &[f64], gate: &mut [f64], out: &mut [f64]) {
    gelu_forward_body(x, gate, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gelu_backward_avx2(g: &[f64], x: &[f64], gate: &[f64], out: &mut [f64]) {
    gelu_backward_body(g, x, gate, out)
}

/// Returns `(gelu_gate(x), gelu(x))`. Uses 256-bit vectors when the CPU
/// has AVX2; both paths give bitwise-identical results.
pub(crate) fn gelu_forward(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut gate, mut out) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { gelu_forward_avx2(x, &mut gate, &mut out) };
        return (gate, out);
    }
    gelu_forward_body(x, &mut gate, &mut out);
    (gate, out)
}

/// `g * gelu'(x)` given the forward gates.
pub(crate) fn gelu_backward(g: &[f64], x: &[f64], gate: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { gelu_backward_avx2(g, x, gate, &mut out) };
        return out;
    }
    gelu_backward_body(g, x, gate, &mut out);
    out
}

/// True iff every entry is finite; lane-parallel so it vectorizes.
pub(crate) fn all_finite(data: &[f64]) -> bool {
    let mut acc = [0.0f64; 8];
    let chunks = data.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i] * 0.0;
        }
    }
    // `x * 0` is NaN exactly for infinite or NaN `x`.
    acc.iter().chain(rest).all(|v| (v * 0.0) == 0.0)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Contiguous runs of packed tokens, one per sentence.
#[derive(Clone, Debug)]
pub(crate) struct Segments {
    pub(crate) spans: Vec<(usize, usize)>,
    /// Offset of each (segment, head) probability block.
    pub(crate) prob_offsets: Vec<usize>,
    pub(crate) prob_len: usize,
}

impl Segments {
    pub(crate) fn new(lengths: &[usize], heads: usize) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut prob_offsets = Vec::with_capacity(lengths.len() * heads);
        let mut start = 0;
        let mut off = 0;
        for &len in lengths {
            spans.push((start, len));
            start += len;
            for _ in 0..heads {
                prob_offsets.push(off);
                off += len * len;
            }
        }
        Self {
            spans,
            prob_offsets,
            prob_len: off,
        }
    }

    pub(crate) fn total_tokens(&self) -> usize {
        self.spans.last().map_or(0, |&(s, l)| s + l)
    }
}

/// Multi-head scaled dot-product attention restricted to each segment.
///
/// Returns `(output, probs)`; `probs` holds the pre-dropout attention
/// weights, `keep` the optional dropout multipliers in the same layout.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    seg: &Segments,
    heads: usize,
    d: usize,
    keep: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; seg.total_tokens() * d];
    let mut probs = vec![0.0; seg.prob_len];
    for (si, &(st, n)) in seg.spans.iter().enumerate() {
        for h in 0..heads {
            let off = seg.prob_offsets[si * heads + h];
            let c0 = h * dh;
            let head = |t: usize| (st + t) * d + c0..(st + t) * d + c0 + dh;
            for i in 0..n {
                let qi = &q[head(i)];
                let row = &mut probs[off + i * n..off + (i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = scale * dot(qi, &k[head(j)]);
                }
                softmax_row(row);
                let oi = &mut out[head(i)];
                let keep_row = keep.map(|kp| &kp[off + i * n..off + (i + 1) * n]);
                for (j, &p) in row.iter().enumerate() {
                    let p = keep_row.map_or(p, |kr| p * kr[j]);
                    if p != 0.0 {
                        axpy(oi, p, &v[head(j)]);
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads {
    pub(crate) dq: Vec<f64>,
    pub(crate) dk: Vec<f64>,
    pub(crate) dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    keep: Option<&[f64]>,
    seg: &Segments,
    heads: usize,
    d: usize,
) -> AttentionGrads {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let total = seg.total_tokens() * d;
    let mut dq = vec![0.0; total];
    let mut dk = vec![0.0; total];
    let mut dv = vec![0.0; total];
    let mut ds = Vec::new();
    for (si, &(st, n)) in seg.spans.iter().enumerate() {
        for h in 0..heads {
            let off = seg.prob_offsets[si * heads + h];
            let c0 = h * dh;
            let head = |t: usize| (st + t) * d + c0..(st + t) * d + c0 + dh;
            ds.clear();
            ds.resize(n, 0.0);
            for i in 0..n {
                let go = &dout[head(i)];
                let p = &probs[off + i * n..off + (i + 1) * n];
                let keep_row = keep.map(|kp| &kp[off + i * n..off + (i + 1) * n]);
                // dL/dp_ij (through the dropout multiplier) and dV.
                for j in 0..n {
                    let kj = keep_row.map_or(1.0, |kr| kr[j]);
                    ds[j] = kj * dot(go, &v[head(j)]);
                    let pk = p[j] * kj;
                    if pk != 0.0 {
                        axpy(&mut dv[head(j)], pk, go);
                    }
                }
                // Softmax backward, then the score gradients.
                let inner = dot(p, &ds);
                for (g, &pj) in ds.iter_mut().zip(p) {
                    *g = pj * (*g - inner) * scale;
                }
                let qi = &q[head(i)];
                let dqi = &mut dq[head(i)];
                for (j, &g) in ds.iter().enumerate() {
                    if g != 0.0 {
                        axpy(dqi, g, &k[head(j)]);
                        axpy(&mut dk[head(j)], g, qi);
                    }
                }
            }
        }
    }
    AttentionGrads { dq, dk, dv }
}

/// `y += a * x` over equal-length slices.
#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

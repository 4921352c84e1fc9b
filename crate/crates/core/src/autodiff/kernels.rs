//! Raw numeric kernels shared by the tape ops.

/// `c (m×n) = op(a) · op(b)` (+ `c` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. Transposition is expressed through strides,
/// so `a` is stored `m×k` (or `k×m` if `trans_a`) in row-major order.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides, and `c` does not alias `a` or `b`.
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

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a gated multi-head WKV evaluation over `seqs` independent
/// sequences of `steps` tokens with `heads · head_dim` channels.
#[derive(Debug, Clone, Copy)]
pub struct WkvShape {
    pub seqs: usize,
    pub steps: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl WkvShape {
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    fn state_len(&self) -> usize {
        self.head_dim * self.head_dim
    }
}

/// Gated WKV readout by the linear-time recurrence.
///
/// For each sequence and head, with state `A_1 = 0`:
/// `y_t = g_t · (diag(u) k_tᵀ v_t + A_t)` and `A_{t+1} = diag(w) A_t + k_tᵀ v_t`.
/// `g, k, v` are `(seqs, steps, channels)`; `w, u` are `(heads, head_dim)`.
///
/// When `states` is given it receives every pre-update `A_t`, laid out as
/// `(seqs, heads, steps, head_dim, head_dim)`, for use by [`wkv_backward`].
pub fn wkv_forward(
    shape: WkvShape,
    g: &[f64],
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    mut states: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let WkvShape {
        seqs,
        steps,
        heads,
        head_dim: d,
    } = shape;
    let c = shape.channels();
    let mut y = vec![0.0; seqs * steps * c];
    let mut state = vec![0.0; shape.state_len()];
    if let Some(buf) = states.as_deref_mut() {
        buf.clear();
        buf.resize(seqs * heads * steps * shape.state_len(), 0.0);
    }
    for s in 0..seqs {
        for h in 0..heads {
            state.fill(0.0);
            let wh = &w[h * d..(h + 1) * d];
            let uh = &u[h * d..(h + 1) * d];
            for t in 0..steps {
                let base = (s * steps + t) * c + h * d;
                let gt = &g[base..base + d];
                let kt = &k[base..base + d];
                let vt = &v[base..base + d];
                if let Some(buf) = states.as_deref_mut() {
                    let off = ((s * heads + h) * steps + t) * shape.state_len();
                    buf[off..off + shape.state_len()].copy_from_slice(&state);
                }
                let yt = &mut y[base..base + d];
                // bonus term: (Σ_i g_i u_i k_i) v
                let bonus: f64 = (0..d).map(|i| gt[i] * uh[i] * kt[i]).sum();
                for j in 0..d {
                    yt[j] = bonus * vt[j];
                }
                for i in 0..d {
                    let row = &mut state[i * d..(i + 1) * d];
                    let gi = gt[i];
                    let (wi, ki) = (wh[i], kt[i]);
                    for j in 0..d {
                        yt[j] += gi * row[j];
                        row[j] = wi * row[j] + ki * vt[j];
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`wkv_forward`]'s inputs given `dy`.
pub struct WkvGrads {
    pub g: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn wkv_backward(
    shape: WkvShape,
    g: &[f64],
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    states: &[f64],
    dy: &[f64],
) -> WkvGrads {
    let WkvShape {
        seqs,
        steps,
        heads,
        head_dim: d,
    } = shape;
    let c = shape.channels();
    let mut out = WkvGrads {
        g: vec![0.0; g.len()],
        k: vec![0.0; k.len()],
        v: vec![0.0; v.len()],
        w: vec![0.0; w.len()],
        u: vec![0.0; u.len()],
    };
    // adjoint of A_{t+1}
    let mut adj = vec![0.0; shape.state_len()];
    for s in 0..seqs {
        for h in 0..heads {
            adj.fill(0.0);
            let wh = &w[h * d..(h + 1) * d];
            let uh = &u[h * d..(h + 1) * d];
            for t in (0..steps).rev() {
                let base = (s * steps + t) * c + h * d;
                let off = ((s * heads + h) * steps + t) * shape.state_len();
                let a_t = &states[off..off + shape.state_len()];
                let (gt, kt, vt, dyt) = (
                    &g[base..base + d],
                    &k[base..base + d],
                    &v[base..base + d],
                    &dy[base..base + d],
                );
                let v_dot_dy: f64 = (0..d).map(|j| vt[j] * dyt[j]).sum();
                let bonus: f64 = (0..d).map(|i| gt[i] * uh[i] * kt[i]).sum();
                for j in 0..d {
                    out.v[base + j] += bonus * dyt[j];
                }
                for i in 0..d {
                    let adj_row = &mut adj[i * d..(i + 1) * d];
                    let a_row = &a_t[i * d..(i + 1) * d];
                    // through A_{t+1} = diag(w) A_t + k_tᵀ v_t
                    let mut dk = 0.0;
                    let mut dw = 0.0;
                    // through y_t
                    let mut dg = uh[i] * kt[i] * v_dot_dy;
                    for j in 0..d {
                        dk += adj_row[j] * vt[j];
                        dw += adj_row[j] * a_row[j];
                        out.v[base + j] += kt[i] * adj_row[j];
                        dg += a_row[j] * dyt[j];
                        adj_row[j] = wh[i] * adj_row[j] + gt[i] * dyt[j];
                    }
                    out.k[base + i] += dk + gt[i] * uh[i] * v_dot_dy;
                    out.w[h * d + i] += dw;
                    out.u[h * d + i] += gt[i] * kt[i] * v_dot_dy;
                    out.g[base + i] += dg;
                }
            }
        }
    }
    out
}
